//! Command-line front end.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional
//! `--config` file and flag overrides, in that order. Commands that write
//! results put a config snapshot and an `outputs.json` listing into `--out`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! validation error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio::{load_wav, segment, SpectrogramExtractor};
use crate::config::{RunConfig, RATIO_GRID};
use crate::error::{Error, Result};
use crate::featio::{load_manifest, resolve_path, write_feature_file, FeatureSequence};
use crate::gradcheck;
use crate::model::{load_checkpoint, save_checkpoint, Ablation, Model};
use crate::train::ablation::run_ablation;
use crate::train::loso::{render_table, run_loso, write_jsonl, LosoOptions};
use crate::train::synth::{make_synthetic, write_synthetic, SynthOptions};
use crate::train::{evaluate, train_fold, wa_ua, Dataset};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mfhca", version, about = "Speech emotion recognition: training, evaluation and diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every command that builds a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// JSON-Lines utterance manifest.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "F")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub batch: Option<usize>,
    #[arg(long, value_name = "N")]
    pub patience: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_epochs: Option<usize>,
    /// Channel widths of the GRF stages, e.g. 16,32,48.
    #[arg(long, value_name = "LIST")]
    pub grf_channels: Option<String>,
    /// Denominator of the context-branch sampling ratio.
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<usize>,
    /// Ablation variant.
    #[arg(long, value_parser = parse_ablation)]
    pub ablate: Option<Ablation>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Extra `KEY=VALUE` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_ratio(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(r) if RATIO_GRID.contains(&r) => Ok(r),
        _ => Err(format!("expected one of {RATIO_GRID:?}")),
    }
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write per-segment log spectrograms of every manifest entry as feature files.
    ExtractFeatures {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a deterministic synthetic corpus with a manifest.
    SynthData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 16)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        speakers: usize,
        /// Utterance length in seconds.
        #[arg(long, default_value_t = 3.0)]
        seconds: f64,
        #[arg(long, default_value_t = 768)]
        feature_dim: usize,
        #[arg(long, default_value_t = 149)]
        feature_frames: usize,
    },
    /// Train one model on the manifest and save a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Speaker held out for early stopping.
        #[arg(long)]
        val_speaker: Option<String>,
    },
    /// Evaluate a checkpoint on the manifest.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Restrict evaluation to one speaker.
        #[arg(long)]
        speaker: Option<String>,
    },
    /// Leave-one-speaker-out cross-validation.
    Loso {
        #[command(flatten)]
        run: RunArgs,
        /// Only run the first N folds.
        #[arg(long)]
        max_folds: Option<usize>,
    },
    /// Cross-validate every ablation variant and print the comparison table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        max_folds: Option<usize>,
    },
    /// Finite-difference gradient checks of every operator and a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of random seeds per check.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Print the learnable parameter count and per-module breakdown.
    Params {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the pooled fused embedding of every utterance as a feature file.
    DumpEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let path_str = |p: &Path| p.display().to_string();
        let flags = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("grf_channels", self.grf_channels.clone()),
            ("ratio", self.ratio.map(|v| v.to_string())),
            ("ablate", self.ablate.map(|v| v.to_string())),
            ("manifest", self.manifest.as_deref().map(path_str)),
            ("out", self.out.as_deref().map(path_str)),
        ];
        for (key, value) in flags {
            if let Some(value) = value {
                cfg.set(key, &value)?;
            }
        }
        for kv in &self.set {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }
}

fn require_manifest(cfg: &RunConfig) -> Result<&Path> {
    cfg.manifest
        .as_deref()
        .ok_or_else(|| Error::Config("a manifest is required (--manifest or `manifest =` in the config)".into()))
}

/// Collects written files and records them in `outputs.json` under `--out`.
struct Outputs {
    dir: Option<PathBuf>,
    command: &'static str,
    files: Vec<String>,
}

impl Outputs {
    fn new(cfg: &RunConfig, command: &'static str) -> Result<Self> {
        if let Some(dir) = &cfg.out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut out = Self {
            dir: cfg.out.clone(),
            command,
            files: Vec::new(),
        };
        out.write("config.txt", cfg.snapshot().as_bytes())?;
        Ok(out)
    }

    fn path(&mut self, name: &str) -> Option<PathBuf> {
        let dir = self.dir.as_ref()?;
        self.files.push(name.to_string());
        Some(dir.join(name))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(p) = self.path(name) {
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let doc = serde_json::json!({
            "command": self.command,
            "files": self.files,
        });
        let p = dir.join("outputs.json");
        std::fs::write(&p, format!("{doc:#}\n")).map_err(|e| Error::io(&p, e))
    }
}

fn load_for(cfg: &RunConfig, ablation: Ablation) -> Result<Dataset> {
    let mut opts = cfg.data.clone();
    opts.load_spec = ablation.uses_spec();
    opts.load_features = ablation.uses_features();
    Dataset::load(require_manifest(cfg)?, &opts)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::ExtractFeatures { run } => extract_features(&run.resolve()?),
        Command::SynthData {
            run,
            per_class,
            speakers,
            seconds,
            feature_dim,
            feature_frames,
        } => {
            let cfg = run.resolve()?;
            let dir = cfg
                .out
                .clone()
                .ok_or_else(|| Error::Config("synth-data needs --out".into()))?;
            let opts = SynthOptions {
                speakers,
                seconds,
                feature_dim,
                feature_frames,
                ..SynthOptions::default()
            };
            let data = make_synthetic(cfg.train.seed, per_class, &opts)?;
            let manifest = write_synthetic(&dir, &data)?;
            let mut out = Outputs::new(&cfg, "synth-data")?;
            out.files.push("manifest.jsonl".into());
            out.files.extend(data.entries.iter().flat_map(|e| [e.wav_path.clone(), e.feature_path.clone()]));
            out.finish()?;
            println!("wrote {} utterances; manifest {}", data.entries.len(), manifest.display());
            Ok(())
        }
        Command::Train { run, val_speaker } => train(&run.resolve()?, val_speaker),
        Command::Eval {
            run,
            checkpoint,
            speaker,
        } => eval(&run.resolve()?, &checkpoint, speaker),
        Command::Loso { run, max_folds } => {
            let cfg = run.resolve()?;
            let ds = load_for(&cfg, cfg.model.ablation)?;
            let opts = LosoOptions {
                parallel: cfg.parallel,
                max_folds,
            };
            let (report, _) = run_loso(&ds, &cfg.model, &cfg.train, &opts)?;
            let mut out = Outputs::new(&cfg, "loso")?;
            if let Some(p) = out.path("folds.jsonl") {
                write_jsonl(&p, &report)?;
            }
            let table = render_table(&report);
            out.write("folds.txt", table.as_bytes())?;
            out.finish()?;
            print!("{table}");
            Ok(())
        }
        Command::Ablate { run, max_folds } => {
            let cfg = run.resolve()?;
            let ds = load_for(&cfg, Ablation::FULL)?;
            let opts = LosoOptions {
                parallel: cfg.parallel,
                max_folds,
            };
            let report = run_ablation(&ds, &cfg.model, &cfg.train, &opts)?;
            let mut out = Outputs::new(&cfg, "ablate")?;
            let mut lines = String::new();
            for row in &report.rows {
                lines.push_str(&serde_json::to_string(row).expect("row serializes"));
                lines.push('\n');
            }
            out.write("ablation.jsonl", lines.as_bytes())?;
            let table = report.render();
            out.write("ablation.txt", table.as_bytes())?;
            out.finish()?;
            print!("{table}");
            Ok(())
        }
        Command::Gradcheck { seed, seeds } => {
            let reports = gradcheck::run_suite(seed, seeds.max(1))?;
            let mut failed = Vec::new();
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<28} {:>12.3e} {status}", r.name, r.max_rel_error);
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if failed.is_empty() {
                println!("all {} checks below {:e}", reports.len(), gradcheck::TOLERANCE);
                Ok(())
            } else {
                Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Params { run } => {
            let cfg = run.resolve()?;
            let model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            for (group, n) in model.param_breakdown() {
                println!("{group:<24} {n:>10}");
            }
            println!("{:<24} {:>10}", "total", model.count_params());
            Ok(())
        }
        Command::DumpEmbeddings { run, checkpoint } => dump_embeddings(&run.resolve()?, &checkpoint),
    }
}

fn extract_features(cfg: &RunConfig) -> Result<()> {
    let manifest = require_manifest(cfg)?;
    let mut out = Outputs::new(cfg, "extract-features")?;
    let dir = out
        .dir
        .clone()
        .ok_or_else(|| Error::Config("extract-features needs --out".into()))?;
    let extractor = SpectrogramExtractor::new(cfg.data.frontend.clone())?;
    let entries = load_manifest(manifest)?;
    for e in &entries {
        let audio = load_wav(resolve_path(manifest, &e.wav_path), cfg.data.frontend.sample_rate)?;
        for (k, seg) in segment(&audio, cfg.data.frontend.segment_seconds).iter().enumerate() {
            let spec = extractor.extract(seg)?;
            let name = format!("{}_seg{k:03}.mfh", e.utterance_id);
            let seq = FeatureSequence::new(spec.frames, spec.bins, spec.data)?;
            write_feature_file(dir.join(&name), &seq)?;
            out.files.push(name);
        }
    }
    let n = out.files.len() - 1;
    out.finish()?;
    println!("wrote {n} spectrogram files for {} utterances", entries.len());
    Ok(())
}

fn train(cfg: &RunConfig, val_speaker: Option<String>) -> Result<()> {
    let ds = load_for(cfg, cfg.model.ablation)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, u) in ds.utterances.iter().enumerate() {
        if Some(&u.speaker) == val_speaker.as_ref() {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    if let Some(s) = &val_speaker {
        if val.is_empty() {
            return Err(Error::Data(format!("validation speaker {s:?} has no utterances")));
        }
    }
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let history = train_fold(&mut model, &ds, &train, &val, &cfg.train)?;
    let mut out = Outputs::new(cfg, "train")?;
    if let Some(p) = out.path("model.mfc") {
        save_checkpoint(&p, &model)?;
    }
    let mut lines = String::new();
    for e in &history.epochs {
        lines.push_str(&serde_json::to_string(e).expect("epoch record serializes"));
        lines.push('\n');
        println!(
            "epoch {:>3}  loss {:.4}{}",
            e.epoch,
            e.train_loss,
            e.val_ua.map_or(String::new(), |ua| format!("  val UA {ua:.4}"))
        );
    }
    out.write("history.jsonl", lines.as_bytes())?;
    out.finish()?;
    println!(
        "kept epoch {} of {}{}",
        history.best_epoch,
        history.epochs.len(),
        if history.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: &Path, speaker: Option<String>) -> Result<()> {
    let mut model = load_checkpoint(checkpoint)?;
    let ds = load_for(cfg, model.config.ablation)?;
    let utts: Vec<usize> = (0..ds.utterances.len())
        .filter(|&i| speaker.as_ref().is_none_or(|s| &ds.utterances[i].speaker == s))
        .collect();
    if utts.is_empty() {
        return Err(Error::Data("no utterances to evaluate".into()));
    }
    let result = evaluate(&mut model, &ds, &utts, cfg.train.batch)?;
    let (wa, ua) = wa_ua(&result.confusion)?;
    let mut out = Outputs::new(cfg, "eval")?;
    let doc = serde_json::json!({ "wa": wa, "ua": ua, "confusion": result.confusion });
    out.write("metrics.jsonl", format!("{doc}\n").as_bytes())?;
    out.finish()?;
    for row in result.confusion.rows() {
        println!("{}", row.iter().map(|c| format!("{c:>6}")).collect::<String>());
    }
    println!("WA {wa:.4}  UA {ua:.4}");
    Ok(())
}

fn dump_embeddings(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let mut model = load_checkpoint(checkpoint)?;
    let ds = load_for(cfg, model.config.ablation)?;
    let all: Vec<usize> = (0..ds.utterances.len()).collect();
    let rows = crate::train::trainer::infer(&mut model, &ds, &all, cfg.train.batch)?;
    let width = rows.first().map_or(0, |r| r.2.len());
    let data: Vec<f32> = rows.iter().flat_map(|r| r.2.iter().copied()).collect();
    let seq = FeatureSequence::new(rows.len(), width, data)?;
    let mut out = Outputs::new(cfg, "dump-embeddings")?;
    if out.dir.is_none() {
        return Err(Error::Config("dump-embeddings needs --out".into()));
    }
    if let Some(p) = out.path("embeddings.mfh") {
        write_feature_file(&p, &seq)?;
    }
    let index: String = rows
        .iter()
        .map(|(u, ..)| {
            let u = &ds.utterances[*u];
            format!("{}\t{}\t{}\n", u.id, u.speaker, u.label.as_str())
        })
        .collect();
    out.write("embeddings.tsv", index.as_bytes())?;
    out.finish()?;
    println!("wrote {} embeddings of width {width}", rows.len());
    Ok(())
}
