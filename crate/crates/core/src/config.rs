//! Plain-text `key = value` run configuration.
//!
//! Blank lines, `#`/`;` comments and `[section]` headers are ignored; values
//! may be wrapped in double quotes. Every key has a default, so an empty file
//! is a valid configuration.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::train::{DataOptions, TrainConfig};

/// Sampling-ratio denominators accepted from configuration files and flags.
pub const RATIO_GRID: [usize; 4] = [2, 4, 8, 16];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataOptions,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Run cross-validation folds concurrently.
    pub parallel: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataOptions::default(),
            manifest: None,
            out: None,
            parallel: true,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: {why}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(key, value, "not a valid value"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    match parse_list(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(bad(key, value, "expected two comma-separated integers")),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`], in snapshot order.
    pub const KEYS: [&'static str; 23] = [
        "seed",
        "lr",
        "batch",
        "patience",
        "max_epochs",
        "target_train_accuracy",
        "grf_channels",
        "ratio",
        "reduction",
        "min_reduced",
        "time_kernel",
        "freq_kernel",
        "d_model",
        "lstm_hidden",
        "feature_dim",
        "feature_frames",
        "segment_seconds",
        "spec_bins",
        "classifier_hidden",
        "ablate",
        "manifest",
        "out",
        "parallel",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.train.seed = parse(key, v)?,
            "lr" => {
                let lr: f64 = parse(key, v)?;
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(bad(key, v, "must be a positive number"));
                }
                self.train.lr = lr;
            }
            "batch" => self.train.batch = parse(key, v)?,
            "patience" => {
                let p: usize = parse(key, v)?;
                if p == 0 {
                    return Err(bad(key, v, "must be at least 1"));
                }
                self.train.patience = p;
            }
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "target_train_accuracy" => {
                self.train.target_train_accuracy = match v {
                    "" | "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "grf_channels" => self.model.grf_channels = parse_list(key, v)?,
            "ratio" => {
                let r: usize = parse(key, v)?;
                if !RATIO_GRID.contains(&r) {
                    return Err(bad(key, v, "must be one of 2, 4, 8, 16"));
                }
                self.model.ratio = r;
            }
            "reduction" => self.model.reduction = parse(key, v)?,
            "min_reduced" => self.model.min_reduced = parse(key, v)?,
            "time_kernel" => self.model.time_kernel = parse_pair(key, v)?,
            "freq_kernel" => self.model.freq_kernel = parse_pair(key, v)?,
            "d_model" => self.model.d_model = parse(key, v)?,
            "lstm_hidden" => self.model.lstm_hidden = parse(key, v)?,
            "feature_dim" => self.model.feature_dim = parse(key, v)?,
            "feature_frames" => self.data.feature_frames = parse(key, v)?,
            "segment_seconds" => {
                let secs: f64 = parse(key, v)?;
                if !(secs > 0.0 && secs.is_finite()) {
                    return Err(bad(key, v, "must be a positive number of seconds"));
                }
                self.data.frontend.segment_seconds = secs;
                self.model.spec_frames = self.data.frontend.segment_frames();
            }
            "spec_bins" => {
                let bins: usize = parse(key, v)?;
                self.data.frontend.bins = bins;
                self.model.spec_bins = bins;
            }
            "parallel" => self.parallel = parse(key, v)?,
            "classifier_hidden" => self.model.classifier_hidden = parse_pair(key, v)?,
            "ablate" => self.model.ablation = v.parse::<Ablation>()?,
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => {
                return Err(Error::Config(format!(
                    "unknown configuration key {other:?}; known keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "seed" => self.train.seed.to_string(),
            "lr" => format!("{:e}", self.train.lr),
            "batch" => self.train.batch.to_string(),
            "patience" => self.train.patience.to_string(),
            "max_epochs" => self.train.max_epochs.to_string(),
            "target_train_accuracy" => self
                .train
                .target_train_accuracy
                .map_or("none".into(), |a| a.to_string()),
            "grf_channels" => join(&self.model.grf_channels),
            "ratio" => self.model.ratio.to_string(),
            "reduction" => self.model.reduction.to_string(),
            "min_reduced" => self.model.min_reduced.to_string(),
            "time_kernel" => join(&[self.model.time_kernel.0, self.model.time_kernel.1]),
            "freq_kernel" => join(&[self.model.freq_kernel.0, self.model.freq_kernel.1]),
            "d_model" => self.model.d_model.to_string(),
            "lstm_hidden" => self.model.lstm_hidden.to_string(),
            "feature_dim" => self.model.feature_dim.to_string(),
            "feature_frames" => self.data.feature_frames.to_string(),
            "segment_seconds" => self.data.frontend.segment_seconds.to_string(),
            "spec_bins" => self.data.frontend.bins.to_string(),
            "parallel" => self.parallel.to_string(),
            "classifier_hidden" => join(&[self.model.classifier_hidden.0, self.model.classifier_hidden.1]),
            "ablate" => self.model.ablation.to_string(),
            "manifest" => opt_path(&self.manifest),
            "out" => opt_path(&self.out),
            _ => unreachable!("snapshot key {key}"),
        }
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') || line.starts_with('[') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", origin.display(), i + 1))
            })?;
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every effective setting as `key = value` lines; loading the snapshot
    /// reproduces this configuration.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            s.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("grf_channels", "16,32").unwrap();
        cfg.set("ratio", "8").unwrap();
        cfg.set("ablate", "no-hca").unwrap();
        cfg.set("lr", "0.001").unwrap();
        cfg.set("manifest", "data/m.jsonl").unwrap();
        cfg.set("segment_seconds", "1").unwrap();
        cfg.set("spec_bins", "64").unwrap();
        cfg.set("parallel", "false").unwrap();
        assert_eq!((cfg.model.spec_frames, cfg.model.spec_bins), (97, 64));
        let mut back = RunConfig::default();
        back.apply_text(&cfg.snapshot(), Path::new("snap")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_sections_and_quotes() {
        let mut cfg = RunConfig::default();
        let text = "# run\n[train]\nbatch = 8\n; note\nout = \"runs/a b\"\n";
        cfg.apply_text(text, Path::new("x")).unwrap();
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.out, Some(PathBuf::from("runs/a b")));
    }

    #[test]
    fn rejects_unknown_and_off_grid() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("colour", "red").is_err());
        assert!(cfg.set("ratio", "3").is_err());
        assert!(cfg.set("ratio", "1").is_err());
        assert!(cfg.set("patience", "0").is_err());
        assert!(cfg.apply_text("batch 8", Path::new("x")).is_err());
    }
}
