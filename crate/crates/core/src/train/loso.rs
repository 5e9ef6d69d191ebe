//! Leave-one-speaker-out cross-validation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::metrics::ConfusionMatrix;
use super::trainer::{evaluate, train_fold, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

/// Utterance indices of one fold. Test holds exactly one speaker; validation
/// holds one other speaker when at least three speakers exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub id: usize,
    pub test_speaker: String,
    pub val_speaker: Option<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seed of fold `fold` derived from the master seed by a fixed offset.
pub fn fold_seed(master: u64, fold: usize) -> u64 {
    master.wrapping_add(1000 * (fold as u64 + 1))
}

/// One fold per entry of `speakers`, in that order. `utterance_speakers[i]`
/// is the speaker of utterance `i`.
pub fn plan_folds(utterance_speakers: &[String], speakers: &[String], seed: u64) -> Result<Vec<Fold>> {
    if speakers.len() < 2 {
        return Err(Error::Data(format!(
            "cross-validation needs at least 2 speakers, found {}",
            speakers.len()
        )));
    }
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); speakers.len()];
    for (i, s) in utterance_speakers.iter().enumerate() {
        let k = speakers
            .iter()
            .position(|x| x == s)
            .ok_or_else(|| Error::Data(format!("utterance {i} has unlisted speaker {s:?}")))?;
        by_speaker[k].push(i);
    }
    if let Some(k) = by_speaker.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("speaker {:?} has no utterances", speakers[k])));
    }
    let mut folds = Vec::with_capacity(speakers.len());
    for (id, test_speaker) in speakers.iter().enumerate() {
        let others: Vec<usize> = (0..speakers.len()).filter(|&k| k != id).collect();
        let val_idx = if others.len() >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(seed, id));
            others.choose(&mut rng).copied()
        } else {
            None
        };
        let train = others
            .iter()
            .filter(|&&k| Some(k) != val_idx)
            .flat_map(|&k| by_speaker[k].iter().copied())
            .collect::<Vec<_>>();
        let mut train = train;
        train.sort_unstable();
        folds.push(Fold {
            id,
            test_speaker: test_speaker.clone(),
            val_speaker: val_idx.map(|k| speakers[k].clone()),
            train,
            val: val_idx.map(|k| by_speaker[k].clone()).unwrap_or_default(),
            test: by_speaker[id].clone(),
        });
    }
    Ok(folds)
}

/// Folds over every speaker of a dataset, in sorted speaker order.
pub fn dataset_folds(ds: &Dataset, seed: u64) -> Result<Vec<Fold>> {
    let utterance_speakers: Vec<String> = ds.utterances.iter().map(|u| u.speaker.clone()).collect();
    plan_folds(&utterance_speakers, &ds.speakers(), seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_speaker: String,
    pub val_speaker: Option<String>,
    pub wa: f64,
    pub ua: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub folds: Vec<FoldResult>,
    pub mean_wa: f64,
    pub mean_ua: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LosoOptions {
    /// Run folds on the rayon pool.
    pub parallel: bool,
    /// Only run the first `n` folds.
    pub max_folds: Option<usize>,
}

fn run_fold(ds: &Dataset, fold: &Fold, model_cfg: &ModelConfig, train_cfg: &TrainConfig, master: u64) -> Result<(FoldResult, Model<f32>)> {
    let seed = fold_seed(master, fold.id);
    let mut model = Model::<f32>::new(model_cfg.clone(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let history = train_fold(&mut model, ds, &fold.train, &fold.val, &cfg)?;
    let eval = evaluate(&mut model, ds, &fold.test, cfg.batch)?;
    let (wa, ua) = super::metrics::wa_ua(&eval.confusion).map_err(|e| {
        Error::Data(format!("fold {} (speaker {}): {e}", fold.id, fold.test_speaker))
    })?;
    Ok((
        FoldResult {
            fold: fold.id,
            test_speaker: fold.test_speaker.clone(),
            val_speaker: fold.val_speaker.clone(),
            wa,
            ua,
            epochs: history.epochs.len(),
            best_epoch: history.best_epoch,
            confusion: eval.confusion,
        },
        model,
    ))
}

/// Trains and tests one fresh model per fold. Results are ordered by fold id
/// regardless of execution order; the aggregate is the mean over folds.
pub fn run_loso(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &LosoOptions,
) -> Result<(LosoReport, Vec<Model<f32>>)> {
    let mut folds = dataset_folds(ds, train_cfg.seed)?;
    if let Some(n) = opts.max_folds {
        folds.truncate(n.max(1));
    }
    let run = |f: &Fold| run_fold(ds, f, model_cfg, train_cfg, train_cfg.seed);
    let results: Vec<(FoldResult, Model<f32>)> = if opts.parallel {
        folds.par_iter().map(run).collect::<Result<_>>()?
    } else {
        folds.iter().map(run).collect::<Result<_>>()?
    };
    let (mut folds, models): (Vec<FoldResult>, Vec<Model<f32>>) = results.into_iter().unzip();
    folds.sort_by_key(|f| f.fold);
    let n = folds.len() as f64;
    let mean_wa = folds.iter().map(|f| f.wa).sum::<f64>() / n;
    let mean_ua = folds.iter().map(|f| f.ua).sum::<f64>() / n;
    Ok((
        LosoReport {
            folds,
            mean_wa,
            mean_ua,
        },
        models,
    ))
}

/// One JSON object per fold followed by an aggregate line.
pub fn write_jsonl(path: impl AsRef<Path>, report: &LosoReport) -> Result<()> {
    let path = path.as_ref();
    let mut text = Vec::new();
    for f in &report.folds {
        serde_json::to_writer(&mut text, f).expect("fold result serializes");
        text.push(b'\n');
    }
    let agg = serde_json::json!({
        "aggregate": true,
        "folds": report.folds.len(),
        "mean_wa": report.mean_wa,
        "mean_ua": report.mean_ua,
    });
    writeln!(text, "{agg}").expect("write to vec");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Plain-text per-fold table with a mean row.
pub fn render_table(report: &LosoReport) -> String {
    let mut s = format!("{:<6} {:<12} {:>8} {:>8} {:>7}\n", "fold", "speaker", "WA", "UA", "epochs");
    for f in &report.folds {
        s.push_str(&format!(
            "{:<6} {:<12} {:>8.4} {:>8.4} {:>7}\n",
            f.fold, f.test_speaker, f.wa, f.ua, f.epochs
        ));
    }
    s.push_str(&format!("{:<6} {:<12} {:>8.4} {:>8.4}\n", "mean", "", report.mean_wa, report.mean_ua));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn partition_without_leakage() {
        let utt = names(&["a", "b", "c", "a", "b", "c", "d"]);
        let spk = names(&["a", "b", "c", "d"]);
        let folds = plan_folds(&utt, &spk, 5).unwrap();
        assert_eq!(folds.len(), 4);
        let mut tested: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
        tested.sort_unstable();
        assert_eq!(tested, (0..7).collect::<Vec<_>>());
        for f in &folds {
            let vs = f.val_speaker.as_ref().unwrap();
            assert_ne!(vs, &f.test_speaker);
            let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn degenerate_speaker_sets() {
        assert!(plan_folds(&names(&["a"]), &names(&["a"]), 0).is_err());
        assert!(plan_folds(&names(&["a", "b"]), &names(&["a", "b", "c"]), 0).is_err());
        let two = plan_folds(&names(&["a", "b"]), &names(&["a", "b"]), 0).unwrap();
        assert!(two.iter().all(|f| f.val_speaker.is_none() && f.train.len() == 1));
    }
}
