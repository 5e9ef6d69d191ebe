//! Mini-batch Adam training with validation-driven early stopping, and
//! utterance-level evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::early_stop::{Decision, EarlyStopping};
use super::metrics::ConfusionMatrix;
use crate::autodiff::{BatchNormState, Graph, NormMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Stop as soon as utterance-level training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 32,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: Option<f64>,
    pub val_ua: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Utterance-level predictions from segment logits averaged per utterance.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    /// `(utterance index, predicted class, mean logits)`.
    pub predictions: Vec<(usize, usize, Vec<f32>)>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        let total = self.confusion.total();
        if total == 0 {
            0.0
        } else {
            self.confusion.trace() as f64 / total as f64
        }
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(utterance index, mean logits, mean pooled embedding)`.
pub type UtteranceOutput = (usize, Vec<f32>, Vec<f32>);

/// Runs the model in evaluation mode on every segment of `utterances`, returning
/// per-utterance mean logits and mean pooled embeddings.
pub fn infer(
    model: &mut Model<f32>,
    ds: &Dataset,
    utterances: &[usize],
    batch: usize,
) -> Result<Vec<UtteranceOutput>> {
    let ab = model.config.ablation;
    let classes = model.config.classes;
    let items = ds.segments_of(utterances);
    let mut sums: Vec<(Vec<f64>, Vec<f64>, usize)> = Vec::new();
    let mut slot = std::collections::HashMap::new();
    for &u in utterances {
        slot.entry(u).or_insert_with(|| {
            sums.push((vec![0.0; classes], Vec::new(), 0));
            sums.len() - 1
        });
    }
    let norm = model.norm;
    for chunk in items.chunks(batch.max(1)) {
        let b = ds.batch(chunk, norm.as_ref(), ab.uses_spec(), ab.uses_features())?;
        let mut g = Graph::new();
        let s = b.spec.map(|t| g.constant(t));
        let f = b.features.map(|t| g.constant(t));
        let out = model.forward(&mut g, s, f, NormMode::Eval)?;
        let logits = g.value(out.logits);
        let emb = g.value(out.embedding);
        let width = emb.shape()[1];
        for (row, &(u, _)) in chunk.iter().enumerate() {
            let entry = &mut sums[slot[&u]];
            for (acc, &v) in entry.0.iter_mut().zip(&logits.data()[row * classes..(row + 1) * classes]) {
                *acc += v as f64;
            }
            if entry.1.is_empty() {
                entry.1 = vec![0.0; width];
            }
            for (acc, &v) in entry.1.iter_mut().zip(&emb.data()[row * width..(row + 1) * width]) {
                *acc += v as f64;
            }
            entry.2 += 1;
        }
    }
    let mut out = Vec::with_capacity(utterances.len());
    for &u in utterances {
        let (l, e, n) = &sums[slot[&u]];
        let n = *n as f64;
        out.push((
            u,
            l.iter().map(|v| (v / n) as f32).collect(),
            e.iter().map(|v| (v / n) as f32).collect(),
        ));
    }
    Ok(out)
}

/// Utterance-level confusion matrix of the model on `utterances`.
pub fn evaluate(model: &mut Model<f32>, ds: &Dataset, utterances: &[usize], batch: usize) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::new(model.config.classes);
    let mut predictions = Vec::with_capacity(utterances.len());
    for (u, logits, _) in infer(model, ds, utterances, batch)? {
        let pred = argmax(&logits);
        confusion.record(ds.utterances[u].label.index(), pred);
        predictions.push((u, pred, logits));
    }
    Ok(Evaluation {
        confusion,
        predictions,
    })
}

fn diagnostics(params: &ParamSet<f32>) -> String {
    let mut norms = params.norms();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let nonfinite: Vec<&str> = norms
        .iter()
        .filter(|(_, n)| !n.is_finite())
        .map(|(name, _)| name.as_str())
        .collect();
    let top: Vec<String> = norms
        .iter()
        .take(5)
        .map(|(name, n)| format!("{name}={n:.4e}"))
        .collect();
    format!(
        "parameter norms (largest): {}; non-finite: {:?}",
        top.join(", "),
        nonfinite
    )
}

/// Trains `model` on `train` with optional validation-based early stopping.
///
/// With `val` non-empty, training stops after `patience` epochs without a
/// validation UA improvement and the model is restored to the best epoch.
/// Without validation the final parameters are kept. Spectrogram
/// normalization is fitted on `train` and stored in the model.
pub fn train_fold(
    model: &mut Model<f32>,
    ds: &Dataset,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let batch = cfg.batch;
    let mut monitor = |m: &mut Model<f32>, _epoch: usize| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            Ok(Some(evaluate(m, ds, val, batch)?.confusion.ua()?))
        }
    };
    train_with_monitor(model, ds, train, cfg, &mut monitor)
}

/// Score source consulted after every epoch; `None` disables early stopping.
pub type Monitor<'a> = dyn FnMut(&mut Model<f32>, usize) -> Result<Option<f64>> + 'a;

/// [`train_fold`] with an arbitrary per-epoch validation score.
pub fn train_with_monitor(
    model: &mut Model<f32>,
    ds: &Dataset,
    train: &[usize],
    cfg: &TrainConfig,
    monitor: &mut Monitor<'_>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let classes = model.config.classes;
    let mut present = vec![false; classes];
    for &u in train {
        present[ds.utterances[u].label.index()] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::Data(format!("training set has no samples of class {missing}")));
    }
    let ab = model.config.ablation;
    if ab.uses_spec() {
        model.norm = Some(ds.fit_norm(train)?);
    }
    let norm = model.norm;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(ParamSet<f32>, Vec<BatchNormState<f32>>)> = None;
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut items = ds.segments_of(train);
    let ids: Vec<_> = model.params.ids().collect();

    for epoch in 1..=cfg.max_epochs {
        items.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (bi, chunk) in items.chunks(cfg.batch).enumerate() {
            let b = ds.batch(chunk, norm.as_ref(), ab.uses_spec(), ab.uses_features())?;
            let mut g = Graph::new();
            let s = b.spec.map(|t| g.constant(t));
            let f = b.features.map(|t| g.constant(t));
            let out = model.forward(&mut g, s, f, NormMode::Train)?;
            let loss = g.cross_entropy(out.logits, &b.labels)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {value} at epoch {epoch}, batch {bi}; {}",
                    diagnostics(&model.params)
                )));
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = ids.iter().map(|&id| grads.param(id).cloned()).collect();
            adam.step(&mut model.params, &grads, cfg.lr).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "{msg} at epoch {epoch}, batch {bi}; {}",
                    diagnostics(&model.params)
                )),
                other => other,
            })?;
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }

        let train_accuracy = match cfg.target_train_accuracy {
            Some(_) => Some(evaluate(model, ds, train, cfg.batch)?.accuracy()),
            None => None,
        };
        let val_ua = monitor(model, epoch)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy,
            val_ua,
        });

        match val_ua.map(|ua| stopper.observe(epoch, ua)) {
            Some(Decision::Improved) => {
                best = Some((model.params.clone(), model.bn.clone()));
                history.best_epoch = epoch;
            }
            Some(Decision::Stop) => {
                history.stopped_early = true;
                break;
            }
            Some(Decision::Continue) => {}
            None => history.best_epoch = epoch,
        }
        if let (Some(target), Some(acc)) = (cfg.target_train_accuracy, train_accuracy) {
            if acc >= target {
                break;
            }
        }
    }
    if let Some((params, bn)) = best {
        model.params = params;
        model.bn = bn;
    }
    Ok(history)
}
