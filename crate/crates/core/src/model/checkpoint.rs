//! Model persistence in the `MFC1` tensor container.
//!
//! Besides every learnable tensor the container holds the batch-norm running
//! statistics (`mf.grf{i}.bn.running_mean` / `running_var`), the optional
//! spectrogram normalization (`frontend.norm`, `[mean, std]`) and the model
//! configuration as small integer-valued tensors under `config.*`.

use std::path::Path;

use super::{Ablation, Model, ModelConfig};
use crate::audio::NormStats;
use crate::error::{CheckpointError, Error, Result};
use crate::featio::{decode_tensor_map, encode_tensor_map};
use crate::tensor::Tensor;

type Entries = Vec<(String, Tensor<f32>)>;

fn ints(values: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(&[values.len()], |i| values[i] as f32)
}

fn config_entries(c: &ModelConfig) -> Entries {
    let e = |name: &str, t: Tensor<f32>| (format!("config.{name}"), t);
    vec![
        e("spec_shape", ints(&[c.spec_frames, c.spec_bins])),
        e("grf_channels", ints(&c.grf_channels)),
        e("ratio", ints(&[c.ratio])),
        e("reduction", ints(&[c.reduction, c.min_reduced])),
        e("time_kernel", ints(&[c.time_kernel.0, c.time_kernel.1])),
        e("freq_kernel", ints(&[c.freq_kernel.0, c.freq_kernel.1])),
        e("widths", ints(&[c.d_model, c.lstm_hidden, c.feature_dim])),
        e("classifier", ints(&[c.classifier_hidden.0, c.classifier_hidden.1, c.classes])),
        e("ablation", Tensor::new(&[3], c.ablation.code().to_vec()).expect("three flags")),
    ]
}

fn parse_config(entries: &Entries) -> std::result::Result<ModelConfig, CheckpointError> {
    let get = |name: &str, len: Option<usize>| -> std::result::Result<Vec<usize>, CheckpointError> {
        let key = format!("config.{name}");
        let t = entries
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingParameter(key.clone()))?;
        if t.ndim() != 1 || len.is_some_and(|l| t.len() != l) {
            return Err(CheckpointError::BadConfig(key));
        }
        t.data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as usize)
                } else {
                    Err(CheckpointError::BadConfig(key.clone()))
                }
            })
            .collect()
    };
    let spec = get("spec_shape", Some(2))?;
    let red = get("reduction", Some(2))?;
    let tk = get("time_kernel", Some(2))?;
    let fk = get("freq_kernel", Some(2))?;
    let widths = get("widths", Some(3))?;
    let cls = get("classifier", Some(3))?;
    let ab_key = "config.ablation";
    let ablation = entries
        .iter()
        .find(|(n, _)| n == ab_key)
        .ok_or_else(|| CheckpointError::MissingParameter(ab_key.into()))
        .and_then(|(_, t)| Ablation::from_code(t.data()).ok_or_else(|| CheckpointError::BadConfig(ab_key.into())))?;
    Ok(ModelConfig {
        spec_frames: spec[0],
        spec_bins: spec[1],
        grf_channels: get("grf_channels", None)?,
        ratio: get("ratio", Some(1))?[0],
        reduction: red[0],
        min_reduced: red[1],
        time_kernel: (tk[0], tk[1]),
        freq_kernel: (fk[0], fk[1]),
        d_model: widths[0],
        lstm_hidden: widths[1],
        feature_dim: widths[2],
        classifier_hidden: (cls[0], cls[1]),
        classes: cls[2],
        ablation,
    })
}

fn bn_names(i: usize) -> (String, String) {
    (
        format!("mf.grf{i}.bn.running_mean"),
        format!("mf.grf{i}.bn.running_var"),
    )
}

/// Every tensor of the model under its checkpoint name.
pub fn to_entries(model: &Model<f32>) -> Entries {
    let mut out = config_entries(&model.config);
    if let Some(n) = model.norm {
        out.push(("frontend.norm".into(), Tensor::new(&[2], vec![n.mean, n.std]).expect("two values")));
    }
    for (_, name, t) in model.params.iter() {
        out.push((name.to_string(), t.clone()));
    }
    for (i, bn) in model.bn.iter().enumerate() {
        let (m, v) = bn_names(i);
        let c = bn.channels();
        out.push((m, Tensor::new(&[c], bn.running_mean.clone()).expect("channel vector")));
        out.push((v, Tensor::new(&[c], bn.running_var.clone()).expect("channel vector")));
    }
    out
}

/// Rebuilds a model from checkpoint entries, checking every name and shape
/// against the stored configuration.
pub fn from_entries(entries: Entries) -> std::result::Result<Model<f32>, CheckpointError> {
    let config = parse_config(&entries)?;
    let mut model = Model::<f32>::new(config, 0).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let mut filled = vec![false; model.params.len()];
    let mut bn_filled = vec![[false; 2]; model.bn.len()];
    for (name, t) in entries {
        if name.starts_with("config.") {
            continue;
        }
        if name == "frontend.norm" {
            if t.shape() != [2] {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: vec![2],
                    found: t.shape().to_vec(),
                });
            }
            model.norm = Some(NormStats {
                mean: t.data()[0],
                std: t.data()[1],
            });
            continue;
        }
        if let Some(id) = model.params.id(&name) {
            let expected = model.params.get(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            *model.params.get_mut(id) = t;
            filled[id.index()] = true;
            continue;
        }
        let bn_slot = (0..model.bn.len()).find_map(|i| {
            let (m, v) = bn_names(i);
            if name == m {
                Some((i, 0))
            } else if name == v {
                Some((i, 1))
            } else {
                None
            }
        });
        match bn_slot {
            Some((i, which)) => {
                let c = model.bn[i].channels();
                if t.shape() != [c] {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: vec![c],
                        found: t.shape().to_vec(),
                    });
                }
                let data = t.into_data();
                if which == 0 {
                    model.bn[i].running_mean = data;
                } else {
                    model.bn[i].running_var = data;
                }
                bn_filled[i][which] = true;
            }
            None => return Err(CheckpointError::UnexpectedEntry(name)),
        }
    }
    if let Some(id) = model.params.ids().find(|id| !filled[id.index()]) {
        return Err(CheckpointError::MissingParameter(model.params.name(id).to_string()));
    }
    for (i, f) in bn_filled.iter().enumerate() {
        let (m, v) = bn_names(i);
        if !f[0] {
            return Err(CheckpointError::MissingParameter(m));
        }
        if !f[1] {
            return Err(CheckpointError::MissingParameter(v));
        }
    }
    Ok(model)
}

pub fn encode_checkpoint(model: &Model<f32>) -> Vec<u8> {
    encode_tensor_map(&to_entries(model))
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Model<f32>, CheckpointError> {
    from_entries(decode_tensor_map(bytes)?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}
