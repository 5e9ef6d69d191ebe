//! Hierarchical co-attention fusion of the spectrogram sequence with
//! external self-supervised features, and the classification head.

use super::layers::{BiLstm, Init, LinearLayer};
use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

/// `[N, C, T, F]` → `[N, T, C]` by averaging over the frequency axis.
pub fn frequency_mean<T: Real>(g: &mut Graph<T>, map: Var) -> Result<Var> {
    if g.shape(map).len() != 4 {
        return Err(shape_err!("frequency_mean: expected [N, C, T, F], got {:?}", g.shape(map)));
    }
    let m = g.mean_axis(map, 3)?;
    g.swap_axes(m, 1, 2)
}

/// Encoder output map → projected spectral sequence `[N, T, d]`.
#[derive(Debug, Clone)]
pub struct SpecProjection {
    pub linear: LinearLayer,
}

impl SpecProjection {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, d_model: usize) -> Self {
        Self {
            linear: LinearLayer::new(init, "hca.spec_proj", channels, d_model),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, map: Var) -> Result<Var> {
        let seq = frequency_mean(g, map)?;
        self.linear.forward(g, params, seq)
    }
}

/// BiLSTM over the feature frames followed by a linear map to `d_model`.
#[derive(Debug, Clone)]
pub struct HubertEncoder {
    pub lstm: BiLstm,
    pub out: LinearLayer,
}

impl HubertEncoder {
    pub fn new<T: Real>(init: &mut Init<'_, T>, feature_dim: usize, hidden: usize, d_model: usize) -> Self {
        let lstm = BiLstm::new(init, "hca.lstm", feature_dim, hidden);
        let out = LinearLayer::new(init, "hca.hubert_out", 2 * hidden, d_model);
        Self { lstm, out }
    }

    /// `[N, T_h, D]` → `[N, T_h, d_model]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, features: Var) -> Result<Var> {
        let h = self.lstm.forward(g, params, features)?;
        self.out.forward(g, params, h)
    }
}

/// Result of [`coattention`].
#[derive(Debug, Clone, Copy)]
pub struct CoAttention {
    /// `[N, T_s, T_h]`, each row a distribution over feature frames.
    pub weights: Var,
    /// `[N, T_s, d]`.
    pub attended: Var,
    /// `[N, T_s, 2d]`: the spectral sequence followed by the attended values.
    pub fused: Var,
}

/// `A = softmax_{T_h}(f_spec · keysᵀ)`, `attended = A · values`,
/// `fused = [f_spec, attended]` along the feature axis.
pub fn coattention<T: Real>(g: &mut Graph<T>, f_spec: Var, keys: Var, values: Var) -> Result<CoAttention> {
    let (ss, ks, vs) = (g.shape(f_spec), g.shape(keys), g.shape(values));
    if ss.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(shape_err!("coattention: expected rank-3 inputs, got {ss:?}, {ks:?}, {vs:?}"));
    }
    if ss[2] != ks[2] || ss[2] != vs[2] || ss[0] != ks[0] || ks[..2] != vs[..2] {
        return Err(shape_err!(
            "coattention: incompatible shapes spec {ss:?}, keys {ks:?}, values {vs:?}"
        ));
    }
    let scores = g.matmul_ex(f_spec, keys, true)?;
    let weights = g.softmax(scores, 2)?;
    let attended = g.matmul(weights, values)?;
    let fused = g.concat(&[f_spec, attended], 2)?;
    Ok(CoAttention {
        weights,
        attended,
        fused,
    })
}

/// Three fully connected layers with ReLU between them; emits logits.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub fc3: LinearLayer,
}

impl Classifier {
    pub fn new<T: Real>(init: &mut Init<'_, T>, din: usize, hidden: (usize, usize), classes: usize) -> Self {
        Self {
            fc1: LinearLayer::new(init, "classifier.fc1", din, hidden.0),
            fc2: LinearLayer::new(init, "classifier.fc2", hidden.0, hidden.1),
            fc3: LinearLayer::new(init, "classifier.fc3", hidden.1, classes),
        }
    }

    /// `[N, din]` → `[N, classes]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, pooled: Var) -> Result<Var> {
        let h = self.fc1.forward(g, params, pooled)?;
        let h = g.relu(h)?;
        let h = self.fc2.forward(g, params, h)?;
        let h = g.relu(h)?;
        self.fc3.forward(g, params, h)
    }
}
