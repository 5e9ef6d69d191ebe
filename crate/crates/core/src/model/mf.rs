//! Multi-spatial fusion encoder: parallel time/frequency convolutions, max
//! pooling and a stack of global-receptive-field (GRF) blocks joined by
//! stride-2 transition convolutions.

use super::layers::{Conv2dLayer, Init};
use crate::autodiff::{BatchNormState, ConvGeom, Graph, NormMode, Padding2d, Var};
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

/// Per-axis means of `[N, C, H, W]`: `z_h` `[N, C, H]` averages each row over
/// the width, `z_w` `[N, C, W]` averages each column over the height.
pub fn coordinate_pool<T: Real>(g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
    if g.shape(x).len() != 4 {
        return Err(shape_err!("coordinate_pool: expected [N, C, H, W], got {:?}", g.shape(x)));
    }
    let z_h = g.mean_axis(x, 3)?;
    let z_w = g.mean_axis(x, 2)?;
    Ok((z_h, z_w))
}

/// `Y_a(i, j) = x(i, j) · g_h(i) · g_w(j)` with `g_h` `[N, C, H]`, `g_w` `[N, C, W]`.
pub fn branch_a<T: Real>(g: &mut Graph<T>, x: Var, g_h: Var, g_w: Var) -> Result<Var> {
    let [n, c, h, w] = dims4(g.shape(x))?;
    let gh = g.reshape(g_h, &[n, c, h, 1])?;
    let gw = g.reshape(g_w, &[n, c, 1, w])?;
    let rows = g.mul(x, gh)?;
    g.mul(rows, gw)
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(shape_err!("expected [N, C, H, W], got {shape:?}")),
    }
}

/// Intermediate values of one GRF forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GrfParts {
    pub z_h: Var,
    pub z_w: Var,
    pub g_h: Var,
    pub g_w: Var,
    pub y_a: Var,
    pub y_b: Var,
    pub y: Var,
}

#[derive(Debug, Clone)]
pub struct GrfBlock {
    pub channels: usize,
    pub reduced: usize,
    /// Pooling window and stride of the context branch (the inverse ratio).
    pub pool: usize,
    pub reduce: Conv2dLayer,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub gate_h: Conv2dLayer,
    pub gate_w: Conv2dLayer,
    pub context: Conv2dLayer,
}

impl GrfBlock {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        channels: usize,
        reduced: usize,
        pool: usize,
    ) -> Self {
        let pointwise = ConvGeom::new((1, 1), Padding2d::default());
        let reduce = Conv2dLayer::new(init, &format!("{name}.reduce"), channels, reduced, (1, 1), pointwise);
        let bn_gamma = init
            .params
            .insert(format!("{name}.bn.gamma"), Tensor::ones(&[reduced]));
        let bn_beta = init
            .params
            .insert(format!("{name}.bn.beta"), Tensor::zeros(&[reduced]));
        let gate_h = Conv2dLayer::new(init, &format!("{name}.gate_h"), reduced, channels, (1, 1), pointwise);
        let gate_w = Conv2dLayer::new(init, &format!("{name}.gate_w"), reduced, channels, (1, 1), pointwise);
        let context = Conv2dLayer::new(
            init,
            &format!("{name}.context"),
            channels,
            channels,
            (3, 3),
            ConvGeom::new((1, 1), Padding2d::symmetric(1, 1)),
        );
        Self {
            channels,
            reduced,
            pool,
            reduce,
            bn_gamma,
            bn_beta,
            gate_h,
            gate_w,
            context,
        }
    }

    /// Every learnable tensor of the block's convolutions (not the norm affine).
    pub fn conv_params(&self) -> Vec<ParamId> {
        [&self.reduce, &self.gate_h, &self.gate_w, &self.context]
            .iter()
            .flat_map(|c| [c.weight, c.bias])
            .collect()
    }

    /// Attention gates from the coordinate encodings: concatenate along the
    /// spatial axis, 1×1 conv to the bottleneck, batch norm, swish, split,
    /// then a 1×1 conv and sigmoid per axis. Outputs are `[N, C, H]` and `[N, C, W]`.
    pub fn gates<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        bn: &mut BatchNormState<T>,
        z_h: Var,
        z_w: Var,
        mode: NormMode,
    ) -> Result<(Var, Var)> {
        let (n, c, h) = match *g.shape(z_h) {
            [n, c, h] => (n, c, h),
            ref s => return Err(shape_err!("grf gates: z_h must be [N, C, H], got {s:?}")),
        };
        let w = g.shape(z_w)[2];
        let zh = g.reshape(z_h, &[n, c, h, 1])?;
        let zw = g.reshape(z_w, &[n, c, w, 1])?;
        let joint = g.concat(&[zh, zw], 2)?;
        let f = self.reduce.forward(g, params, joint)?;
        let gamma = g.param(params, self.bn_gamma);
        let beta = g.param(params, self.bn_beta);
        let f = g.batchnorm2d(f, gamma, beta, bn, mode)?;
        let f = g.swish(f)?;
        let parts = g.split(f, 2, &[h, w])?;
        assert_eq!(g.shape(parts[0])[2], h, "split must return exactly H rows");
        assert_eq!(g.shape(parts[1])[2], w, "split must return exactly W rows");
        let gh = self.gate_h.forward(g, params, parts[0])?;
        let gw = self.gate_w.forward(g, params, parts[1])?;
        let gh = g.sigmoid(gh)?;
        let gw = g.sigmoid(gw)?;
        let gh = g.reshape(gh, &[n, c, h])?;
        let gw = g.reshape(gw, &[n, c, w])?;
        Ok((gh, gw))
    }

    /// `Y_b = X + Up(conv3x3(AvgPool_r(X)))`, restored to the exact input size.
    pub fn branch_b<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = dims4(g.shape(x))?;
        if h / self.pool == 0 || w / self.pool == 0 {
            return Err(shape_err!(
                "grf context branch: {h}x{w} map pooled by {} is empty",
                self.pool
            ));
        }
        let pooled = g.avg_pool2d(x, (self.pool, self.pool), (self.pool, self.pool))?;
        let ctx = self.context.forward(g, params, pooled)?;
        let up = g.bilinear_upsample(ctx, h, w)?;
        g.add(x, up)
    }

    /// Full block with every intermediate exposed. `gate_override` replaces the
    /// computed gates, which lets the residual identity be checked in isolation.
    pub fn forward_parts<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        bn: &mut BatchNormState<T>,
        x: Var,
        mode: NormMode,
        gate_override: Option<(Var, Var)>,
    ) -> Result<GrfParts> {
        let [_, c, _, _] = dims4(g.shape(x))?;
        if c != self.channels {
            return Err(shape_err!(
                "grf block configured for {} channels received {c}",
                self.channels
            ));
        }
        let (z_h, z_w) = coordinate_pool(g, x)?;
        let (g_h, g_w) = match gate_override {
            Some(gates) => gates,
            None => self.gates(g, params, bn, z_h, z_w, mode)?,
        };
        let y_a = branch_a(g, x, g_h, g_w)?;
        let y_b = self.branch_b(g, params, x)?;
        let s = g.add(x, y_a)?;
        let y = g.add(s, y_b)?;
        Ok(GrfParts {
            z_h,
            z_w,
            g_h,
            g_w,
            y_a,
            y_b,
            y,
        })
    }

    /// `Y = X + Y_a + Y_b`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        bn: &mut BatchNormState<T>,
        x: Var,
        mode: NormMode,
    ) -> Result<Var> {
        Ok(self.forward_parts(g, params, bn, x, mode, None)?.y)
    }
}

/// Time-direction and frequency-direction convolutions whose outputs are
/// stacked on the channel axis and max-pooled 2×2.
#[derive(Debug, Clone)]
pub struct ParallelConv {
    pub time: Conv2dLayer,
    pub freq: Conv2dLayer,
}

impl ParallelConv {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        name: &str,
        per_branch: usize,
        time_kernel: (usize, usize),
        freq_kernel: (usize, usize),
    ) -> Self {
        let same = |k: (usize, usize)| ConvGeom::new((1, 1), Padding2d::same(k.0, k.1));
        Self {
            time: Conv2dLayer::new(init, &format!("{name}.time"), 1, per_branch, time_kernel, same(time_kernel)),
            freq: Conv2dLayer::new(init, &format!("{name}.freq"), 1, per_branch, freq_kernel, same(freq_kernel)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &ParamSet<T>, spec: Var) -> Result<Var> {
        let a = self.time.forward(g, params, spec)?;
        let b = self.freq.forward(g, params, spec)?;
        let joint = g.concat(&[a, b], 1)?;
        g.max_pool2d(joint, (2, 2), (2, 2))
    }
}

/// The whole spectrogram encoder. With `blocks` empty the GRF stack is
/// skipped and only the parallel convolutions and transitions remain.
#[derive(Debug, Clone)]
pub struct MfEncoder {
    pub parallel: ParallelConv,
    pub blocks: Vec<GrfBlock>,
    pub transitions: Vec<Conv2dLayer>,
}

impl MfEncoder {
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        bn: &mut [BatchNormState<T>],
        spec: Var,
        mode: NormMode,
    ) -> Result<Var> {
        let mut x = self.parallel.forward(g, params, spec)?;
        let stages = self.transitions.len() + 1;
        for stage in 0..stages {
            if let Some(block) = self.blocks.get(stage) {
                x = block.forward(g, params, &mut bn[stage], x, mode)?;
            }
            if let Some(t) = self.transitions.get(stage) {
                x = t.forward(g, params, x)?;
            }
        }
        Ok(x)
    }
}
