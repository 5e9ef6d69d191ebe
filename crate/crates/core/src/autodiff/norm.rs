use super::{Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates only.
    Eval,
}

/// Non-learnable batch-norm buffers. `gamma`/`beta` live in the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn cast<U: Real>(&self) -> BatchNormState<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect();
        BatchNormState {
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            momentum: U::from_f64_lossy(self.momentum.as_f64()),
            eps: U::from_f64_lossy(self.eps.as_f64()),
        }
    }
}

pub(crate) struct BnCache<T> {
    /// Normalized input, laid out like the input.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> Graph<T> {
    /// Per-channel batch normalization of `[N, C, H, W]` input.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = match *xv.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(shape_err!("batchnorm2d: expected [N, C, H, W], got {:?}", xv.shape())),
        };
        if state.channels() != c
            || self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
        {
            return Err(shape_err!(
                "batchnorm2d: input has {c} channels, state has {}, gamma {:?}, beta {:?}",
                state.channels(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            ));
        }
        let plane = h * w;
        let count = n * plane;
        let d = xv.data();
        let (mean, var) = match mode {
            NormMode::Train => {
                if count < 2 {
                    return Err(Error::InvalidArgument(
                        "batchnorm2d: a single element per channel has no variance in train mode"
                            .into(),
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let m = T::from_usize(count).unwrap();
                for ci in 0..c {
                    let vals = (0..n).flat_map(|ni| {
                        let base = (ni * c + ci) * plane;
                        d[base..base + plane].iter().copied()
                    });
                    let mu = vals.clone().sum::<T>() / m;
                    let v = vals.map(|x| (x - mu) * (x - mu)).sum::<T>() / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                let unbias = m / (m - T::one());
                let mom = state.momentum;
                for ci in 0..c {
                    state.running_mean[ci] =
                        (T::one() - mom) * state.running_mean[ci] + mom * mean[ci];
                    state.running_var[ci] =
                        (T::one() - mom) * state.running_var[ci] + mom * var[ci] * unbias;
                }
                (mean, var)
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + state.eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(d.len());
        let mut out = Vec::with_capacity(d.len());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for &xi in &d[base..base + plane] {
                    let xh = (xi - mean[ci]) * inv_std[ci];
                    xhat.push(xh);
                    out.push(gv[ci] * xh + bv[ci]);
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let cache = BnCache {
            xhat,
            inv_std,
            batch_stats: mode == NormMode::Train,
        };
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }
}

pub(super) fn backward<T: Real>(
    g: &Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    cache: &BnCache<T>,
    gout: &Tensor<T>,
    sink: &mut impl FnMut(Var, Tensor<T>),
) {
    let shape = g.value(x).shape();
    let (n, c) = (shape[0], shape[1]);
    let plane = shape[2] * shape[3];
    let dy = gout.data();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            for k in base..base + plane {
                sum_dy[ci] = sum_dy[ci] + dy[k];
                sum_dy_xhat[ci] = sum_dy_xhat[ci] + dy[k] * cache.xhat[k];
            }
        }
    }
    if g.needs(x) {
        let gv = g.value(gamma).data();
        let m = T::from_usize(n * plane).unwrap();
        let mut dx = Vec::with_capacity(dy.len());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let scale = gv[ci] * cache.inv_std[ci];
                for k in base..base + plane {
                    let v = if cache.batch_stats {
                        scale * (dy[k] - sum_dy[ci] / m - cache.xhat[k] * sum_dy_xhat[ci] / m)
                    } else {
                        scale * dy[k]
                    };
                    dx.push(v);
                }
            }
        }
        sink(x, Tensor::new(shape, dx).unwrap());
    }
    if g.needs(gamma) {
        sink(gamma, Tensor::new(&[c], sum_dy_xhat).unwrap());
    }
    if g.needs(beta) {
        sink(beta, Tensor::new(&[c], sum_dy).unwrap());
    }
}
