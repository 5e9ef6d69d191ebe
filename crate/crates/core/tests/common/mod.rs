//! Brute-force reference implementations in plain `f64` loops, sharing no
//! code with the library kernels.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Largest `|a - b| / max(1, |b|)` over paired elements.
pub fn max_scaled_diff(actual: &[f32], expected: &[f64]) -> f64 {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    actual
        .iter()
        .zip(expected)
        .map(|(&a, &e)| (a as f64 - e).abs() / e.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Direct summation over every output cell and kernel tap.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    k: &[f64],
    [co, kc, kh, kw]: [usize; 4],
    bias: Option<&[f64]>,
    (sh, sw): (usize, usize),
    (top, bottom, left, right): (usize, usize, usize, usize),
) -> (Vec<f64>, [usize; 4]) {
    assert_eq!(c, kc);
    let oh = (h + top + bottom - kh) / sh + 1;
    let ow = (w + left + right - kw) / sw + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * sh + i) as isize - top as isize;
                                let ix = (xo * sw + j) as isize - left as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k[((o * c + ci) * kh + i) * kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

fn pool(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    reduce: impl Fn(&[f64]) -> f64,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut window = Vec::with_capacity(kh * kw);
                for i in 0..kh {
                    for j in 0..kw {
                        window.push(x[(plane * h + y * sh + i) * w + xo * sw + j]);
                    }
                }
                out.push(reduce(&window));
            }
        }
    }
    (out, [n, c, oh, ow])
}

pub fn avg_pool(x: &[f64], dims: [usize; 4], k: (usize, usize), s: (usize, usize)) -> (Vec<f64>, [usize; 4]) {
    pool(x, dims, k, s, |w| w.iter().sum::<f64>() / w.len() as f64)
}

pub fn max_pool(x: &[f64], dims: [usize; 4], k: (usize, usize), s: (usize, usize)) -> (Vec<f64>, [usize; 4]) {
    pool(x, dims, k, s, |w| w.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// `[out, in]` row-stochastic interpolation matrix for half-pixel-centre
/// bilinear resizing with edge clamping.
pub fn interpolation_matrix(input: usize, output: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; input]; output];
    for (i, row) in m.iter_mut().enumerate() {
        let src = (i as f64 + 0.5) * input as f64 / output as f64 - 0.5;
        let src = src.max(0.0).min((input - 1) as f64);
        let lo = src.floor() as usize;
        let frac = src - lo as f64;
        row[lo] += 1.0 - frac;
        if frac > 0.0 {
            row[lo + 1] += frac;
        }
    }
    m
}

/// Separable form `M_h · X · M_wᵀ` per plane.
pub fn bilinear(x: &[f64], [n, c, h, w]: [usize; 4], oh: usize, ow: usize) -> Vec<f64> {
    let mh = interpolation_matrix(h, oh);
    let mw = interpolation_matrix(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += mh[y][i] * x[(plane * h + i) * w + j] * mw[xo][j];
                    }
                }
                out[(plane * oh + y) * ow + xo] = acc;
            }
        }
    }
    out
}

/// Batched `A[b] · B[b]` (or `A[b] · B[b]ᵀ` with `trans_b`).
pub fn matmul(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    let bv = if trans_b {
                        b[bi * n * k + j * k + l]
                    } else {
                        b[bi * k * n + l * n + j]
                    };
                    acc += a[bi * m * k + i * k + l] * bv;
                }
                out[bi * m * n + i * n + j] = acc;
            }
        }
    }
    out
}

/// Softmax along `axis` of a row-major tensor, without max subtraction.
pub fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let z: f64 = (0..len).map(|l| x[at(l)].exp()).sum();
            for l in 0..len {
                out[at(l)] = x[at(l)].exp() / z;
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One LSTM direction over `[n, t, din]`, gate order i, f, g, o, zero initial
/// state; returns `[n, t, hidden]`.
#[allow(clippy::too_many_arguments)]
pub fn lstm(
    x: &[f64],
    n: usize,
    t: usize,
    din: usize,
    hidden: usize,
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    reverse: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; n * t * hidden];
    for b in 0..n {
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in steps {
            let xt = &x[(b * t + step) * din..(b * t + step + 1) * din];
            let pre = |gate: usize, unit: usize, h: &[f64]| {
                let row = gate * hidden + unit;
                let mut acc = bias[row];
                for d in 0..din {
                    acc += w_ih[row * din + d] * xt[d];
                }
                for u in 0..hidden {
                    acc += w_hh[row * hidden + u] * h[u];
                }
                acc
            };
            let mut next_h = vec![0.0; hidden];
            for u in 0..hidden {
                let i = sigmoid(pre(0, u, &h));
                let f = sigmoid(pre(1, u, &h));
                let g = pre(2, u, &h).tanh();
                let o = sigmoid(pre(3, u, &h));
                c[u] = f * c[u] + i * g;
                next_h[u] = o * c[u].tanh();
            }
            h = next_h;
            out[(b * t + step) * hidden..(b * t + step + 1) * hidden].copy_from_slice(&h);
        }
    }
    out
}

/// Row means `[n, c, h]` and column means `[n, c, w]`.
pub fn coordinate_pool(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let mut zh = vec![0.0; n * c * h];
    let mut zw = vec![0.0; n * c * w];
    for plane in 0..n * c {
        for i in 0..h {
            for j in 0..w {
                let v = x[(plane * h + i) * w + j];
                zh[plane * h + i] += v / w as f64;
                zw[plane * w + j] += v / h as f64;
            }
        }
    }
    (zh, zw)
}

/// Attention weights `[n, ts, th]` and fused output `[n, ts, 2d]`.
pub fn coattention(
    spec: &[f64],
    keys: &[f64],
    values: &[f64],
    n: usize,
    ts: usize,
    th: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut weights = vec![0.0; n * ts * th];
    let mut fused = vec![0.0; n * ts * 2 * d];
    for b in 0..n {
        for s in 0..ts {
            let scores: Vec<f64> = (0..th)
                .map(|k| (0..d).map(|e| spec[(b * ts + s) * d + e] * keys[(b * th + k) * d + e]).sum())
                .collect();
            let z: f64 = scores.iter().map(|v| v.exp()).sum();
            for k in 0..th {
                weights[(b * ts + s) * th + k] = scores[k].exp() / z;
            }
            let row = &mut fused[(b * ts + s) * 2 * d..(b * ts + s + 1) * 2 * d];
            for e in 0..d {
                row[e] = spec[(b * ts + s) * d + e];
                row[d + e] = (0..th)
                    .map(|k| weights[(b * ts + s) * th + k] * values[(b * th + k) * d + e])
                    .sum();
            }
        }
    }
    (weights, fused)
}

use mfhca::autodiff::{Graph, NormMode};
use mfhca::model::{Model, ModelConfig};
use mfhca::tensor::Tensor;

/// Deterministic pseudo-random inputs `[n, 1, frames, bins]` and `[n, t_h, D]`.
pub fn model_inputs(cfg: &ModelConfig, n: usize, t_h: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut r = rng(seed);
    let spec = random_vec(&mut r, n * cfg.spec_frames * cfg.spec_bins);
    let feats = random_vec(&mut r, n * t_h * cfg.feature_dim);
    (
        Tensor::new(&[n, 1, cfg.spec_frames, cfg.spec_bins], to_f32(&spec)).unwrap(),
        Tensor::new(&[n, t_h, cfg.feature_dim], to_f32(&feats)).unwrap(),
    )
}

/// Logits of one evaluation-mode forward pass.
pub fn eval_logits(model: &mut Model<f32>, spec: &Tensor<f32>, feats: &Tensor<f32>) -> Vec<f32> {
    let ab = model.config.ablation;
    let mut g = Graph::new();
    let s = ab.uses_spec().then(|| g.constant(spec.clone()));
    let f = ab.uses_features().then(|| g.constant(feats.clone()));
    let out = model.forward(&mut g, s, f, NormMode::Eval).unwrap();
    g.value(out.logits).data().to_vec()
}
