//! Central finite-difference verification of every differentiable operator
//! and of the end-to-end model, in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    BatchNormState, ConvGeom, Graph, LstmWeights, NormMode, Padding2d, Var,
};
use crate::error::Result;
use crate::model::hca::coattention;
use crate::model::layers::Init;
use crate::model::mf::{coordinate_pool, GrfBlock};
use crate::model::{Model, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error; below it the error is absolute.
pub const FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Worst relative error of one named check over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub seeds: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for operators with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled grid with spacing 0.1, so window maxima are never near-ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    Tensor::new(shape, v).expect("shape matches")
}

/// Scalar probe `sum(f(x) ⊙ r)` with fixed random weights `r`.
fn probe(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = g.constant(weights.clone());
    let p = g.mul(out, r)?;
    g.sum(p)
}

fn eval_probe(build: &Build<'_>, inputs: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let w = weights.get_or_insert_with(|| random(rng, g.shape(out)));
    let loss = probe(&mut g, out, w)?;
    Ok(g.value(loss).item())
}

/// Max relative error between analytic and central-difference gradients of
/// `sum(build(inputs) ⊙ r)` with respect to every input element.
pub fn check_fn(build: &Build<'_>, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut weights = None;
    // Fixes the probe weights to the output shape.
    eval_probe(build, inputs, &mut weights, rng)?;

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = probe(&mut g, out, weights.as_ref().unwrap())?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x = inputs[k].data()[i];
            work[k].data_mut()[i] = x + STEP;
            let up = eval_probe(build, &work, &mut weights, rng)?;
            work[k].data_mut()[i] = x - STEP;
            let down = eval_probe(build, &work, &mut weights, rng)?;
            work[k].data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Configuration of the small model used for end-to-end checks: two GRF
/// blocks of four channels, `d_model = 4`, three spectral steps and four
/// feature frames.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        spec_frames: 12,
        spec_bins: 16,
        grf_channels: vec![4, 4],
        ratio: 2,
        time_kernel: (3, 2),
        freq_kernel: (2, 3),
        d_model: 4,
        lstm_hidden: 3,
        feature_dim: 5,
        classifier_hidden: (6, 5),
        ..ModelConfig::default()
    }
}

/// Feature frames used with [`tiny_config`].
pub const TINY_FEATURE_FRAMES: usize = 4;

fn model_loss(model: &mut Model<f64>, spec: &Tensor<f64>, feats: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(spec.clone());
    let f = g.constant(feats.clone());
    let out = model.forward(&mut g, Some(s), Some(f), NormMode::Train)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    Ok(g.value(loss).item())
}

/// End-to-end cross-entropy gradient check of a model on one batch. Returns
/// the worst relative error per parameter group (first two name components)
/// and for each input.
pub fn check_model(
    model: &Model<f64>,
    spec: &Tensor<f64>,
    feats: &Tensor<f64>,
    labels: &[usize],
) -> Result<Vec<(String, f64)>> {
    let mut m = model.clone();
    let mut g = Graph::new();
    let s = g.variable(spec.clone());
    let f = g.variable(feats.clone());
    let out = m.forward(&mut g, Some(s), Some(f), NormMode::Train)?;
    let loss = g.cross_entropy(out.logits, labels)?;
    let grads = g.backward(loss)?;

    let mut report: Vec<(String, f64)> = Vec::new();
    let mut note = |group: String, err: f64| match report.last_mut() {
        Some((k, e)) if *k == group => *e = e.max(err),
        _ => report.push((group, err)),
    };

    let ids: Vec<_> = m.params.ids().collect();
    for id in ids {
        let group = m.params.name(id).split('.').take(2).collect::<Vec<_>>().join(".");
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(m.params.get(id).shape()));
        for i in 0..analytic.len() {
            let x = m.params.get(id).data()[i];
            m.params.get_mut(id).data_mut()[i] = x + STEP;
            let up = model_loss(&mut m, spec, feats, labels)?;
            m.params.get_mut(id).data_mut()[i] = x - STEP;
            let down = model_loss(&mut m, spec, feats, labels)?;
            m.params.get_mut(id).data_mut()[i] = x;
            note(group.clone(), relative_error(analytic.data()[i], (up - down) / (2.0 * STEP)));
        }
    }

    for (name, var, base) in [("input.spec", s, spec), ("input.features", f, feats)] {
        let analytic = grads.wrt(var).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        let mut work = base.clone();
        for i in 0..base.len() {
            let x = base.data()[i];
            work.data_mut()[i] = x + STEP;
            let up = if name == "input.spec" {
                model_loss(&mut m, &work, feats, labels)?
            } else {
                model_loss(&mut m, spec, &work, labels)?
            };
            work.data_mut()[i] = x - STEP;
            let down = if name == "input.spec" {
                model_loss(&mut m, &work, feats, labels)?
            } else {
                model_loss(&mut m, spec, &work, labels)?
            };
            work.data_mut()[i] = x;
            note(name.to_string(), relative_error(analytic.data()[i], (up - down) / (2.0 * STEP)));
        }
    }
    Ok(report)
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Box<Build<'static>>,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn operator_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| random(rng, s);
    let mut cases = vec![
        case("add (broadcast)", vec![r(rng, &[2, 3, 4]), r(rng, &[3, 1])], |g, v| g.add(v[0], v[1])),
        case("sub (broadcast)", vec![r(rng, &[2, 3]), r(rng, &[3])], |g, v| g.sub(v[0], v[1])),
        case("mul (broadcast)", vec![r(rng, &[2, 1, 4]), r(rng, &[3, 1])], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![r(rng, &[3, 2])], |g, v| g.scale(v[0], -1.7)),
        case("sum", vec![r(rng, &[2, 3])], |g, v| g.sum(v[0])),
        case("mean_axis", vec![r(rng, &[2, 3, 4])], |g, v| g.mean_axis(v[0], 1)),
        case("reshape", vec![r(rng, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4])),
        case("swap_axes", vec![r(rng, &[2, 3, 4])], |g, v| g.swap_axes(v[0], 0, 2)),
        case("concat", vec![r(rng, &[2, 2, 3]), r(rng, &[2, 1, 3])], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("narrow", vec![r(rng, &[2, 5])], |g, v| g.narrow(v[0], 1, 1, 3)),
        case("split", vec![r(rng, &[2, 5])], |g, v| {
            let parts = g.split(v[0], 1, &[2, 3])?;
            let a = g.sum(parts[0])?;
            let a = g.scale(a, 2.0)?;
            let b = g.tanh(parts[1])?;
            g.add(b, a)
        }),
        case("sigmoid", vec![r(rng, &[3, 4])], |g, v| g.sigmoid(v[0])),
        case("swish", vec![r(rng, &[3, 4])], |g, v| g.swish(v[0])),
        case("relu", vec![away_from_zero(rng, &[3, 4])], |g, v| g.relu(v[0])),
        case("tanh", vec![r(rng, &[3, 4])], |g, v| g.tanh(v[0])),
        case("softmax", vec![r(rng, &[2, 3, 4])], |g, v| g.softmax(v[0], 1)),
        case("matmul", vec![r(rng, &[3, 4]), r(rng, &[4, 2])], |g, v| g.matmul(v[0], v[1])),
        case("matmul (batched, transposed)", vec![r(rng, &[2, 3, 4]), r(rng, &[2, 5, 4])], |g, v| {
            g.matmul_ex(v[0], v[1], true)
        }),
        case("linear", vec![r(rng, &[2, 3, 4]), r(rng, &[5, 4]), r(rng, &[5])], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        case("cross_entropy", vec![r(rng, &[3, 4])], |g, v| g.cross_entropy(v[0], &[0, 3, 1])),
        case("conv2d (stride, asymmetric pad)", vec![r(rng, &[2, 3, 5, 6]), r(rng, &[4, 3, 3, 2]), r(rng, &[4])], |g, v| {
            let pad = Padding2d {
                top: 1,
                bottom: 0,
                left: 0,
                right: 1,
            };
            g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new((2, 1), pad))
        }),
        case("conv2d (1x1)", vec![r(rng, &[2, 3, 3, 4]), r(rng, &[2, 3, 1, 1]), r(rng, &[2])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new((1, 1), Padding2d::default()))
        }),
        case("avg_pool2d", vec![r(rng, &[1, 2, 5, 7])], |g, v| g.avg_pool2d(v[0], (2, 3), (2, 2))),
        case("max_pool2d", vec![distinct(rng, &[2, 2, 5, 4])], |g, v| g.max_pool2d(v[0], (2, 2), (2, 2))),
        case("bilinear_upsample", vec![r(rng, &[1, 2, 2, 3])], |g, v| g.bilinear_upsample(v[0], 5, 7)),
        case("batchnorm2d (train)", vec![r(rng, &[3, 2, 3, 2]), r(rng, &[2]), r(rng, &[2])], |g, v| {
            let mut state = BatchNormState::new(2);
            g.batchnorm2d(v[0], v[1], v[2], &mut state, NormMode::Train)
        }),
    ];

    let running_mean: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let running_var: Vec<f64> = (0..2).map(|_| rng.gen_range(0.5..2.0)).collect();
    cases.push(case(
        "batchnorm2d (eval)",
        vec![r(rng, &[2, 2, 3, 2]), r(rng, &[2]), r(rng, &[2])],
        move |g, v| {
            let mut state = BatchNormState::new(2);
            state.running_mean = running_mean.clone();
            state.running_var = running_var.clone();
            g.batchnorm2d(v[0], v[1], v[2], &mut state, NormMode::Eval)
        },
    ));

    for (name, reverse) in [("lstm (forward)", false), ("lstm (reverse)", true)] {
        cases.push(case(
            name,
            vec![r(rng, &[2, 3, 2]), r(rng, &[8, 2]), r(rng, &[8, 2]), r(rng, &[8])],
            move |g, v| {
                let w = LstmWeights {
                    w_ih: v[1],
                    w_hh: v[2],
                    bias: v[3],
                };
                g.lstm(v[0], w, reverse)
            },
        ));
    }

    cases.push(case("coordinate_pool", vec![r(rng, &[2, 3, 4, 5])], |g, v| {
        let (zh, zw) = coordinate_pool(g, v[0])?;
        g.concat(&[zh, zw], 2)
    }));
    cases.push(case(
        "coattention",
        vec![r(rng, &[2, 3, 2]), r(rng, &[2, 4, 2]), r(rng, &[2, 4, 2])],
        |g, v| Ok(coattention(g, v[0], v[1], v[2])?.fused),
    ));

    let mut params = ParamSet::<f64>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let block = GrfBlock::new(
        &mut Init {
            params: &mut params,
            rng: &mut init_rng,
        },
        "grf",
        4,
        8,
        2,
    );
    cases.push(case("grf_forward (input)", vec![r(rng, &[2, 4, 5, 6])], move |g, v| {
        let mut bn = BatchNormState::new(8);
        block.forward(g, &params, &mut bn, v[0], NormMode::Train)
    }));
    cases
}

/// Runs every operator check and the end-to-end tiny-model check over
/// `seeds` consecutive seeds starting at `seed`.
pub fn run_suite(seed: u64, seeds: usize) -> Result<Vec<CheckReport>> {
    let mut reports: Vec<CheckReport> = Vec::new();
    let mut record = |name: String, err: f64| match reports.iter_mut().find(|r| r.name == name) {
        Some(r) => {
            r.max_rel_error = r.max_rel_error.max(err);
            r.seeds += 1;
        }
        None => reports.push(CheckReport {
            name,
            max_rel_error: err,
            seeds: 1,
        }),
    };
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s));
        for c in operator_cases(&mut rng) {
            let err = check_fn(&*c.build, &c.inputs, &mut rng)?;
            record(c.name.to_string(), err);
        }

        let cfg = tiny_config();
        let model = Model::<f64>::new(cfg.clone(), rng.gen())?;
        let n = 2;
        let spec = random(&mut rng, &[n, 1, cfg.spec_frames, cfg.spec_bins]);
        let feats = random(&mut rng, &[n, TINY_FEATURE_FRAMES, cfg.feature_dim]);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.classes)).collect();
        for (group, err) in check_model(&model, &spec, &feats, &labels)? {
            record(format!("model {group}"), err);
        }
    }
    Ok(reports)
}
