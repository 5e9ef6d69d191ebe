//! Library-versus-oracle comparisons on random small tensors. Each function
//! runs `cases` random shapes with every dimension at most 6 and returns the
//! worst scaled deviation.

use mfhca::autodiff::{ConvGeom, Graph, LstmWeights, Padding2d};
use mfhca::model::hca::coattention as lib_coattention;
use mfhca::model::mf::coordinate_pool as lib_coordinate_pool;
use mfhca::tensor::Tensor;
use rand::Rng;

use super::*;

fn t32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::new(shape, to_f32(v)).unwrap()
}

fn dims(r: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
    (0..k).map(|_| r.gen_range(1..=6)).collect()
}

pub fn conv2d_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = dims(&mut r, 4);
        let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
        let co = r.gen_range(1..=6);
        let kh = r.gen_range(1..=h.min(4));
        let kw = r.gen_range(1..=w.min(4));
        let stride = (r.gen_range(1..=2), r.gen_range(1..=2));
        let pad = (r.gen_range(0..=2), r.gen_range(0..=2), r.gen_range(0..=2), r.gen_range(0..=2));
        let x = random_vec(&mut r, n * c * h * w);
        let k = random_vec(&mut r, co * c * kh * kw);
        let b = random_vec(&mut r, co);
        let (expected, shape) = conv2d(&x, [n, c, h, w], &k, [co, c, kh, kw], Some(&b), stride, pad);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(t32(&[n, c, h, w], &x));
        let kv = g.constant(t32(&[co, c, kh, kw], &k));
        let bv = g.constant(t32(&[co], &b));
        let geom = ConvGeom::new(
            stride,
            Padding2d {
                top: pad.0,
                bottom: pad.1,
                left: pad.2,
                right: pad.3,
            },
        );
        let y = g.conv2d(xv, kv, Some(bv), geom).unwrap();
        assert_eq!(g.shape(y), shape);
        worst = worst.max(max_scaled_diff(g.value(y).data(), &expected));
    }
    worst
}

pub fn pool_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = dims(&mut r, 4);
        let dims4 = [d[0], d[1], d[2], d[3]];
        let k = (r.gen_range(1..=d[2]), r.gen_range(1..=d[3]));
        let s = (r.gen_range(1..=3), r.gen_range(1..=3));
        let x = random_vec(&mut r, d.iter().product());
        let mut g = Graph::<f32>::new();
        let xv = g.constant(t32(&d, &x));
        let avg = g.avg_pool2d(xv, k, s).unwrap();
        let max = g.max_pool2d(xv, k, s).unwrap();
        let (ea, shape) = avg_pool(&x, dims4, k, s);
        let (em, _) = max_pool(&x, dims4, k, s);
        assert_eq!(g.shape(avg), shape);
        assert_eq!(g.shape(max), shape);
        worst = worst
            .max(max_scaled_diff(g.value(avg).data(), &ea))
            .max(max_scaled_diff(g.value(max).data(), &em));
    }
    worst
}

pub fn upsample_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = dims(&mut r, 4);
        let oh = r.gen_range(d[2]..=6.max(d[2]) + 6);
        let ow = r.gen_range(d[3]..=6.max(d[3]) + 6);
        let x = random_vec(&mut r, d.iter().product());
        let mut g = Graph::<f32>::new();
        let xv = g.constant(t32(&d, &x));
        let y = g.bilinear_upsample(xv, oh, ow).unwrap();
        let expected = bilinear(&x, [d[0], d[1], d[2], d[3]], oh, ow);
        worst = worst.max(max_scaled_diff(g.value(y).data(), &expected));
    }
    worst
}

pub fn matmul_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let d = dims(&mut r, 4);
        let (batch, m, k, n) = (d[0], d[1], d[2], d[3]);
        let trans_b = case % 2 == 1;
        let a = random_vec(&mut r, batch * m * k);
        let b = random_vec(&mut r, batch * k * n);
        let b_shape = if trans_b { [batch, n, k] } else { [batch, k, n] };
        let mut g = Graph::<f32>::new();
        let av = g.constant(t32(&[batch, m, k], &a));
        let bv = g.constant(t32(&b_shape, &b));
        let y = g.matmul_ex(av, bv, trans_b).unwrap();
        let expected = matmul(&a, &b, batch, m, k, n, trans_b);
        worst = worst.max(max_scaled_diff(g.value(y).data(), &expected));
    }
    worst
}

pub fn softmax_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let rank = r.gen_range(1..=4);
        let shape = dims(&mut r, rank);
        let axis = r.gen_range(0..rank);
        let x: Vec<f64> = random_vec(&mut r, shape.iter().product()).iter().map(|v| v * 4.0).collect();
        let mut g = Graph::<f32>::new();
        let xv = g.constant(t32(&shape, &x));
        let y = g.softmax(xv, axis).unwrap();
        worst = worst.max(max_scaled_diff(g.value(y).data(), &softmax(&x, &shape, axis)));
    }
    worst
}

/// Both directions of a bidirectional layer, concatenated on the feature axis.
pub fn bilstm_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = dims(&mut r, 4);
        let (n, t, din, hidden) = (d[0], d[1], d[2], d[3]);
        let x = random_vec(&mut r, n * t * din);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(t32(&[n, t, din], &x));
        let mut outs = Vec::new();
        let mut expected_dirs = Vec::new();
        for reverse in [false, true] {
            let w_ih = random_vec(&mut r, 4 * hidden * din);
            let w_hh = random_vec(&mut r, 4 * hidden * hidden);
            let bias = random_vec(&mut r, 4 * hidden);
            let w = LstmWeights {
                w_ih: g.constant(t32(&[4 * hidden, din], &w_ih)),
                w_hh: g.constant(t32(&[4 * hidden, hidden], &w_hh)),
                bias: g.constant(t32(&[4 * hidden], &bias)),
            };
            outs.push(g.lstm(xv, w, reverse).unwrap());
            expected_dirs.push(lstm(&x, n, t, din, hidden, &w_ih, &w_hh, &bias, reverse));
        }
        let y = g.concat(&outs, 2).unwrap();
        let mut expected = Vec::with_capacity(n * t * 2 * hidden);
        for step in 0..n * t {
            for dir in &expected_dirs {
                expected.extend_from_slice(&dir[step * hidden..(step + 1) * hidden]);
            }
        }
        worst = worst.max(max_scaled_diff(g.value(y).data(), &expected));
    }
    worst
}

pub fn coordinate_pool_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = dims(&mut r, 4);
        let x = random_vec(&mut r, d.iter().product());
        let mut g = Graph::<f32>::new();
        let xv = g.constant(t32(&d, &x));
        let (zh, zw) = lib_coordinate_pool(&mut g, xv).unwrap();
        let (eh, ew) = coordinate_pool(&x, [d[0], d[1], d[2], d[3]]);
        assert_eq!(g.shape(zh), [d[0], d[1], d[2]]);
        assert_eq!(g.shape(zw), [d[0], d[1], d[3]]);
        worst = worst
            .max(max_scaled_diff(g.value(zh).data(), &eh))
            .max(max_scaled_diff(g.value(zw).data(), &ew));
    }
    worst
}

pub fn coattention_cases(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = dims(&mut r, 4);
        let (n, ts, th, width) = (d[0], d[1], d[2], d[3]);
        let spec = random_vec(&mut r, n * ts * width);
        let keys = random_vec(&mut r, n * th * width);
        let values = random_vec(&mut r, n * th * width);
        let mut g = Graph::<f32>::new();
        let s = g.constant(t32(&[n, ts, width], &spec));
        let k = g.constant(t32(&[n, th, width], &keys));
        let v = g.constant(t32(&[n, th, width], &values));
        let out = lib_coattention(&mut g, s, k, v).unwrap();
        let (ew, ef) = coattention(&spec, &keys, &values, n, ts, th, width);
        worst = worst
            .max(max_scaled_diff(g.value(out.weights).data(), &ew))
            .max(max_scaled_diff(g.value(out.fused).data(), &ef));
    }
    worst
}

/// Every oracle comparison by name.
pub fn all(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d_cases(cases, seed)),
        ("avg/max pool", pool_cases(cases, seed + 1)),
        ("bilinear upsample", upsample_cases(cases, seed + 2)),
        ("matmul", matmul_cases(cases, seed + 3)),
        ("softmax", softmax_cases(cases, seed + 4)),
        ("bilstm", bilstm_cases(cases, seed + 5)),
        ("coordinate_pool", coordinate_pool_cases(cases, seed + 6)),
        ("coattention", coattention_cases(cases, seed + 7)),
    ]
}
