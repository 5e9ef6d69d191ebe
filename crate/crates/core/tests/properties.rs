mod common;

use std::path::Path;

use mfhca::audio::FrontendConfig;
use mfhca::autodiff::{BatchNormState, ConvGeom, Graph, NormMode, Padding2d};
use mfhca::config::{RunConfig, RATIO_GRID};
use mfhca::featio::{decode_feature_file, encode_feature_file, FeatureSequence};
use mfhca::model::hca::coattention;
use mfhca::tensor::Tensor;
use mfhca::train::loso::plan_folds;
use mfhca::train::{wa_ua, ConfusionMatrix};
use proptest::prelude::*;

fn values(n: usize, scale: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-scale..scale, n)
}

/// `(shape, data)` for a 4-D tensor with every dimension in `1..=max`.
fn tensor4(max: usize) -> impl Strategy<Value = ([usize; 4], Vec<f32>)> {
    (1..=max, 1..=max, 1..=max, 1..=max).prop_flat_map(|(n, c, h, w)| {
        values(n * c * h * w, 3.0).prop_map(move |v| ([n, c, h, w], v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_slices_sum_to_one(
        (shape, data) in (1usize..=4).prop_flat_map(|rank| prop::collection::vec(1usize..=5, rank))
            .prop_flat_map(|s| { let n = s.iter().product(); (Just(s), values(n, 30.0)) }),
        axis_seed in 0usize..4,
    ) {
        let axis = axis_seed % shape.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&shape, data).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let out = g.value(y).data();
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f32 = (0..len).map(|l| out[(o * len + l) * inner + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5, "slice sum {s}");
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions(
        (n, ts, th, d) in (1usize..=3, 1usize..=5, 1usize..=5, 1usize..=4),
        seed in any::<u64>(),
    ) {
        let mut r = common::rng(seed);
        let mut g = Graph::<f32>::new();
        let s = g.constant(Tensor::new(&[n, ts, d], common::to_f32(&common::random_vec(&mut r, n * ts * d))).unwrap());
        let k = g.constant(Tensor::new(&[n, th, d], common::to_f32(&common::random_vec(&mut r, n * th * d))).unwrap());
        let vals = common::random_vec(&mut r, n * th * d);
        let v = g.constant(Tensor::new(&[n, th, d], common::to_f32(&vals)).unwrap());
        let out = coattention(&mut g, s, k, v).unwrap();
        let w = g.value(out.weights).data();
        for row in w.chunks(th) {
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        // The attended half lies inside the range of the values it mixes.
        let fused = g.value(out.fused).data();
        for b in 0..n {
            for e in 0..d {
                let col: Vec<f64> = (0..th).map(|t| vals[(b * th + t) * d + e]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for q in 0..ts {
                    let a = fused[(b * ts + q) * 2 * d + d + e] as f64;
                    prop_assert!(a >= lo - 1e-5 && a <= hi + 1e-5, "{a} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn coattention_ignores_key_order(
        (th, d) in (2usize..=6, 1usize..=4),
        seed in any::<u64>(),
        rot in 1usize..6,
    ) {
        let (n, ts) = (2, 3);
        let mut r = common::rng(seed);
        let spec = common::random_vec(&mut r, n * ts * d);
        let keys = common::random_vec(&mut r, n * th * d);
        let vals = common::random_vec(&mut r, n * th * d);
        let permute = |x: &[f64]| {
            let mut out = Vec::with_capacity(x.len());
            for b in 0..n {
                for t in 0..th {
                    let src = (t + rot) % th;
                    out.extend_from_slice(&x[(b * th + src) * d..(b * th + src + 1) * d]);
                }
            }
            out
        };
        let run = |k: &[f64], v: &[f64]| {
            let mut g = Graph::<f32>::new();
            let s = g.constant(Tensor::new(&[n, ts, d], common::to_f32(&spec)).unwrap());
            let k = g.constant(Tensor::new(&[n, th, d], common::to_f32(k)).unwrap());
            let v = g.constant(Tensor::new(&[n, th, d], common::to_f32(v)).unwrap());
            let out = coattention(&mut g, s, k, v).unwrap();
            g.value(out.fused).data().to_vec()
        };
        let a = run(&keys, &vals);
        let b = run(&permute(&keys), &permute(&vals));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn identity_kernel_conv_returns_input((shape, data) in tensor4(5)) {
        let c = shape[1];
        let mut kernel = vec![0.0f32; c * c * 9];
        for i in 0..c {
            kernel[(i * c + i) * 9 + 4] = 1.0;
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&shape, data.clone()).unwrap());
        let k = g.constant(Tensor::new(&[c, c, 3, 3], kernel).unwrap());
        let y = g.conv2d(x, k, None, ConvGeom::new((1, 1), Padding2d::same(3, 3))).unwrap();
        prop_assert_eq!(g.shape(y), &shape[..]);
        prop_assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn constant_maps_pool_to_the_constant(
        dims in (1usize..=3, 1usize..=3, 1usize..=6, 1usize..=6),
        value in -5.0f32..5.0,
        k in (1usize..=6, 1usize..=6),
    ) {
        let shape = [dims.0, dims.1, dims.2, dims.3];
        let kernel = (k.0.min(dims.2), k.1.min(dims.3));
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&shape, value));
        let a = g.avg_pool2d(x, kernel, kernel).unwrap();
        let m = g.max_pool2d(x, kernel, kernel).unwrap();
        prop_assert!(g.value(a).data().iter().all(|&v| (v - value).abs() < 1e-5));
        prop_assert!(g.value(m).data().iter().all(|&v| v == value));
    }

    #[test]
    fn max_pool_dominates_avg_pool((shape, data) in tensor4(6), k in (1usize..=6, 1usize..=6)) {
        let kernel = (k.0.min(shape[2]), k.1.min(shape[3]));
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&shape, data).unwrap());
        let a = g.avg_pool2d(x, kernel, (1, 1)).unwrap();
        let m = g.max_pool2d(x, kernel, (1, 1)).unwrap();
        for (&av, &mv) in g.value(a).data().iter().zip(g.value(m).data()) {
            prop_assert!(mv >= av - 1e-6);
        }
    }

    #[test]
    fn upsampling_stays_within_input_range((shape, data) in tensor4(4), grow in (0usize..8, 0usize..8)) {
        let lo = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&shape, data).unwrap());
        let y = g.bilinear_upsample(x, shape[2] + grow.0, shape[3] + grow.1).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&v| v >= lo - 1e-5 && v <= hi + 1e-5));
    }

    #[test]
    fn batchnorm_running_variance_stays_nonnegative(
        (shape, data) in tensor4(4),
        steps in 1usize..5,
    ) {
        let c = shape[1];
        let mut state = BatchNormState::<f32>::new(c);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&shape, data).unwrap());
        let gamma = g.constant(Tensor::ones(&[c]));
        let beta = g.constant(Tensor::zeros(&[c]));
        if shape[0] * shape[2] * shape[3] == 1 {
            prop_assert!(g.batchnorm2d(x, gamma, beta, &mut state, NormMode::Train).is_err());
            return Ok(());
        }
        for _ in 0..steps {
            g.batchnorm2d(x, gamma, beta, &mut state, NormMode::Train).unwrap();
        }
        prop_assert!(state.running_var.iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!(state.running_mean.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn accuracies_lie_in_unit_interval_and_match_counts(
        (k, cells) in (2usize..=5).prop_flat_map(|k| (Just(k), prop::collection::vec(0u64..20, k * k))),
    ) {
        let mut rows: Vec<Vec<u64>> = cells.chunks(k).map(<[u64]>::to_vec).collect();
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] += 1;
        }
        let cm = ConfusionMatrix::from_rows(rows.clone()).unwrap();
        let (wa, ua) = wa_ua(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&wa));
        prop_assert!((0.0..=1.0).contains(&ua));
        let total: u64 = rows.iter().flatten().sum();
        let correct: u64 = (0..k).map(|i| rows[i][i]).sum();
        prop_assert!((wa - correct as f64 / total as f64).abs() < 1e-12);
        let recall: f64 = rows.iter().enumerate()
            .map(|(i, r)| r[i] as f64 / r.iter().sum::<u64>() as f64)
            .sum::<f64>() / k as f64;
        prop_assert!((ua - recall).abs() < 1e-12);
    }

    #[test]
    fn loso_folds_never_leak_speakers(
        (speakers, assignment) in (2usize..=8).prop_flat_map(|s| {
            (Just(s), prop::collection::vec(0..s, s..=4 * s))
        }),
        seed in any::<u64>(),
    ) {
        // Every speaker owns at least one utterance.
        let mut assignment = assignment;
        for (i, a) in assignment.iter_mut().take(speakers).enumerate() {
            *a = i;
        }
        let names: Vec<String> = (0..speakers).map(|s| format!("spk{s}")).collect();
        let utt: Vec<String> = assignment.iter().map(|&s| names[s].clone()).collect();
        let folds = plan_folds(&utt, &names, seed).unwrap();
        prop_assert_eq!(folds.len(), speakers);
        for fold in &folds {
            let speaker_of = |i: &usize| utt[*i].clone();
            prop_assert!(fold.test.iter().all(|i| speaker_of(i) == fold.test_speaker));
            prop_assert!(fold.train.iter().all(|i| speaker_of(i) != fold.test_speaker));
            prop_assert!(fold.val.iter().all(|i| speaker_of(i) != fold.test_speaker));
            if let Some(v) = &fold.val_speaker {
                prop_assert!(fold.val.iter().all(|i| &speaker_of(i) == v));
                prop_assert!(fold.train.iter().all(|i| &speaker_of(i) != v));
            } else {
                prop_assert!(fold.val.is_empty());
            }
            let mut all: Vec<usize> = fold.train.iter().chain(&fold.val).chain(&fold.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..utt.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn feature_files_round_trip_bitwise(
        (rows, cols, data) in (1usize..=20, 1usize..=12).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), r * c))
        }),
    ) {
        let seq = FeatureSequence::new(rows, cols, data).unwrap();
        let back = decode_feature_file(&encode_feature_file(&seq)).unwrap();
        prop_assert_eq!((back.rows, back.cols), (rows, cols));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.data), bits(&seq.data));
    }

    #[test]
    fn truncated_feature_files_are_rejected(rows in 1usize..8, cols in 1usize..8, cut in 1usize..16) {
        let seq = FeatureSequence::new(rows, cols, vec![0.5; rows * cols]).unwrap();
        let bytes = encode_feature_file(&seq);
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(decode_feature_file(&bytes[..keep]).is_err());
    }

    #[test]
    fn config_snapshot_round_trips(
        seed in any::<u32>(),
        lr in 1e-5f64..1e-1,
        batch in 1usize..64,
        patience in 1usize..20,
        channels in prop::collection::vec(1usize..64, 1..5),
        ratio in prop::sample::select(RATIO_GRID.to_vec()),
        ablate in prop::sample::select(vec!["none", "no-mf", "no-hca", "no-mf-no-hca", "spec-only", "spec-only-no-mf", "feat-only"]),
        parallel in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("batch", &batch.to_string()).unwrap();
        cfg.set("patience", &patience.to_string()).unwrap();
        let list = channels.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        cfg.set("grf_channels", &list).unwrap();
        cfg.set("ratio", &ratio.to_string()).unwrap();
        cfg.set("ablate", ablate).unwrap();
        cfg.set("parallel", &parallel.to_string()).unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.snapshot(), Path::new("snapshot")).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn frame_count_matches_hop_formula(samples in 0usize..100_000) {
        let fe = FrontendConfig::default();
        let expected = if samples < 640 { None } else { Some((samples - 640) / 160 + 1) };
        prop_assert_eq!(fe.frame_count(samples), expected);
    }
}
