//! Model construction, analytic fixtures, parameter accounting and persistence.

mod common;

use mfhca::autodiff::{Graph, NormMode};
use mfhca::featio::{decode_feature_file, encode_feature_file, FeatureSequence};
use mfhca::gradcheck::{tiny_config, TINY_FEATURE_FRAMES};
use mfhca::model::checkpoint::{decode_checkpoint, encode_checkpoint};
use mfhca::model::layers::zero_params;
use mfhca::model::{load_checkpoint, save_checkpoint, Ablation, Inputs, Model, ModelConfig};
use mfhca::tensor::Tensor;

/// Closed-form learnable-scalar count, summed layer by layer.
fn hand_count(cfg: &ModelConfig) -> usize {
    let ab = cfg.ablation;
    let conv = |cin: usize, cout: usize, kh: usize, kw: usize| cout * cin * kh * kw + cout;
    let linear = |din: usize, dout: usize| dout * din + dout;
    let d = cfg.d_model;
    let mut total = 0;
    if ab.uses_spec() {
        let ch = &cfg.grf_channels;
        let half = ch[0] / 2;
        total += conv(1, half, cfg.time_kernel.0, cfg.time_kernel.1);
        total += conv(1, half, cfg.freq_kernel.0, cfg.freq_kernel.1);
        for (i, &c) in ch.iter().enumerate() {
            if ab.mf {
                let r = (c / cfg.reduction).max(cfg.min_reduced);
                total += conv(c, r, 1, 1) + 2 * r + 2 * conv(r, c, 1, 1) + conv(c, c, 3, 3);
            }
            if let Some(&next) = ch.get(i + 1) {
                total += conv(c, next, 3, 3);
            }
        }
        total += linear(*ch.last().unwrap(), d);
    }
    if ab.uses_features() {
        let (h, din) = (cfg.lstm_hidden, cfg.feature_dim);
        total += 2 * (4 * h * din + 4 * h * h + 4 * h);
        total += linear(2 * h, d);
    }
    if ab.coattention_enabled() {
        total += linear(cfg.feature_dim, d);
    }
    let head_in = if ab.inputs == Inputs::Both { 2 * d } else { d };
    let (h1, h2) = cfg.classifier_hidden;
    total + linear(head_in, h1) + linear(h1, h2) + linear(h2, cfg.classes)
}

#[test]
fn default_parameter_count_fixture() {
    let model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(model.count_params(), 1_151_276);
    assert_eq!(hand_count(&model.config), 1_151_276);
}

#[test]
fn parameter_count_matches_formula_for_every_variant() {
    for ablation in Ablation::TABLE {
        for grf in [vec![16, 32], vec![16, 32, 64, 128]] {
            let cfg = ModelConfig {
                ablation,
                grf_channels: grf,
                ..ModelConfig::default()
            };
            let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
            assert_eq!(model.count_params(), hand_count(&cfg), "{ablation}");
        }
    }
}

#[test]
fn single_linear_layer_count() {
    let mut p = mfhca::params::ParamSet::<f32>::new();
    p.insert("w", Tensor::zeros(&[2, 4]));
    p.insert("b", Tensor::zeros(&[2]));
    assert_eq!(p.count(), 10);
}

#[test]
fn ablation_counts_are_monotone() {
    let count = |ablation| {
        Model::<f32>::new(
            ModelConfig {
                ablation,
                ..ModelConfig::default()
            },
            0,
        )
        .unwrap()
        .count_params()
    };
    let full = count(Ablation::FULL);
    let no_mf = count("no-mf".parse().unwrap());
    let no_hca = count("no-hca".parse().unwrap());
    let neither = count("no-mf-no-hca".parse().unwrap());
    assert!(full > no_mf && full > no_hca);
    assert!(no_mf > neither && no_hca > neither);
}

#[test]
fn grf_with_zeroed_convolutions_scales_input_by_nine_quarters() {
    let mut model = Model::<f64>::new(tiny_config(), 3).unwrap();
    let block = model.mf.as_ref().unwrap().blocks[0].clone();
    zero_params(&mut model.params, &block.conv_params());
    let mut r = common::rng(9);
    let x = Tensor::from_f64(&[2, 4, 6, 8], &common::random_vec(&mut r, 2 * 4 * 6 * 8)).unwrap();
    for mode in [NormMode::Train, NormMode::Eval] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &model.params, &mut model.bn[0], xv, mode).unwrap();
        for (&out, &inp) in g.value(y).data().iter().zip(x.data()) {
            assert!((out - 2.25 * inp).abs() < 1e-6, "{out} vs {}", 2.25 * inp);
        }
    }
}

#[test]
fn logits_shape_for_every_variant_and_determinism() {
    let (spec, feats) = common::model_inputs(&tiny_config(), 3, TINY_FEATURE_FRAMES, 5);
    for ablation in Ablation::TABLE {
        let cfg = ModelConfig {
            ablation,
            ..tiny_config()
        };
        let mut a = Model::<f32>::new(cfg.clone(), 42).unwrap();
        let mut b = Model::<f32>::new(cfg, 42).unwrap();
        let la = common::eval_logits(&mut a, &spec, &feats);
        let lb = common::eval_logits(&mut b, &spec, &feats);
        assert_eq!(la.len(), 3 * 4);
        assert_eq!(la, lb, "{ablation} is not deterministic");
    }
}

#[test]
fn missing_or_misshapen_inputs_are_rejected() {
    let mut model = Model::<f32>::new(tiny_config(), 0).unwrap();
    let (spec, feats) = common::model_inputs(&tiny_config(), 1, 4, 0);
    let mut g = Graph::new();
    let s = g.constant(spec);
    assert!(model.forward(&mut g, Some(s), None, NormMode::Eval).is_err());
    let mut g = Graph::new();
    let f = g.constant(feats);
    let wrong = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(model.forward(&mut g, Some(wrong), Some(f), NormMode::Eval).is_err());
}

#[test]
fn checkpoint_round_trip_is_bitwise_and_preserves_logits() {
    let cfg = ModelConfig {
        ablation: "no-hca".parse().unwrap(),
        ..tiny_config()
    };
    let mut model = Model::<f32>::new(cfg, 8).unwrap();
    model.norm = Some(mfhca::audio::NormStats { mean: -3.5, std: 2.25 });
    model.bn[1].running_mean[2] = 0.125;
    model.bn[1].running_var[0] = 7.0;
    let (spec, feats) = common::model_inputs(&model.config, 2, 4, 1);
    let before = common::eval_logits(&mut model, &spec, &feats);

    let bytes = encode_checkpoint(&model);
    let mut decoded = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&decoded), bytes);
    assert_eq!(decoded.config, model.config);
    assert_eq!(decoded.norm, model.norm);
    assert_eq!(decoded.bn, model.bn);
    assert_eq!(decoded.count_params(), model.count_params());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mfc");
    save_checkpoint(&path, &model).unwrap();
    let mut loaded = load_checkpoint(&path).unwrap();
    assert_eq!(common::eval_logits(&mut loaded, &spec, &feats), before);
    assert_eq!(common::eval_logits(&mut decoded, &spec, &feats), before);
}

#[test]
fn corrupted_checkpoints_fail_cleanly() {
    let model = Model::<f32>::new(tiny_config(), 0).unwrap();
    let bytes = encode_checkpoint(&model);
    assert!(decode_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint(&bad).is_err());
    assert!(decode_checkpoint(&[]).is_err());
}

#[test]
fn feature_file_round_trip_is_bitwise() {
    let data = vec![0.0, -0.0, 1.5e-38, f32::MAX, f32::MIN_POSITIVE, -7.25];
    let seq = FeatureSequence::new(2, 3, data).unwrap();
    let back = decode_feature_file(&encode_feature_file(&seq)).unwrap();
    let bits = |s: &FeatureSequence| s.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!((back.rows, back.cols), (2, 3));
    assert_eq!(bits(&back), bits(&seq));
}

#[test]
fn context_pool_must_not_empty_the_map() {
    let cfg = ModelConfig {
        grf_channels: vec![16, 32, 48, 64],
        ratio: 16,
        ..ModelConfig::default()
    };
    assert!(Model::<f32>::new(cfg, 0).is_err());
}
