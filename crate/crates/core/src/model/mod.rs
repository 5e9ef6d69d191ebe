//! The full emotion classifier: spectrogram encoder, feature encoder,
//! co-attention fusion and classification head, with ablation switches.

pub mod checkpoint;
pub mod hca;
pub mod layers;
pub mod mf;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::NormStats;
use crate::autodiff::{BatchNormState, ConvGeom, Graph, NormMode, Padding2d, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

use hca::{coattention, Classifier, HubertEncoder, SpecProjection};
use layers::{Conv2dLayer, Init, LinearLayer};
use mf::{GrfBlock, MfEncoder, ParallelConv};

pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Which inputs reach the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Inputs {
    Both,
    SpecOnly,
    FeaturesOnly,
}

/// Module switches. `hca` only has meaning with [`Inputs::Both`]; `mf` only
/// when the spectrogram is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ablation {
    pub mf: bool,
    pub hca: bool,
    pub inputs: Inputs,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        mf: true,
        hca: true,
        inputs: Inputs::Both,
    };

    /// The seven ablation-table rows, single-input variants first.
    pub const TABLE: [Ablation; 7] = [
        Ablation { mf: false, hca: false, inputs: Inputs::SpecOnly },
        Ablation { mf: true, hca: false, inputs: Inputs::SpecOnly },
        Ablation { mf: false, hca: false, inputs: Inputs::FeaturesOnly },
        Ablation { mf: false, hca: false, inputs: Inputs::Both },
        Ablation { mf: true, hca: false, inputs: Inputs::Both },
        Ablation { mf: false, hca: true, inputs: Inputs::Both },
        Ablation { mf: true, hca: true, inputs: Inputs::Both },
    ];

    pub fn uses_spec(self) -> bool {
        self.inputs != Inputs::FeaturesOnly
    }

    pub fn uses_features(self) -> bool {
        self.inputs != Inputs::SpecOnly
    }

    /// Whether the GRF stack is present.
    pub fn grf_enabled(self) -> bool {
        self.mf && self.uses_spec()
    }

    pub fn coattention_enabled(self) -> bool {
        self.hca && self.inputs == Inputs::Both
    }

    /// Short label of the input combination for report rows.
    pub fn inputs_label(self) -> &'static str {
        match self.inputs {
            Inputs::Both => "spec+features",
            Inputs::SpecOnly => "spec",
            Inputs::FeaturesOnly => "features",
        }
    }

    fn code(self) -> [f32; 3] {
        let inputs = match self.inputs {
            Inputs::Both => 0.0,
            Inputs::SpecOnly => 1.0,
            Inputs::FeaturesOnly => 2.0,
        };
        [self.mf as u8 as f32, self.hca as u8 as f32, inputs]
    }

    fn from_code(code: &[f32]) -> Option<Self> {
        let flag = |v: f32| match v {
            0.0 => Some(false),
            1.0 => Some(true),
            _ => None,
        };
        let inputs = match code.get(2)? {
            0.0 => Inputs::Both,
            1.0 => Inputs::SpecOnly,
            2.0 => Inputs::FeaturesOnly,
            _ => return None,
        };
        Some(Self {
            mf: flag(*code.first()?)?,
            hca: flag(*code.get(1)?)?,
            inputs,
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (mf, hca, inputs) = match s {
            "none" => (true, true, Inputs::Both),
            "no-mf" => (false, true, Inputs::Both),
            "no-hca" => (true, false, Inputs::Both),
            "no-mf-no-hca" => (false, false, Inputs::Both),
            "spec-only" => (true, false, Inputs::SpecOnly),
            "spec-only-no-mf" => (false, false, Inputs::SpecOnly),
            "feat-only" => (false, false, Inputs::FeaturesOnly),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected one of none, no-mf, no-hca, \
                     no-mf-no-hca, spec-only, spec-only-no-mf, feat-only"
                )))
            }
        };
        Ok(Self { mf, hca, inputs })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match (self.inputs, self.mf, self.hca) {
            (Inputs::Both, true, true) => "none",
            (Inputs::Both, false, true) => "no-mf",
            (Inputs::Both, true, false) => "no-hca",
            (Inputs::Both, false, false) => "no-mf-no-hca",
            (Inputs::SpecOnly, true, _) => "spec-only",
            (Inputs::SpecOnly, false, _) => "spec-only-no-mf",
            (Inputs::FeaturesOnly, ..) => "feat-only",
        };
        f.write_str(name)
    }
}

/// Every architecture hyperparameter. Input geometry is part of the
/// configuration because the encoder output length depends on it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub spec_frames: usize,
    pub spec_bins: usize,
    pub grf_channels: Vec<usize>,
    /// Denominator of the context-branch sampling ratio.
    pub ratio: usize,
    pub reduction: usize,
    pub min_reduced: usize,
    pub time_kernel: (usize, usize),
    pub freq_kernel: (usize, usize),
    pub d_model: usize,
    pub lstm_hidden: usize,
    pub feature_dim: usize,
    pub classifier_hidden: (usize, usize),
    pub classes: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            spec_frames: 297,
            spec_bins: 200,
            grf_channels: vec![16, 32, 48],
            ratio: 4,
            reduction: 8,
            min_reduced: 8,
            time_kernel: (10, 2),
            freq_kernel: (2, 8),
            d_model: 128,
            lstm_hidden: 128,
            feature_dim: 768,
            classifier_hidden: (128, 64),
            classes: 4,
            ablation: Ablation::FULL,
        }
    }
}

/// Spatial sizes through the spectrogram encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderShapes {
    /// `(channels, height, width)` entering each stage.
    pub stages: Vec<(usize, usize, usize)>,
    pub output: (usize, usize, usize),
}

impl ModelConfig {
    /// Bottleneck width of a GRF block with `channels` channels.
    pub fn reduced_channels(&self, channels: usize) -> usize {
        self.min_reduced.max(channels / self.reduction)
    }

    /// Checks every constraint and walks the encoder shapes.
    pub fn validate(&self) -> Result<EncoderShapes> {
        let positive = [
            ("d_model", self.d_model),
            ("lstm_hidden", self.lstm_hidden),
            ("feature_dim", self.feature_dim),
            ("classifier_hidden", self.classifier_hidden.0),
            ("classifier_hidden", self.classifier_hidden.1),
            ("classes", self.classes),
            ("reduction", self.reduction),
            ("min_reduced", self.min_reduced),
            ("spec_frames", self.spec_frames),
            ("spec_bins", self.spec_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.grf_channels.is_empty() || self.grf_channels.contains(&0) {
            return Err(Error::Config(format!(
                "grf_channels must be a non-empty list of positive counts, got {:?}",
                self.grf_channels
            )));
        }
        if !self.grf_channels[0].is_multiple_of(2) {
            return Err(Error::Config(format!(
                "first GRF channel count {} must be even (two parallel branches)",
                self.grf_channels[0]
            )));
        }
        if !self.ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "sampling ratio denominator {} must be a power of two",
                self.ratio
            )));
        }
        for k in [self.time_kernel, self.freq_kernel] {
            if k.0 == 0 || k.1 == 0 {
                return Err(Error::Config(format!("kernel {k:?} has a zero side")));
            }
        }
        let kh = self.time_kernel.0.max(self.freq_kernel.0);
        let kw = self.time_kernel.1.max(self.freq_kernel.1);
        if self.spec_frames < kh || self.spec_bins < kw {
            return Err(Error::Config(format!(
                "spectrogram {}x{} smaller than the parallel kernels",
                self.spec_frames, self.spec_bins
            )));
        }
        let (mut h, mut w) = (self.spec_frames / 2, self.spec_bins / 2);
        if h == 0 || w == 0 {
            return Err(Error::Config("pooled spectrogram is empty".into()));
        }
        let mut stages = Vec::new();
        let grf = self.ablation.grf_enabled();
        for (i, &c) in self.grf_channels.iter().enumerate() {
            stages.push((c, h, w));
            if grf && (h / self.ratio == 0 || w / self.ratio == 0) {
                return Err(Error::Config(format!(
                    "GRF block {i}: {h}x{w} map pooled by 1/{} is empty",
                    self.ratio
                )));
            }
            if i + 1 < self.grf_channels.len() {
                h = (h - 1) / 2 + 1;
                w = (w - 1) / 2 + 1;
            }
        }
        let output = (*self.grf_channels.last().unwrap(), h, w);
        Ok(EncoderShapes { stages, output })
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[N, classes]`.
    pub logits: Var,
    /// Pooled fused representation `[N, width]` fed to the classifier.
    pub embedding: Var,
    /// Co-attention weights `[N, T_s, T_h]` when co-attention is enabled.
    pub attention: Option<Var>,
}

/// Model parameters, normalization buffers and layer wiring.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub bn: Vec<BatchNormState<T>>,
    /// Spectrogram standardization fitted on the training data.
    pub norm: Option<NormStats>,
    pub mf: Option<MfEncoder>,
    pub spec_proj: Option<SpecProjection>,
    pub hubert: Option<HubertEncoder>,
    pub hubert_proj: Option<LinearLayer>,
    pub classifier: Classifier,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.validate()?;
        let ab = config.ablation;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
        };
        let mut bn = Vec::new();

        let (mf, spec_proj) = if ab.uses_spec() {
            let ch = &config.grf_channels;
            let parallel = ParallelConv::new(&mut init, "mf.parallel", ch[0] / 2, config.time_kernel, config.freq_kernel);
            let mut blocks = Vec::new();
            let mut transitions = Vec::new();
            for (i, &c) in ch.iter().enumerate() {
                if ab.grf_enabled() {
                    let reduced = config.reduced_channels(c);
                    blocks.push(GrfBlock::new(&mut init, &format!("mf.grf{i}"), c, reduced, config.ratio));
                    bn.push(BatchNormState::new(reduced));
                }
                if let Some(&next) = ch.get(i + 1) {
                    transitions.push(Conv2dLayer::new(
                        &mut init,
                        &format!("mf.transition{i}"),
                        c,
                        next,
                        (3, 3),
                        ConvGeom::new((2, 2), Padding2d::symmetric(1, 1)),
                    ));
                }
            }
            let encoder = MfEncoder {
                parallel,
                blocks,
                transitions,
            };
            let proj = SpecProjection::new(&mut init, shapes.output.0, config.d_model);
            (Some(encoder), Some(proj))
        } else {
            (None, None)
        };

        let hubert = ab
            .uses_features()
            .then(|| HubertEncoder::new(&mut init, config.feature_dim, config.lstm_hidden, config.d_model));
        let hubert_proj = ab
            .coattention_enabled()
            .then(|| LinearLayer::new(&mut init, "hca.hubert_proj", config.feature_dim, config.d_model));

        let head_in = match ab.inputs {
            Inputs::Both => 2 * config.d_model,
            _ => config.d_model,
        };
        let classifier = Classifier::new(&mut init, head_in, config.classifier_hidden, config.classes);

        Ok(Self {
            config,
            params,
            bn,
            norm: None,
            mf,
            spec_proj,
            hubert,
            hubert_proj,
            classifier,
        })
    }

    /// Number of learnable scalars; normalization buffers are excluded.
    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Learnable-scalar counts grouped by the first two name components,
    /// in registration order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, name, t) in self.params.iter() {
            let key = name.split('.').take(2).collect::<Vec<_>>().join(".");
            match groups.last_mut() {
                Some((k, n)) if *k == key => *n += t.len(),
                _ => groups.push((key, t.len())),
            }
        }
        groups
    }

    /// Same model with parameters and buffers converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            bn: self.bn.iter().map(BatchNormState::cast).collect(),
            norm: self.norm,
            mf: self.mf.clone(),
            spec_proj: self.spec_proj.clone(),
            hubert: self.hubert.clone(),
            hubert_proj: self.hubert_proj.clone(),
            classifier: self.classifier.clone(),
        }
    }

    /// Full forward pass. `spec` is `[N, 1, frames, bins]`, `features` is
    /// `[N, T_h, feature_dim]`; each is required exactly when the ablation
    /// uses it.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        spec: Option<Var>,
        features: Option<Var>,
        mode: NormMode,
    ) -> Result<ForwardOutput> {
        let ab = self.config.ablation;
        let params = &self.params;

        let f_spec = match (ab.uses_spec(), spec) {
            (true, Some(s)) => {
                let shape = g.shape(s);
                let expected = [self.config.spec_frames, self.config.spec_bins];
                if shape.len() != 4 || shape[1] != 1 || shape[2..] != expected {
                    return Err(shape_err!(
                        "spectrogram input must be [N, 1, {}, {}], got {shape:?}",
                        expected[0],
                        expected[1]
                    ));
                }
                let encoder = self.mf.as_ref().expect("spectrogram encoder present");
                let map = encoder.forward(g, params, &mut self.bn, s, mode)?;
                let proj = self.spec_proj.as_ref().expect("spectrogram projection present");
                Some(proj.forward(g, params, map)?)
            }
            (true, None) => {
                return Err(Error::InvalidArgument(format!(
                    "ablation {ab} needs a spectrogram input"
                )))
            }
            (false, _) => None,
        };

        let features = match (ab.uses_features(), features) {
            (true, Some(f)) => {
                let shape = g.shape(f);
                if shape.len() != 3 || shape[2] != self.config.feature_dim {
                    return Err(shape_err!(
                        "feature input must be [N, T, {}], got {shape:?}",
                        self.config.feature_dim
                    ));
                }
                Some(f)
            }
            (true, None) => {
                return Err(Error::InvalidArgument(format!(
                    "ablation {ab} needs a feature input"
                )))
            }
            (false, _) => None,
        };
        let f_hub = match features {
            Some(f) => Some(self.hubert.as_ref().expect("feature encoder present").forward(g, params, f)?),
            None => None,
        };

        let mut attention = None;
        let embedding = match (f_spec, f_hub) {
            (Some(s), Some(h)) if ab.coattention_enabled() => {
                let proj = self.hubert_proj.as_ref().expect("feature projection present");
                let values = proj.forward(g, params, features.unwrap())?;
                let co = coattention(g, s, h, values)?;
                attention = Some(co.weights);
                g.mean_axis(co.fused, 1)?
            }
            (Some(s), Some(h)) => {
                let ms = g.mean_axis(s, 1)?;
                let mh = g.mean_axis(h, 1)?;
                g.concat(&[ms, mh], 1)?
            }
            (Some(s), None) => g.mean_axis(s, 1)?,
            (None, Some(h)) => g.mean_axis(h, 1)?,
            (None, None) => unreachable!("every ablation uses at least one input"),
        };
        let logits = self.classifier.forward(g, params, embedding)?;
        Ok(ForwardOutput {
            logits,
            embedding,
            attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_chain() {
        let shapes = ModelConfig::default().validate().unwrap();
        let hw: Vec<_> = shapes.stages.iter().map(|s| (s.1, s.2)).collect();
        assert_eq!(hw, vec![(148, 100), (74, 50), (37, 25)]);
        assert_eq!(shapes.output, (48, 37, 25));
    }

    #[test]
    fn ablation_names_round_trip() {
        for name in ["none", "no-mf", "no-hca", "no-mf-no-hca", "spec-only", "feat-only"] {
            let a: Ablation = name.parse().unwrap();
            assert_eq!(a.to_string(), name);
            assert_eq!(Ablation::from_code(&a.code()), Some(a));
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn rejects_empty_context_pool() {
        let cfg = ModelConfig {
            spec_frames: 12,
            spec_bins: 16,
            grf_channels: vec![4, 4],
            ratio: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let ok = ModelConfig { ratio: 2, ..cfg };
        assert_eq!(ok.validate().unwrap().output, (4, 3, 4));
    }
}
