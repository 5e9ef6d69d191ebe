//! In-memory datasets: per-segment spectrograms and aligned feature windows
//! for every utterance, plus batch assembly.

use std::path::Path;

use crate::audio::{segment, AudioSegment, FrontendConfig, NormStats, SpectrogramExtractor};
use crate::error::{Error, Result};
use crate::featio::{load_manifest, read_feature_file, resolve_path, FeatureSequence, Label, ManifestEntry};
use crate::tensor::Tensor;

/// Feature frames per second of audio (a 20 ms hop).
pub const FEATURE_RATE_HZ: f64 = 50.0;

/// How a dataset is materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct DataOptions {
    pub frontend: FrontendConfig,
    /// Feature rows per segment window.
    pub feature_frames: usize,
    pub load_spec: bool,
    pub load_features: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            feature_frames: 149,
            load_spec: true,
            load_features: true,
        }
    }
}

/// One fixed-length segment of an utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentData {
    /// Un-normalized log spectrogram, `frames × bins`.
    pub spec: Option<Vec<f32>>,
    /// Feature window, `feature_frames × feature_dim`, zero padded.
    pub features: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub session: String,
    pub label: Label,
    pub segments: Vec<SegmentData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec_frames: usize,
    pub spec_bins: usize,
    pub feature_frames: usize,
    /// Zero when features were not loaded.
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

/// Rows `[offset, offset + frames)` of `seq`, zero padded past its end.
pub fn feature_window(seq: &FeatureSequence, offset: usize, frames: usize) -> Vec<f32> {
    let mut out = vec![0.0; frames * seq.cols];
    for r in 0..frames {
        let src = offset + r;
        if src >= seq.rows {
            break;
        }
        out[r * seq.cols..(r + 1) * seq.cols].copy_from_slice(seq.row(src));
    }
    out
}

/// First feature row aligned with segment `index` of `seconds`-long segments.
pub fn feature_offset(index: usize, seconds: f64) -> usize {
    (index as f64 * seconds * FEATURE_RATE_HZ).round() as usize
}

impl Dataset {
    /// Builds a dataset from decoded inputs. `audio[i]` and `features[i]`
    /// belong to `entries[i]`; either list may be empty when not loaded.
    pub fn from_parts(
        entries: &[ManifestEntry],
        audio: &[AudioSegment],
        features: &[FeatureSequence],
        opts: &DataOptions,
    ) -> Result<Self> {
        if !opts.load_spec && !opts.load_features {
            return Err(Error::Config("dataset needs spectrograms, features or both".into()));
        }
        if opts.load_spec && audio.len() != entries.len() {
            return Err(Error::Data(format!("{} entries but {} waveforms", entries.len(), audio.len())));
        }
        if opts.load_features && features.len() != entries.len() {
            return Err(Error::Data(format!(
                "{} entries but {} feature sequences",
                entries.len(),
                features.len()
            )));
        }
        if opts.load_features && opts.feature_frames == 0 {
            return Err(Error::Config("feature_frames must be positive".into()));
        }
        let extractor = SpectrogramExtractor::new(opts.frontend.clone())?;
        let seconds = opts.frontend.segment_seconds;
        let feature_dim = if opts.load_features {
            features.first().map_or(0, |f| f.cols)
        } else {
            0
        };
        let mut utterances = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let specs: Option<Vec<Vec<f32>>> = if opts.load_spec {
                let segs = segment(&audio[i], seconds);
                Some(
                    segs.iter()
                        .map(|s| extractor.extract(s).map(|sp| sp.data))
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };
            let seq = opts.load_features.then(|| &features[i]);
            if let Some(seq) = seq {
                if seq.cols != feature_dim {
                    return Err(Error::Data(format!(
                        "utterance {}: feature width {} differs from {feature_dim}",
                        e.utterance_id, seq.cols
                    )));
                }
            }
            let count = match (&specs, seq) {
                (Some(s), _) => s.len(),
                (None, Some(f)) => {
                    let per_segment = (seconds * FEATURE_RATE_HZ).round() as usize;
                    f.rows.div_ceil(per_segment.max(1)).max(1)
                }
                (None, None) => unreachable!("checked above"),
            };
            let mut specs = specs.map(Vec::into_iter);
            let segments = (0..count)
                .map(|k| SegmentData {
                    spec: specs.as_mut().and_then(Iterator::next),
                    features: seq.map(|f| feature_window(f, feature_offset(k, seconds), opts.feature_frames)),
                })
                .collect();
            utterances.push(Utterance {
                id: e.utterance_id.clone(),
                speaker: e.speaker_id.clone(),
                session: e.session.clone(),
                label: e.label,
                segments,
            });
        }
        Ok(Self {
            spec_frames: opts.frontend.segment_frames(),
            spec_bins: opts.frontend.bins,
            feature_frames: if opts.load_features { opts.feature_frames } else { 0 },
            feature_dim,
            utterances,
        })
    }

    /// Reads a manifest and every file it references. Files of a modality
    /// that is not requested are never opened.
    pub fn load(manifest: impl AsRef<Path>, opts: &DataOptions) -> Result<Self> {
        let manifest = manifest.as_ref();
        let entries = load_manifest(manifest)?;
        let audio = if opts.load_spec {
            entries
                .iter()
                .map(|e| crate::audio::load_wav(resolve_path(manifest, &e.wav_path), opts.frontend.sample_rate))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let features = if opts.load_features {
            entries
                .iter()
                .map(|e| read_feature_file(resolve_path(manifest, &e.feature_path)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Self::from_parts(&entries, &audio, &features, opts)
    }

    pub fn has_spec(&self) -> bool {
        self.utterances
            .first()
            .is_some_and(|u| u.segments.first().is_some_and(|s| s.spec.is_some()))
    }

    pub fn has_features(&self) -> bool {
        self.feature_dim > 0
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// `(utterance, segment)` pairs of the given utterances, in order.
    pub fn segments_of(&self, utterances: &[usize]) -> Vec<(usize, usize)> {
        utterances
            .iter()
            .flat_map(|&u| (0..self.utterances[u].segments.len()).map(move |s| (u, s)))
            .collect()
    }

    /// Global spectrogram statistics over the given utterances.
    pub fn fit_norm(&self, utterances: &[usize]) -> Result<NormStats> {
        NormStats::fit(
            utterances
                .iter()
                .flat_map(|&u| self.utterances[u].segments.iter())
                .filter_map(|s| s.spec.as_deref()),
        )
    }

    /// Stacks segments into model inputs: spectrograms `[N, 1, frames, bins]`
    /// (standardized with `norm`) and features `[N, T_h, D]`, with labels.
    pub fn batch(
        &self,
        items: &[(usize, usize)],
        norm: Option<&NormStats>,
        want_spec: bool,
        want_features: bool,
    ) -> Result<Batch> {
        let n = items.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let labels = items.iter().map(|&(u, _)| self.utterances[u].label.index()).collect();
        let spec = if want_spec {
            let mut data = Vec::with_capacity(n * self.spec_frames * self.spec_bins);
            for &(u, s) in items {
                let src = self.utterances[u].segments[s]
                    .spec
                    .as_ref()
                    .ok_or_else(|| Error::Data("spectrograms were not loaded".into()))?;
                let start = data.len();
                data.extend_from_slice(src);
                if let Some(norm) = norm {
                    norm.apply(&mut data[start..]);
                }
            }
            Some(Tensor::new(&[n, 1, self.spec_frames, self.spec_bins], data)?)
        } else {
            None
        };
        let features = if want_features {
            let mut data = Vec::with_capacity(n * self.feature_frames * self.feature_dim);
            for &(u, s) in items {
                let src = self.utterances[u].segments[s]
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::Data("features were not loaded".into()))?;
                data.extend_from_slice(src);
            }
            Some(Tensor::new(&[n, self.feature_frames, self.feature_dim], data)?)
        } else {
            None
        };
        Ok(Batch {
            spec,
            features,
            labels,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub spec: Option<Tensor<f32>>,
    pub features: Option<Tensor<f32>>,
    pub labels: Vec<usize>,
}
