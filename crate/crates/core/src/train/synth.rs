//! Deterministic synthetic corpus: class-dependent tones and class-dependent
//! feature means, spread over several speakers.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{write_wav_pcm16, AudioSegment};
use crate::error::{Error, Result};
use crate::featio::{write_feature_file, write_manifest, FeatureSequence, Label, ManifestEntry};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub speakers: usize,
    pub feature_dim: usize,
    pub feature_frames: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub tone_amplitude: f64,
    pub audio_noise: f64,
    pub feature_noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            speakers: 8,
            feature_dim: 768,
            feature_frames: 149,
            seconds: 3.0,
            sample_rate: 16_000,
            tone_amplitude: 0.5,
            audio_noise: 0.05,
            feature_noise: 0.1,
        }
    }
}

/// Tone frequency of class `k`.
pub fn class_frequency(k: usize) -> f64 {
    300.0 * (k + 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub entries: Vec<ManifestEntry>,
    pub audio: Vec<AudioSegment>,
    pub features: Vec<FeatureSequence>,
    /// Class mean feature vectors, one per class.
    pub class_means: Vec<Vec<f32>>,
}

/// Generates `n_per_class` utterances per class. Utterance `i` of each class
/// belongs to speaker `i % speakers`, so every speaker holds every class
/// whenever `n_per_class ≥ speakers`.
pub fn make_synthetic(seed: u64, n_per_class: usize, opts: &SynthOptions) -> Result<SyntheticData> {
    if n_per_class == 0 || opts.speakers == 0 || opts.feature_dim == 0 || opts.feature_frames == 0 {
        return Err(Error::Config(
            "synthetic data needs positive counts of utterances, speakers, feature dims and frames".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio_noise = Normal::new(0.0, opts.audio_noise).map_err(|e| Error::Config(e.to_string()))?;
    let feature_noise = Normal::new(0.0, opts.feature_noise).map_err(|e| Error::Config(e.to_string()))?;
    let class_means: Vec<Vec<f32>> = (0..Label::COUNT)
        .map(|_| {
            (0..opts.feature_dim)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect()
        })
        .collect();
    let len = (opts.seconds * opts.sample_rate as f64).round() as usize;
    let mut data = SyntheticData {
        entries: Vec::new(),
        audio: Vec::new(),
        features: Vec::new(),
        class_means,
    };
    for i in 0..n_per_class {
        for (k, label) in Label::ALL.iter().enumerate() {
            let speaker = i % opts.speakers;
            let freq = class_frequency(k);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let samples = (0..len)
                .map(|n| {
                    let t = n as f64 / opts.sample_rate as f64;
                    let v = opts.tone_amplitude * (std::f64::consts::TAU * freq * t + phase).sin()
                        + audio_noise.sample(&mut rng);
                    v.clamp(-1.0, 1.0) as f32
                })
                .collect();
            let mean = &data.class_means[k];
            let feats = (0..opts.feature_frames * opts.feature_dim)
                .map(|j| mean[j % opts.feature_dim] + feature_noise.sample(&mut rng) as f32)
                .collect();
            let id = format!("spk{speaker:02}_{}_{i:03}", label.as_str());
            data.entries.push(ManifestEntry {
                utterance_id: id.clone(),
                speaker_id: format!("spk{speaker:02}"),
                session: format!("ses{}", speaker / 2 + 1),
                label: *label,
                wav_path: format!("wav/{id}.wav"),
                feature_path: format!("features/{id}.mfh"),
            });
            data.audio.push(AudioSegment::new(samples, opts.sample_rate));
            data.features.push(FeatureSequence::new(opts.feature_frames, opts.feature_dim, feats)?);
        }
    }
    Ok(data)
}

/// Writes wavs, feature files and `manifest.jsonl` under `dir`; returns the
/// manifest path. Paths inside the manifest are relative to `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, data: &SyntheticData) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in ["wav", "features"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for ((e, a), f) in data.entries.iter().zip(&data.audio).zip(&data.features) {
        write_wav_pcm16(dir.join(&e.wav_path), a)?;
        write_feature_file(dir.join(&e.feature_path), f)?;
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &data.entries)?;
    Ok(manifest)
}
