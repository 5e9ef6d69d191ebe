//! Waveform loading, fixed-length segmentation and log-spectrogram extraction.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono waveform with samples nominally in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSegment {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM16 or float32 RIFF/WAVE file, downmixing stereo by averaging.
pub fn load_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<AudioSegment> {
    let path = path.as_ref();
    let wav_err = |msg: String| Error::Wav {
        path: path.to_path_buf(),
        msg,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(describe_hound_error(e)))?;
    let spec = reader.spec();
    if spec.sample_rate != expected_rate {
        return Err(wav_err(format!(
            "fmt chunk: sample rate {} Hz, expected {expected_rate} Hz (no resampling)",
            spec.sample_rate
        )));
    }
    let channels = spec.channels as usize;
    if channels != 1 && channels != 2 {
        return Err(wav_err(format!(
            "fmt chunk: {channels} channels, only mono and stereo are supported"
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(wav_err(format!(
                "fmt chunk: unsupported codec {fmt:?} with {bits} bits per sample \
                 (PCM 16-bit or 32-bit float required)"
            )))
        }
    }
    .map_err(|e| wav_err(format!("data chunk: {}", describe_hound_error(e))))?;
    let samples = if channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|lr| (lr[0] + lr[1]) * 0.5)
            .collect()
    } else {
        interleaved
    };
    Ok(AudioSegment::new(samples, spec.sample_rate))
}

fn describe_hound_error(e: hound::Error) -> String {
    match e {
        hound::Error::FormatError(msg) => format!("malformed header: {msg}"),
        hound::Error::Unsupported => "fmt chunk: unsupported WAVE format".to_string(),
        hound::Error::TooWide => "fmt chunk: sample width too large".to_string(),
        other => other.to_string(),
    }
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1)`.
pub fn write_wav_pcm16(path: impl AsRef<Path>, audio: &AudioSegment) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &audio.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

/// Cuts audio into consecutive non-overlapping windows of `seconds`, zero
/// padding the remainder. At least one segment is always returned.
pub fn segment(audio: &AudioSegment, seconds: f64) -> Vec<AudioSegment> {
    let len = segment_len(audio.sample_rate, seconds);
    let mut out: Vec<AudioSegment> = audio
        .samples
        .chunks(len)
        .map(|chunk| {
            let mut s = chunk.to_vec();
            s.resize(len, 0.0);
            AudioSegment::new(s, audio.sample_rate)
        })
        .collect();
    if out.is_empty() {
        out.push(AudioSegment::new(vec![0.0; len], audio.sample_rate));
    }
    out
}

pub fn segment_len(sample_rate: u32, seconds: f64) -> usize {
    (sample_rate as f64 * seconds).round() as usize
}

/// Framing and transform parameters of the log spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_ms: u32,
    pub hop_ms: u32,
    pub dft_len: usize,
    pub bins: usize,
    pub log_floor: f64,
    pub segment_seconds: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame_ms: 40,
            hop_ms: 10,
            dft_len: 800,
            bins: 200,
            log_floor: 1e-10,
            segment_seconds: 3.0,
        }
    }
}

impl FrontendConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as usize * self.frame_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    /// Frame count for a signal of `samples` samples, `None` if shorter than one frame.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        let win = self.frame_len();
        (samples >= win).then(|| (samples - win) / self.hop_len() + 1)
    }

    /// Frames in one full segment (297 with the defaults).
    pub fn segment_frames(&self) -> usize {
        self.frame_count(segment_len(self.sample_rate, self.segment_seconds))
            .unwrap_or(0)
    }
}

/// `frames × bins` matrix of log power values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Symmetric Hamming window, `0.54 - 0.46 cos(2πn/(N-1))`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Reusable extractor holding the FFT plan and window.
pub struct SpectrogramExtractor {
    config: FrontendConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectrogramExtractor {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        let win = config.frame_len();
        if win == 0 || config.hop_len() == 0 {
            return Err(Error::Config(format!(
                "frame length {win} and hop {} must be positive",
                config.hop_len()
            )));
        }
        if config.dft_len < win || config.bins == 0 || config.bins > config.dft_len / 2 + 1 {
            return Err(Error::Config(format!(
                "dft length {} must cover the {win}-sample window and hold {} bins",
                config.dft_len, config.bins
            )));
        }
        let fft = FftPlanner::new().plan_fft_forward(config.dft_len);
        Ok(Self {
            window: hamming(win),
            fft,
            config,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn extract(&self, segment: &AudioSegment) -> Result<Spectrogram> {
        let cfg = &self.config;
        if segment.sample_rate != cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "segment sampled at {} Hz, frontend expects {} Hz",
                segment.sample_rate, cfg.sample_rate
            )));
        }
        let win = cfg.frame_len();
        let hop = cfg.hop_len();
        let frames = cfg.frame_count(segment.samples.len()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "segment of {} samples is shorter than one {win}-sample window",
                segment.samples.len()
            ))
        })?;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.dft_len];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut data = Vec::with_capacity(frames * cfg.bins);
        for f in 0..frames {
            let frame = &segment.samples[f * hop..f * hop + win];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < win {
                    Complex::new(frame[i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend(
                buf[..cfg.bins]
                    .iter()
                    .map(|c| (c.norm_sqr() + cfg.log_floor).ln() as f32),
            );
        }
        Ok(Spectrogram {
            frames,
            bins: cfg.bins,
            data,
        })
    }
}

/// Log spectrogram with the default frontend settings.
pub fn log_spectrogram(segment: &AudioSegment) -> Result<Spectrogram> {
    SpectrogramExtractor::new(FrontendConfig {
        sample_rate: segment.sample_rate,
        ..FrontendConfig::default()
    })?
    .extract(segment)
}

/// Magnitudes of the first `bins` points of the zero-padded `dft_len` DFT of `frame`.
pub fn dft_magnitudes(frame: &[f64], dft_len: usize, bins: usize) -> Vec<f64> {
    let fft = FftPlanner::new().plan_fft_forward(dft_len);
    let mut buf: Vec<Complex<f64>> = (0..dft_len)
        .map(|i| Complex::new(frame.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft.process(&mut buf);
    buf[..bins].iter().map(|c| c.norm()).collect()
}

/// Global scalar standardization fitted on a training fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f32,
    pub std: f32,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: 0.0,
        std: 1.0,
    };

    /// Population mean and standard deviation over every value of every spectrogram.
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        let specs: Vec<&[f32]> = specs.into_iter().collect();
        for s in &specs {
            for &v in *s {
                n += 1;
                sum += v as f64;
            }
        }
        if n == 0 {
            return Err(Error::Data("normalization fitted on no data".into()));
        }
        let mean = sum / n as f64;
        for s in &specs {
            for &v in *s {
                let d = v as f64 - mean;
                sq += d * d;
            }
        }
        let std = (sq / n as f64).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Data(format!(
                "spectrogram standard deviation is {std}; cannot normalize"
            )));
        }
        Ok(Self {
            mean: mean as f32,
            std: std as f32,
        })
    }

    pub fn apply(&self, values: &mut [f32]) {
        for v in values {
            *v = (*v - self.mean) / self.std;
        }
    }
}

pub fn normalize_spectrogram(spec: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    if !(stats.std > 0.0) {
        return Err(Error::Data(format!("normalization std {} is not positive", stats.std)));
    }
    let mut out = spec.clone();
    stats.apply(&mut out.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segmentation_counts() {
        let sr = 16_000;
        let secs = |s: f64| AudioSegment::new(vec![0.25; (s * sr as f64) as usize], sr);
        let segs = segment(&secs(7.0), 3.0);
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.samples.len() == 48_000));
        assert!(segs[2].samples[..16_000].iter().all(|&v| v == 0.25));
        assert!(segs[2].samples[16_000..].iter().all(|&v| v == 0.0));

        let exact = secs(3.0);
        let one = segment(&exact, 3.0);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].samples, exact.samples);

        let short = segment(&secs(0.5), 3.0);
        assert_eq!(short.len(), 1);
        assert!(short[0].samples[8_000..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_audio_still_yields_a_segment() {
        let segs = segment(&AudioSegment::new(vec![], 16_000), 3.0);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].samples.len(), 48_000);
    }

    #[test]
    fn default_frame_geometry() {
        let cfg = FrontendConfig::default();
        assert_eq!(cfg.frame_len(), 640);
        assert_eq!(cfg.hop_len(), 160);
        assert_eq!(cfg.segment_frames(), 297);
        assert_eq!(cfg.frame_count(639), None);
    }

    #[test]
    fn short_segment_is_rejected() {
        let seg = AudioSegment::new(vec![0.0; 639], 16_000);
        assert!(log_spectrogram(&seg).is_err());
    }

    #[test]
    fn zero_signal_hits_log_floor() {
        let spec = log_spectrogram(&AudioSegment::new(vec![0.0; 48_000], 16_000)).unwrap();
        assert_eq!((spec.frames, spec.bins), (297, 200));
        let floor = (1e-10f64).ln() as f32;
        assert!(spec.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn hamming_is_symmetric() {
        let w = hamming(640);
        assert!((w[0] - 0.08).abs() < 1e-12);
        for i in 0..320 {
            assert!((w[i] - w[639 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_edge_cases() {
        let constant = [1.5f32; 10];
        assert!(NormStats::fit([&constant[..]]).is_err());
        let spec = Spectrogram {
            frames: 1,
            bins: 3,
            data: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(normalize_spectrogram(&spec, &NormStats::IDENTITY).unwrap(), spec);
        let stats = NormStats::fit([&spec.data[..]]).unwrap();
        let z = normalize_spectrogram(&spec, &stats).unwrap();
        let mean: f32 = z.data.iter().sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-5);
    }
}
