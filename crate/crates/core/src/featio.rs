//! On-disk formats: `MFH1` feature matrices, JSON-Lines manifests and the
//! `MFC1` named-tensor container used for checkpoints.
//!
//! All multi-byte values are little-endian regardless of host.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, FeatureFileError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"MFH1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MFC1";

/// `rows × cols` matrix of externally computed frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "feature matrix {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn encode_feature_file(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * seq.data.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&(seq.rows as u32).to_le_bytes());
    out.extend_from_slice(&(seq.cols as u32).to_le_bytes());
    for v in &seq.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_file(bytes: &[u8]) -> std::result::Result<FeatureSequence, FeatureFileError> {
    let header = |len: usize| FeatureFileError::Truncated {
        expected: 12,
        found: len,
    };
    if bytes.len() < 4 {
        return Err(header(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FEATURE_MAGIC {
        return Err(FeatureFileError::BadMagic(magic));
    }
    if bytes.len() < 12 {
        return Err(header(bytes.len()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rows == 0 {
        return Err(FeatureFileError::ZeroRows);
    }
    if cols == 0 {
        return Err(FeatureFileError::ZeroCols);
    }
    let expected = 12 + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(FeatureFileError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(FeatureFileError::NonFinite {
            row: i / cols,
            col: i % cols,
        });
    }
    Ok(FeatureSequence { rows, cols, data })
}

pub fn write_feature_file(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_feature_file(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes).map_err(|kind| Error::FeatureFile {
        path: path.to_path_buf(),
        kind,
    })
}

/// The four emotion classes, in logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Neutral,
    Sad,
    Happy,
    Angry,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Neutral, Label::Sad, Label::Happy, Label::Angry];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Neutral => "neutral",
            Label::Sad => "sad",
            Label::Happy => "happy",
            Label::Angry => "angry",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "neutral" => Ok(Label::Neutral),
            "sad" => Ok(Label::Sad),
            "happy" => Ok(Label::Happy),
            "angry" => Ok(Label::Angry),
            "excited" => Err(
                "label \"excited\" is not accepted; merge it into \"happy\" before building the manifest"
                    .to_string(),
            ),
            other => Err(format!(
                "unknown label {other:?}; expected one of neutral, sad, happy, angry"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub session: String,
    pub label: Label,
    pub wav_path: String,
    pub feature_path: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    utterance_id: String,
    speaker_id: String,
    session: String,
    label: String,
    wav_path: String,
    feature_path: String,
}

/// Parses JSON-Lines manifest text. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<ManifestEntry>> {
    let err = |line: usize, msg: String| Error::Manifest {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry =
            serde_json::from_str(line).map_err(|e| err(lineno, format!("malformed entry: {e}")))?;
        let label = raw.label.parse::<Label>().map_err(|m| err(lineno, m))?;
        for (field, value) in [
            ("utterance_id", &raw.utterance_id),
            ("speaker_id", &raw.speaker_id),
            ("wav_path", &raw.wav_path),
            ("feature_path", &raw.feature_path),
        ] {
            if value.is_empty() {
                return Err(err(lineno, format!("field {field} is empty")));
            }
        }
        if !seen.insert(raw.utterance_id.clone()) {
            return Err(err(
                lineno,
                format!("duplicate utterance_id {:?}", raw.utterance_id),
            ));
        }
        out.push(ManifestEntry {
            utterance_id: raw.utterance_id,
            speaker_id: raw.speaker_id,
            session: raw.session,
            label,
            wav_path: raw.wav_path,
            feature_path: raw.feature_path,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolves a manifest path field relative to the manifest's directory.
pub fn resolve_path(manifest: &Path, field: &str) -> PathBuf {
    let p = Path::new(field);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest
            .parent()
            .map(|d| d.join(p))
            .unwrap_or_else(|| p.to_path_buf())
    }
}

/// Serializes named f32 tensors into the `MFC1` container.
pub fn encode_tensor_map(entries: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let bytes = name.as_bytes();
        assert!(bytes.len() <= u16::MAX as usize, "entry name too long");
        assert!(t.ndim() <= u8::MAX as usize, "too many dimensions");
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensor_map(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = ByteReader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let count = r.u32()? as usize;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|_| CheckpointError::ShapeMismatch {
            name: name.clone(),
            expected: vec![],
            found: shape.clone(),
        })?;
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Duplicate(name));
        }
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Truncated(r.pos));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_layout() {
        let seq = FeatureSequence::new(1, 1, vec![0.0]).unwrap();
        let bytes = encode_feature_file(&seq);
        assert_eq!(
            bytes,
            [b'M', b'F', b'H', b'1', 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]
        );
        assert_eq!(decode_feature_file(&bytes).unwrap(), seq);
    }

    #[test]
    fn feature_file_errors_are_distinct() {
        let good = encode_feature_file(&FeatureSequence::new(2, 3, vec![1.0; 6]).unwrap());
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert_eq!(
            decode_feature_file(&bad),
            Err(FeatureFileError::BadMagic(*b"XXXX"))
        );
        assert!(matches!(
            decode_feature_file(&good[..good.len() - 1]),
            Err(FeatureFileError::Truncated { expected: 36, found: 35 })
        ));
        let mut zero = good[..12].to_vec();
        zero[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(decode_feature_file(&zero), Err(FeatureFileError::ZeroRows));
    }

    #[test]
    fn manifest_validation() {
        let p = Path::new("m.jsonl");
        assert!(parse_manifest("", p).unwrap().is_empty());
        let line = r#"{"utterance_id":"u1","speaker_id":"s1","session":"Ses01","label":"sad","wav_path":"a.wav","feature_path":"a.mfh"}"#;
        let entries = parse_manifest(line, p).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].label, Label::Sad);
        assert_eq!(entries[0].speaker_id, "s1");

        let excited = line.replace("sad", "excited");
        let err = parse_manifest(&excited, p).unwrap_err().to_string();
        assert!(err.contains("happy"), "{err}");

        let unknown = line.replace("sad", "bored");
        let err = parse_manifest(&unknown, p).unwrap_err().to_string();
        assert!(err.contains("bored"), "{err}");

        let dup = format!("{line}\n{line}\n");
        let err = parse_manifest(&dup, p).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");

        let broken = format!("{line}\n{{not json\n");
        let err = parse_manifest(&broken, p).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 2, .. }), "{err}");
    }

    #[test]
    fn tensor_map_rejects_garbage() {
        assert_eq!(
            decode_tensor_map(b"NOPE\0\0\0\0"),
            Err(CheckpointError::BadMagic(*b"NOPE"))
        );
        let t = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        let bytes = encode_tensor_map(&[("a".into(), t)]);
        assert!(matches!(
            decode_tensor_map(&bytes[..bytes.len() - 2]),
            Err(CheckpointError::Truncated(_))
        ));
    }
}
