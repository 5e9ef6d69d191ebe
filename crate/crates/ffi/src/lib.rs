//! C ABI over the `mfhca` library.
//!
//! Every function returns an [`MfhcaStatus`]. On failure a message is stored
//! per thread and can be read with [`mfhca_last_error`]. Panics never cross
//! the boundary; they surface as `MFHCA_STATUS_PANIC`.
//!
//! Functions that fill caller buffers report the required size through their
//! shape out-parameters even when the buffer is too small, so callers can
//! query with a null buffer first and call again.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mfhca::audio::{AudioSegment, FrontendConfig, SpectrogramExtractor};
use mfhca::autodiff::{Graph, NormMode};
use mfhca::config::RunConfig;
use mfhca::error::Error;
use mfhca::featio::{read_feature_file, write_feature_file, FeatureSequence};
use mfhca::model::{load_checkpoint, save_checkpoint, Model};
use mfhca::tensor::Tensor;
use mfhca::train::{wa_ua, ConfusionMatrix};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfhcaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Io = 5,
    Numerical = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct MfhcaModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> MfhcaStatus {
    match e {
        Error::Config(_) => MfhcaStatus::Config,
        Error::Numerical(_) => MfhcaStatus::Numerical,
        Error::Io { .. } => MfhcaStatus::Io,
        Error::Shape(_) | Error::InvalidArgument(_) | Error::Graph(_) => MfhcaStatus::InvalidArgument,
        Error::Wav { .. }
        | Error::FeatureFile { .. }
        | Error::Manifest { .. }
        | Error::Checkpoint { .. }
        | Error::Data(_) => MfhcaStatus::Data,
    }
}

struct Fail(MfhcaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MfhcaStatus::InvalidArgument, msg.into())
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> MfhcaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MfhcaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            MfhcaStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(MfhcaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    non_null(p, what)?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *mut MfhcaModel) -> Result<&'a mut MfhcaModel, Fail> {
    non_null(m, "model")?;
    Ok(&mut *m)
}

unsafe fn write_out<T>(p: *mut T, value: T) {
    if !p.is_null() {
        *p = value;
    }
}

fn publish(model: Model<f32>, out: *mut *mut MfhcaModel) -> Result<(), Fail> {
    non_null(out, "out")?;
    let handle = Box::into_raw(Box::new(MfhcaModel { inner: model }));
    unsafe { *out = handle };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mfhca_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfhca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model with the default architecture.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_new(seed: u64, out: *mut *mut MfhcaModel) -> MfhcaStatus {
    guard(|| publish(Model::new(RunConfig::default().model, seed)?, out))
}

/// Builds a model from `key = value` configuration text.
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out` as in [`mfhca_model_new`].
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_from_config(
    config_text: *const c_char,
    seed: u64,
    out: *mut *mut MfhcaModel,
) -> MfhcaStatus {
    guard(|| {
        non_null(config_text, "config_text")?;
        let text = CStr::from_ptr(config_text)
            .to_str()
            .map_err(|_| invalid("config_text is not valid UTF-8"))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, "<config>".as_ref())?;
        publish(Model::new(cfg.model, seed)?, out)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` as in [`mfhca_model_new`].
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_load(path: *const c_char, out: *mut *mut MfhcaModel) -> MfhcaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        publish(load_checkpoint(path)?, out)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_save(model: *mut MfhcaModel, path: *const c_char) -> MfhcaStatus {
    guard(|| {
        let model = model_arg(model)?;
        let path = path_arg(path, "path")?;
        save_checkpoint(path, &model.inner)?;
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_free(model: *mut MfhcaModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_param_count(model: *mut MfhcaModel, out: *mut usize) -> MfhcaStatus {
    guard(|| {
        let model = model_arg(model)?;
        non_null(out, "out")?;
        *out = model.inner.count_params();
        Ok(())
    })
}

/// Input geometry: spectrogram frames and bins, feature width and class count.
/// Null out-pointers are skipped.
///
/// # Safety
/// `model` must come from this library; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_shape(
    model: *mut MfhcaModel,
    spec_frames: *mut usize,
    spec_bins: *mut usize,
    feature_dim: *mut usize,
    classes: *mut usize,
) -> MfhcaStatus {
    guard(|| {
        let cfg = &model_arg(model)?.inner.config;
        write_out(spec_frames, cfg.spec_frames);
        write_out(spec_bins, cfg.spec_bins);
        write_out(feature_dim, cfg.feature_dim);
        write_out(classes, cfg.classes);
        Ok(())
    })
}

/// Evaluation-mode forward pass over `batch` segments.
///
/// `spec` holds `batch × frames × bins` raw log spectrogram values, which are
/// standardized with the statistics stored in the model. `features` holds
/// `batch × feature_frames × feature_dim` values. Pass null for an input the
/// model's ablation does not use. `logits` receives `batch × classes` values.
///
/// # Safety
/// Buffers must hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn mfhca_model_forward(
    model: *mut MfhcaModel,
    batch: usize,
    spec: *const f32,
    features: *const f32,
    feature_frames: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MfhcaStatus {
    guard(|| {
        let model = &mut model_arg(model)?.inner;
        if batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        let cfg = model.config.clone();
        let need = batch * cfg.classes;
        if logits_len < need {
            return Err(invalid(format!("logits buffer holds {logits_len} values, {need} needed")));
        }
        non_null(logits, "logits")?;
        let ab = cfg.ablation;
        let mut g = Graph::new();
        let spec_var = if ab.uses_spec() {
            let n = batch * cfg.spec_frames * cfg.spec_bins;
            let mut data = slice_arg(spec, n, "spec")?.to_vec();
            if let Some(norm) = model.norm {
                norm.apply(&mut data);
            }
            Some(g.constant(Tensor::new(&[batch, 1, cfg.spec_frames, cfg.spec_bins], data)?))
        } else {
            None
        };
        let feat_var = if ab.uses_features() {
            if feature_frames == 0 {
                return Err(invalid("feature_frames must be positive"));
            }
            let n = batch * feature_frames * cfg.feature_dim;
            let data = slice_arg(features, n, "features")?.to_vec();
            Some(g.constant(Tensor::new(&[batch, feature_frames, cfg.feature_dim], data)?))
        } else {
            None
        };
        let out = model.forward(&mut g, spec_var, feat_var, NormMode::Eval)?;
        let values = g.value(out.logits).data();
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(&values[..need]);
        Ok(())
    })
}

/// Log spectrogram of one segment with the default frontend at `sample_rate`.
/// Writes `frames × bins` values to `out`; a null `out` with `out_len` zero
/// only reports the shape.
///
/// # Safety
/// `samples` must hold `len` values; `out` must hold `out_len` values or be
/// null with `out_len` zero.
#[no_mangle]
pub unsafe extern "C" fn mfhca_log_spectrogram(
    samples: *const f32,
    len: usize,
    sample_rate: u32,
    out: *mut f32,
    out_len: usize,
    frames: *mut usize,
    bins: *mut usize,
) -> MfhcaStatus {
    guard(|| {
        let samples = slice_arg(samples, len, "samples")?;
        let extractor = SpectrogramExtractor::new(FrontendConfig {
            sample_rate,
            ..FrontendConfig::default()
        })?;
        let spec = extractor.extract(&AudioSegment::new(samples.to_vec(), sample_rate))?;
        write_out(frames, spec.frames);
        write_out(bins, spec.bins);
        fill(out, out_len, &spec.data)
    })
}

unsafe fn fill(out: *mut f32, out_len: usize, data: &[f32]) -> Result<(), Fail> {
    if out.is_null() && out_len == 0 {
        return Ok(());
    }
    if out_len < data.len() {
        return Err(invalid(format!("output buffer holds {out_len} values, {} needed", data.len())));
    }
    non_null(out, "out")?;
    std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
    Ok(())
}

/// Weighted and unweighted accuracy of a row-major `classes × classes`
/// confusion matrix (rows are true classes).
///
/// # Safety
/// `counts` must hold `classes * classes` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfhca_wa_ua(
    counts: *const u64,
    classes: usize,
    wa: *mut f64,
    ua: *mut f64,
) -> MfhcaStatus {
    guard(|| {
        let counts = slice_arg(counts, classes * classes, "counts")?;
        non_null(wa, "wa")?;
        non_null(ua, "ua")?;
        let rows = counts.chunks(classes.max(1)).map(<[u64]>::to_vec).collect();
        let (w, u) = wa_ua(&ConfusionMatrix::from_rows(rows)?)?;
        *wa = w;
        *ua = u;
        Ok(())
    })
}

/// Writes a `rows × cols` matrix as a feature file.
///
/// # Safety
/// `path` must be NUL-terminated; `data` must hold `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn mfhca_feature_write(
    path: *const c_char,
    data: *const f32,
    rows: usize,
    cols: usize,
) -> MfhcaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let data = slice_arg(data, rows * cols, "data")?;
        write_feature_file(path, &FeatureSequence::new(rows, cols, data.to_vec())?)?;
        Ok(())
    })
}

/// Reads a feature file. `rows` and `cols` are always reported; a null `out`
/// with `out_len` zero only reports the shape.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must hold `out_len` values or be null
/// with `out_len` zero.
#[no_mangle]
pub unsafe extern "C" fn mfhca_feature_read(
    path: *const c_char,
    out: *mut f32,
    out_len: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> MfhcaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let seq = read_feature_file(path)?;
        write_out(rows, seq.rows);
        write_out(cols, seq.cols);
        fill(out, out_len, &seq.data)
    })
}
