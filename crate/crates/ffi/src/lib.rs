//! C ABI over the `mcfront` library.
//!
//! Every function returns an [`McfStatus`]. On failure the message is kept in
//! thread-local storage and can be read with [`mcf_last_error`]. Models are
//! opaque [`McfModel`] handles owned by the caller and released with
//! [`mcf_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mcfront::autodiff::{load_checkpoint, save_checkpoint, Graph, ParamStore};
use mcfront::beamformer::{diffuse_coherence, steering_vector, superdirective_weights, GeometryConfig, LookingDirection};
use mcfront::features::Waveform;
use mcfront::frontend::FrontendInput;
use mcfront::train::{Model, RunConfig};
use mcfront::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    ShapeMismatch = 5,
    Io = 6,
    Checkpoint = 7,
    BufferTooSmall = 8,
    Numeric = 9,
    Panic = 10,
}

/// A configured front-end, its surrogate head and the current weights.
pub struct McfModel {
    cfg: RunConfig,
    model: Model,
    params: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(McfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } | Error::UnknownVariant(_) | Error::Json(_) => McfStatus::InvalidConfig,
            Error::ShapeMismatch { .. } => McfStatus::ShapeMismatch,
            Error::Io(_) | Error::Wav(_) => McfStatus::Io,
            Error::Checkpoint(_) | Error::MissingParam(_) => McfStatus::Checkpoint,
            Error::NonFinite { .. } | Error::SingularMatrix { .. } => McfStatus::Numeric,
            _ => McfStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: McfStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> McfStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mcfront".into());
            McfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(McfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(McfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const McfModel) -> Result<&'a McfModel, Failure> {
    m.as_ref().ok_or_else(|| fail(McfStatus::NullPointer, "model is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(McfStatus::NullPointer, format!("{what} is null")))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next `mcf_*` call on the same thread.
#[no_mangle]
pub extern "C" fn mcf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mcf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a model from a JSON run configuration (null selects the
/// defaults) with weights initialised from the configured seed.
///
/// # Safety
/// `config_json` must be null or a valid NUL-terminated string; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_new(config_json: *const c_char, out: *mut *mut McfModel) -> McfStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let cfg = if config_json.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_json(str_arg(config_json, "config_json")?)?
        };
        let model = Model::new(&cfg)?;
        let params = model.init(&cfg)?;
        *out = Box::into_raw(Box::new(McfModel { cfg, model, params }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`mcf_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_free(model: *mut McfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Re-initialises the weights with `seed`.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_init(model: *mut McfModel, seed: u64) -> McfStatus {
    guard(|| {
        let m = out_ref(model, "model")?;
        let cfg = RunConfig { seed, ..m.cfg.clone() };
        m.params = m.model.init(&cfg)?;
        Ok(())
    })
}

/// Replaces the weights with a checkpoint; the tensors must match the
/// model's variant and shapes.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_load_checkpoint(model: *mut McfModel, path: *const c_char) -> McfStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let m = out_ref(model, "model")?;
        let params = load_checkpoint(&path)?;
        m.model.check_params(&params)?;
        m.params = params;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_save_checkpoint(model: *const McfModel, path: *const c_char) -> McfStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        save_checkpoint(&path, &model_ref(model)?.params)?;
        Ok(())
    })
}

/// Number of trainable scalars in the front-end (the surrogate head is
/// excluded).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_param_count(model: *const McfModel, out: *mut usize) -> McfStatus {
    guard(|| {
        *out_ref(out, "out")? = model_ref(model)?.model.frontend.param_count();
        Ok(())
    })
}

/// Microphone count and sample rate the model expects.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_input_format(
    model: *const McfModel,
    channels: *mut usize,
    sample_rate: *mut f64,
) -> McfStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out_ref(channels, "channels")? = m.cfg.geometry.pair.len();
        *out_ref(sample_rate, "sample_rate")? = m.cfg.features.sample_rate;
        Ok(())
    })
}

/// Width of one output row.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_output_width(model: *const McfModel, out: *mut usize) -> McfStatus {
    guard(|| {
        *out_ref(out, "out")? = model_ref(model)?.model.frontend.output_width();
        Ok(())
    })
}

/// Runs the front-end in evaluation mode on a waveform laid out channel
/// after channel (`channels * samples` values). Writes `rows * width`
/// values row-major to `out` and the row count to `rows`. If `out_len` is
/// too small, or `out` is null, only `rows` is written and
/// `BufferTooSmall` is returned.
///
/// # Safety
/// `waveform` must point to `channels * samples` doubles, `out` to
/// `out_len` doubles (or be null), and `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcf_model_forward(
    model: *const McfModel,
    waveform: *const f64,
    channels: usize,
    samples: usize,
    out: *mut f64,
    out_len: usize,
    rows: *mut usize,
) -> McfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let rows = out_ref(rows, "rows")?;
        if waveform.is_null() {
            return Err(fail(McfStatus::NullPointer, "waveform is null"));
        }
        let total = channels
            .checked_mul(samples)
            .ok_or_else(|| fail(McfStatus::InvalidArgument, "waveform size overflows"))?;
        let data = std::slice::from_raw_parts(waveform, total);
        let wav = Waveform::new(data.chunks(samples.max(1)).map(<[f64]>::to_vec).collect(), m.cfg.features.sample_rate)?;
        let input = FrontendInput::from_waveform(&wav, &m.cfg.features)?;
        let mut g = Graph::new(m.cfg.precision);
        let y = m.model.frontend.forward(&mut g, &m.params, &input, None)?;
        let y = g.value(y.output);
        *rows = y.shape()[0];
        if out.is_null() || out_len < y.len() {
            return Err(fail(
                McfStatus::BufferTooSmall,
                format!("output needs {} values, buffer holds {out_len}", y.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, y.len()).copy_from_slice(y.data());
        Ok(())
    })
}

/// Superdirective weights for one frequency and azimuth, written as
/// interleaved (re, im) pairs per microphone. `geometry_json` may be null
/// for the default array; `full_array` selects all microphones instead of
/// the configured pair.
///
/// # Safety
/// `geometry_json` must be null or NUL-terminated, `out` must point to
/// `out_len` doubles and `mics` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mcf_superdirective_weights(
    geometry_json: *const c_char,
    full_array: bool,
    azimuth: f64,
    freq_hz: f64,
    loading: f64,
    out: *mut f64,
    out_len: usize,
    mics: *mut usize,
) -> McfStatus {
    guard(|| {
        let mics = out_ref(mics, "mics")?;
        let cfg: GeometryConfig = if geometry_json.is_null() {
            GeometryConfig::default()
        } else {
            serde_json::from_str(str_arg(geometry_json, "geometry_json")?).map_err(Error::from)?
        };
        let geometry = if full_array { cfg.full()? } else { cfg.picked()? };
        let d = steering_vector(&geometry, &LookingDirection::horizontal(azimuth), freq_hz);
        let w = superdirective_weights(&diffuse_coherence(&geometry, freq_hz), &d, loading)?;
        *mics = w.len();
        if out.is_null() || out_len < 2 * w.len() {
            return Err(fail(McfStatus::BufferTooSmall, format!("weights need {} values", 2 * w.len())));
        }
        let dst = std::slice::from_raw_parts_mut(out, 2 * w.len());
        for (pair, c) in dst.chunks_mut(2).zip(&w) {
            pair[0] = c.re;
            pair[1] = c.im;
        }
        Ok(())
    })
}
