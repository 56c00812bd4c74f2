//! C ABI over the `mpgelu` engine.
//!
//! Models live behind an opaque `MpgeluModel` handle. Every fallible call
//! returns an `MpgeluStatus`; on failure the message is available from
//! `mpgelu_last_error_message` on the same thread until the next failing call.
//! Matrices are row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mpgelu::data::Dataset;
use mpgelu::moment_core::CovarianceMode;
use mpgelu::network::{build_model, load_model, save_model};
use mpgelu::objective::predictive_moments;
use mpgelu::training::{train_from, TrainConfig};
use mpgelu::{Architecture, Error, HeadKind, Model};

pub const MPGELU_ARCH_MP_GELU: i32 = 0;
pub const MPGELU_ARCH_RELU: i32 = 1;
pub const MPGELU_COV_FULL: i32 = 0;
pub const MPGELU_COV_DIAGONAL: i32 = 1;
/// Two outputs `(h1, h2)` with `p(y|h) = N(y | h1, exp(h2))`.
pub const MPGELU_HEAD_HETEROSCEDASTIC2: i32 = 0;
/// One mean output; predictive variance is the epistemic part only.
pub const MPGELU_HEAD_HOMOSCEDASTIC1: i32 = 1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpgeluStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NumericalError = 4,
    IoError = 5,
    ParseError = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct MpgeluModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(MpgeluStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DimensionMismatch { .. }
            | Error::ModeMismatch { .. }
            | Error::DatasetShape { .. } => MpgeluStatus::DimensionMismatch,
            Error::InvalidRate(_) | Error::InvalidArgument(_) => MpgeluStatus::InvalidArgument,
            Error::NegativeVariance { .. } | Error::Asymmetric { .. } | Error::NonFinite { .. } => {
                MpgeluStatus::NumericalError
            }
            Error::Io { .. } => MpgeluStatus::IoError,
            Error::Csv { .. } | Error::Json(_) => MpgeluStatus::ParseError,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MpgeluStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MpgeluStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus last-error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MpgeluStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpgeluStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            MpgeluStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(model: *const MpgeluModel) -> Result<&'a Model, Failure> {
    model
        .as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| null("model"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))
}

fn dataset(x: &[f64], y: &[f64], rows: usize, q: usize) -> Result<Dataset, Failure> {
    if rows.checked_mul(q) != Some(x.len()) {
        return Err(invalid(
            "feature buffer size does not match rows * input dimension",
        ));
    }
    Ok(Dataset::new("ffi", x.to_vec(), q, y.to_vec())?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn mpgelu_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mpgelu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model with seeded Glorot-uniform weights and zero biases.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_new(
    architecture: i32,
    input_dim: usize,
    hidden_width: usize,
    dropout_rate: f64,
    covariance_mode: i32,
    head: i32,
    seed: u64,
    out: *mut *mut MpgeluModel,
) -> MpgeluStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch = match architecture {
            MPGELU_ARCH_MP_GELU => Architecture::MpGelu,
            MPGELU_ARCH_RELU => Architecture::Relu,
            a => return Err(invalid(format!("unknown architecture {a}"))),
        };
        let mode = match covariance_mode {
            MPGELU_COV_FULL => CovarianceMode::Full,
            MPGELU_COV_DIAGONAL => CovarianceMode::Diagonal,
            m => return Err(invalid(format!("unknown covariance mode {m}"))),
        };
        let head = match head {
            MPGELU_HEAD_HETEROSCEDASTIC2 => HeadKind::Heteroscedastic2,
            MPGELU_HEAD_HOMOSCEDASTIC1 => HeadKind::Homoscedastic1,
            h => return Err(invalid(format!("unknown head {h}"))),
        };
        let config = build_model(arch, input_dim, hidden_width, dropout_rate, mode, head)?;
        let model = Model::initialized(config, seed)?;
        *out = Box::into_raw(Box::new(MpgeluModel { inner: model }));
        Ok(())
    })
}

/// Loads a JSON model document.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_load(
    path: *const c_char,
    out: *mut *mut MpgeluModel,
) -> MpgeluStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_model(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MpgeluModel { inner: model }));
        Ok(())
    })
}

/// Writes the model as a JSON document.
///
/// # Safety
/// `model` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_save(
    model: *const MpgeluModel,
    path: *const c_char,
) -> MpgeluStatus {
    guard(|| {
        save_model(model_ref(model)?, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_free(model: *mut MpgeluModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_input_dim(
    model: *const MpgeluModel,
    out: *mut usize,
) -> MpgeluStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.config.input_dim();
        Ok(())
    })
}

/// Number of head units: 2 for the heteroscedastic head, 1 otherwise.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_output_dim(
    model: *const MpgeluModel,
    out: *mut usize,
) -> MpgeluStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.config.head.output_dim();
        Ok(())
    })
}

/// Head moments for one input: `mean_out` gets `D` entries and `cov_out` the
/// `D × D` covariance (off-diagonals zero in diagonal mode), `D` the output dim.
///
/// # Safety
/// `x` must hold `x_len` doubles; the output buffers must hold `D` and `D*D` doubles.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_forward(
    model: *const MpgeluModel,
    x: *const f64,
    x_len: usize,
    mean_out: *mut f64,
    cov_out: *mut f64,
) -> MpgeluStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = slice(x, x_len, "x")?;
        let head = m.forward(x)?;
        let d = head.dim();
        let mean = slice_mut(mean_out, d, "mean_out")?;
        let cov = slice_mut(cov_out, d * d, "cov_out")?;
        mean.copy_from_slice(head.mean().as_slice());
        let c = head.cov().to_matrix();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = c[(i, j)];
            }
        }
        Ok(())
    })
}

/// Predictive mean and variance for `rows` inputs stored row-major in `x`.
///
/// # Safety
/// `x` must hold `rows * input_dim` doubles; each output buffer `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_predict(
    model: *const MpgeluModel,
    x: *const f64,
    rows: usize,
    mean_out: *mut f64,
    var_out: *mut f64,
) -> MpgeluStatus {
    guard(|| {
        let m = model_ref(model)?;
        let q = m.config.input_dim();
        let len = rows
            .checked_mul(q)
            .ok_or_else(|| invalid("rows * input_dim overflows"))?;
        let x = slice(x, len, "x")?;
        let mean = slice_mut(mean_out, rows, "mean_out")?;
        let var = slice_mut(var_out, rows, "var_out")?;
        for r in 0..rows {
            let pm = predictive_moments(&m.forward(&x[r * q..(r + 1) * q])?, m.config.head)?;
            mean[r] = pm.mean;
            var[r] = pm.variance;
        }
        Ok(())
    })
}

/// Continues training with seeded mini-batch SGD on the mean negative expected
/// log-likelihood. Writes the last epoch's mean loss to `final_loss` when non-null.
/// On failure the model is left unchanged.
///
/// # Safety
/// `model` must be a live handle; `x` must hold `rows * input_dim` doubles and `y` `rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn mpgelu_model_train(
    model: *mut MpgeluModel,
    x: *const f64,
    y: *const f64,
    rows: usize,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    final_loss: *mut f64,
) -> MpgeluStatus {
    guard(|| {
        let handle = model.as_mut().ok_or_else(|| null("model"))?;
        let q = handle.inner.config.input_dim();
        let len = rows
            .checked_mul(q)
            .ok_or_else(|| invalid("rows * input_dim overflows"))?;
        let data = dataset(slice(x, len, "x")?, slice(y, rows, "y")?, rows, q)?;
        let tc = TrainConfig {
            learning_rate,
            epochs,
            batch_size,
            seed,
        };
        let outcome = train_from(
            &handle.inner.config,
            handle.inner.params.clone(),
            &tc,
            &data,
        )?;
        if !outcome.params.is_finite() {
            return Err(Failure(
                MpgeluStatus::NumericalError,
                "training diverged".into(),
            ));
        }
        handle.inner.params = outcome.params;
        if let Some(out) = final_loss.as_mut() {
            *out = outcome.loss_trace.last().copied().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}
