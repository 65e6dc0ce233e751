//! C ABI over the `dkp` library.
//!
//! Every fallible function returns a [`DkpStatus`]; on failure the message is
//! available from [`dkp_last_error`] on the same thread until the next call.
//! Matrices are dense, row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dkp::autodiff::Tape;
use dkp::distributions::{invwishart_sample, InvWishartParams};
use dkp::inference::predict;
use dkp::model::Model;
use dkp::{DkpError, Matrix};

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DkpStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    Panic = 5,
}

/// Opaque trained model.
pub struct DkpModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

fn status_of(e: &DkpError) -> DkpStatus {
    match e {
        DkpError::Io { .. } | DkpError::Parse { .. } => DkpStatus::Io,
        DkpError::Config(_) | DkpError::Shape { .. } | DkpError::Domain { .. } | DkpError::UnsupportedDof { .. } => {
            DkpStatus::Config
        }
        _ => DkpStatus::Numeric,
    }
}

struct Invalid(&'static str);

enum Failure {
    Invalid(&'static str),
    Lib(DkpError),
}

impl From<DkpError> for Failure {
    fn from(e: DkpError) -> Self {
        Failure::Lib(e)
    }
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Invalid(e.0)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DkpStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DkpStatus::Ok,
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            DkpStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            DkpStatus::Panic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dkp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn dkp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a `checkpoint.json` written by `dkp train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dkp_model_load(path: *const c_char, out: *mut *mut DkpModel) -> DkpStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(Invalid("null argument").into());
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| Invalid("path is not UTF-8"))?;
        let model = dkp::cli::load_model(Path::new(path))?;
        *out = Box::into_raw(Box::new(DkpModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`dkp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dkp_model_free(model: *mut DkpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input and output dimensions of a model.
///
/// # Safety
/// `model` must be a live handle; either output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn dkp_model_dims(model: *const DkpModel, input_dim: *mut usize, output_dim: *mut usize) -> DkpStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Invalid("null model"))?;
        if !input_dim.is_null() {
            *input_dim = m.model.spec.input_dim;
        }
        if !output_dim.is_null() {
            *output_dim = m.model.spec.output_dim;
        }
        Ok(())
    })
}

/// Posterior predictive mean (and variance for Gaussian models) at `n` inputs.
///
/// `x` holds `n * input_dim` values; `mean` receives `n * output_dim` values
/// (class probabilities for categorical models). `variance` may be null.
///
/// # Safety
/// All non-null pointers must address arrays of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn dkp_model_predict(
    model: *const DkpModel,
    x: *const f64,
    n: usize,
    n_samples: usize,
    seed: u64,
    mean: *mut f64,
    variance: *mut f64,
) -> DkpStatus {
    guard(|| {
        let m = &model.as_ref().ok_or(Invalid("null model"))?.model;
        if x.is_null() || mean.is_null() || n == 0 || n_samples == 0 {
            return Err(Invalid("null pointer or zero size").into());
        }
        let (d, c) = (m.spec.input_dim, m.spec.output_dim);
        let xs = std::slice::from_raw_parts(x, n * d).to_vec();
        let xm = Matrix::from_vec(n, d, xs)?;
        let pred = predict(m, &xm, None, n_samples, seed)?;
        ptr::copy_nonoverlapping(pred.mean.as_slice().as_ptr(), mean, n * c);
        if !variance.is_null() {
            let v = pred
                .variance
                .ok_or(Invalid("variance is only defined for Gaussian models"))?;
            ptr::copy_nonoverlapping(v.as_slice().as_ptr(), variance, n * c);
        }
        Ok(())
    })
}

/// One draw from `W^{-1}(scale, dof)` with a `p x p` scale; mean `scale / (dof - p - 1)`.
///
/// # Safety
/// `scale` and `out` must address `p * p` values.
#[no_mangle]
pub unsafe extern "C" fn dkp_sample_invwishart(scale: *const f64, p: usize, dof: f64, seed: u64, out: *mut f64) -> DkpStatus {
    guard(|| {
        if scale.is_null() || out.is_null() || p == 0 {
            return Err(Invalid("null pointer or zero size").into());
        }
        let s = Matrix::from_vec(p, p, std::slice::from_raw_parts(scale, p * p).to_vec())?;
        let tape = Tape::new(seed);
        let g = invwishart_sample(&InvWishartParams {
            scale: tape.constant(s),
            dof: tape.scalar_constant(dof),
        })?;
        ptr::copy_nonoverlapping(g.value().as_slice().as_ptr(), out, p * p);
        Ok(())
    })
}
