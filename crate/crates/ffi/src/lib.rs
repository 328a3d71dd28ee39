//! C ABI for the ssmlab core: opaque handles, status codes, and a
//! thread-local last-error message. The header `include/ssmlab.h` is
//! generated by cbindgen at build time.
//!
//! Conventions: every function returns [`SsmlabStatus`]; out-parameters are
//! written only on `SSMLAB_STATUS_OK`; handles are freed exactly once with
//! their `_free` function; strings are NUL-terminated UTF-8.

use libc::c_char;
use ssmlab::error::Error;
use ssmlab::kernel::TimeMode;
use ssmlab::reparam::ReparamScheme;
use ssmlab::ssm::{forward, load_checkpoint, SSMParams};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes returned by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsmlabStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// Malformed spec string, bad configuration, or shape mismatch.
    InvalidArgument = 2,
    /// Input outside the mathematical domain of the operation.
    DomainError = 3,
    /// Non-finite values appeared during evaluation.
    NumericError = 4,
    /// File could not be read or parsed.
    IoError = 5,
    /// The implementation panicked; state is still consistent.
    InternalError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> SsmlabStatus {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Serde(_) => SsmlabStatus::InvalidArgument,
        Error::Domain(_) => SsmlabStatus::DomainError,
        Error::Numeric { .. } => SsmlabStatus::NumericError,
        Error::Io(_) => SsmlabStatus::IoError,
    }
}

fn run<T>(body: impl FnOnce() -> Result<T, Error>, sink: impl FnOnce(T)) -> SsmlabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(value)) => {
            sink(value);
            SsmlabStatus::Ok
        }
        Ok(Err(err)) => {
            set_error(&err.to_string());
            status_of(&err)
        }
        Err(_) => {
            set_error("internal panic");
            SsmlabStatus::InternalError
        }
    }
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Never NULL.
#[no_mangle]
pub extern "C" fn ssmlab_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Opaque reparameterization-scheme handle.
pub struct SsmlabScheme {
    inner: ReparamScheme,
}

/// Opaque state-space model handle.
pub struct SsmlabModel {
    inner: SSMParams,
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, Error> {
    if ptr.is_null() {
        return Err(Error::config("NULL string argument"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::config("string argument is not valid UTF-8"))
}

/// Parse a scheme spec string (`family[:a=<v>,b=<v>]@{cont|disc}`, e.g.
/// `best:a=1,b=0.5@disc`) into a new handle.
///
/// # Safety
/// `spec` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_parse(
    spec: *const c_char,
    out: *mut *mut SsmlabScheme,
) -> SsmlabStatus {
    if out.is_null() {
        set_error("NULL out-parameter");
        return SsmlabStatus::NullArgument;
    }
    run(
        || {
            let text = read_str(spec)?;
            ReparamScheme::parse(text)
        },
        |scheme| {
            *out = Box::into_raw(Box::new(SsmlabScheme { inner: scheme }));
        },
    )
}

/// Release a scheme handle. NULL is ignored.
///
/// # Safety
/// `scheme` must be a pointer from [`ssmlab_scheme_parse`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_free(scheme: *mut SsmlabScheme) {
    if !scheme.is_null() {
        drop(Box::from_raw(scheme));
    }
}

unsafe fn scheme_op(
    scheme: *const SsmlabScheme,
    out: *mut f64,
    op: impl FnOnce(&ReparamScheme) -> Result<f64, Error>,
) -> SsmlabStatus {
    if scheme.is_null() || out.is_null() {
        set_error("NULL argument");
        return SsmlabStatus::NullArgument;
    }
    let inner = &(*scheme).inner;
    run(|| op(inner), |value| *out = value)
}

/// The eigenvalue `lambda = f(w)`.
///
/// # Safety
/// `scheme` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_apply(
    scheme: *const SsmlabScheme,
    w: f64,
    out: *mut f64,
) -> SsmlabStatus {
    scheme_op(scheme, out, |s| s.apply(w))
}

/// The derivative `f'(w)` (left derivative at the ReLU kink).
///
/// # Safety
/// As [`ssmlab_scheme_apply`].
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_derivative(
    scheme: *const SsmlabScheme,
    w: f64,
    out: *mut f64,
) -> SsmlabStatus {
    scheme_op(scheme, out, |s| s.derivative(w))
}

/// Gradient-scale function `|f'(w)|/f(w)^2` (continuous) or
/// `|f'(w)|/(1-f(w))^2` (discrete).
///
/// # Safety
/// As [`ssmlab_scheme_apply`].
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_gradient_scale(
    scheme: *const SsmlabScheme,
    w: f64,
    out: *mut f64,
) -> SsmlabStatus {
    scheme_op(scheme, out, |s| s.gradient_scale(w))
}

/// Stability gap at weight `w` and radius `beta` (continuous schemes).
/// Divergent perturbations report `+inf` through `out`, not an error.
///
/// # Safety
/// As [`ssmlab_scheme_apply`].
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_stability_gap(
    scheme: *const SsmlabScheme,
    w: f64,
    beta: f64,
    out: *mut f64,
) -> SsmlabStatus {
    scheme_op(scheme, out, |s| s.stability_gap(w, beta))
}

/// Certified stability bound `g(beta)` where one exists (exponential,
/// softplus, continuous best).
///
/// # Safety
/// As [`ssmlab_scheme_apply`].
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_stability_bound(
    scheme: *const SsmlabScheme,
    w: f64,
    beta: f64,
    out: *mut f64,
) -> SsmlabStatus {
    scheme_op(scheme, out, |s| s.stability_bound_g(w, beta))
}

/// Closed-form inverse `w = f^{-1}(lambda)` (nonnegative root for the even
/// best family).
///
/// # Safety
/// As [`ssmlab_scheme_apply`].
#[no_mangle]
pub unsafe extern "C" fn ssmlab_scheme_invert(
    scheme: *const SsmlabScheme,
    lambda: f64,
    out: *mut f64,
) -> SsmlabStatus {
    scheme_op(scheme, out, |s| s.invert(lambda))
}

/// Load a model from a checkpoint JSON file written by the `ssmlab` CLI.
///
/// # Safety
/// `path` must point to a NUL-terminated path string and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_load(
    path: *const c_char,
    out: *mut *mut SsmlabModel,
) -> SsmlabStatus {
    if out.is_null() {
        set_error("NULL out-parameter");
        return SsmlabStatus::NullArgument;
    }
    run(
        || {
            let path = read_str(path)?;
            load_checkpoint(std::path::Path::new(path))
        },
        |params| {
            *out = Box::into_raw(Box::new(SsmlabModel { inner: params }));
        },
    )
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be a pointer from [`ssmlab_model_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_free(model: *mut SsmlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hidden width `m` and input dimension `d` of a loaded model.
///
/// # Safety
/// `model` must be a live handle; `m` and `d` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_dims(
    model: *const SsmlabModel,
    m: *mut usize,
    d: *mut usize,
) -> SsmlabStatus {
    if model.is_null() || m.is_null() || d.is_null() {
        set_error("NULL argument");
        return SsmlabStatus::NullArgument;
    }
    *m = (*model).inner.m();
    *d = (*model).inner.d;
    SsmlabStatus::Ok
}

/// Whether the model integrates continuous-time dynamics (1) or a discrete
/// recurrence (0).
///
/// # Safety
/// `model` must be a live handle; `continuous` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_is_continuous(
    model: *const SsmlabModel,
    continuous: *mut i32,
) -> SsmlabStatus {
    if model.is_null() || continuous.is_null() {
        set_error("NULL argument");
        return SsmlabStatus::NullArgument;
    }
    *continuous = match (*model).inner.time_mode() {
        TimeMode::Continuous => 1,
        TimeMode::Discrete => 0,
    };
    SsmlabStatus::Ok
}

/// Run the model over a sequence. `x` holds `k * d` row-major samples and
/// `y` receives `k` outputs.
///
/// # Safety
/// `model` must be a live handle; `x` must hold `x_len` readable doubles;
/// `y` must hold `y_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ssmlab_model_forward(
    model: *const SsmlabModel,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> SsmlabStatus {
    if model.is_null() || (x.is_null() && x_len > 0) || (y.is_null() && y_len > 0) {
        set_error("NULL argument");
        return SsmlabStatus::NullArgument;
    }
    let params = &(*model).inner;
    let input = std::slice::from_raw_parts(x, x_len);
    let output = std::slice::from_raw_parts_mut(y, y_len);
    run(
        || {
            let k = params.seq_len(input)?;
            if k != y_len {
                return Err(Error::contract(format!(
                    "output buffer holds {y_len} values but the input has {k} steps"
                )));
            }
            forward(params, input)
        },
        |fwd| output.copy_from_slice(&fwd.y),
    )
}

/// Crate version as a static string.
#[no_mangle]
pub extern "C" fn ssmlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
