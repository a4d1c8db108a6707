//! C ABI over `cfl-core`.
//!
//! Models are opaque `CflModel*` handles created by `cfl_model_new` or
//! `cfl_model_load` and released with `cfl_model_free`. Every fallible call
//! returns a `CflStatus`; on failure `cfl_last_error()` describes it until
//! the next call on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cfl_core::diagnostics::{lipschitz_report, spectral_rescale};
use cfl_core::harness::checkpoint;
use cfl_core::{refine, refine_early_exit, CflError, Input, Mode, ModelSpec, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Config = 5,
    Format = 6,
    Io = 7,
    BufferTooSmall = 8,
    NotLipschitz = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CflMode {
    Composed = 0,
    Literal = 1,
}

impl From<CflMode> for Mode {
    fn from(m: CflMode) -> Self {
        match m {
            CflMode::Composed => Mode::Composed,
            CflMode::Literal => Mode::Literal,
        }
    }
}

/// Opaque model handle.
pub struct CflModel(cfl_core::CflModel);

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CflDims {
    /// Input width, or vocabulary size for a transformer.
    pub d_in: usize,
    pub d_h: usize,
    pub d_y: usize,
    pub layers: usize,
    /// 1 when the model consumes token ids.
    pub tokens: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &CflError) -> CflStatus {
    match e {
        CflError::Shape(_) | CflError::Length(_) | CflError::LayerIndex { .. } => CflStatus::Shape,
        CflError::NonFinite(_) | CflError::Diverged { .. } => CflStatus::NonFinite,
        CflError::Config(_) | CflError::NonScalarLoss(_) | CflError::GraphConsumed => CflStatus::Config,
        CflError::NotGloballyLipschitz(_) => CflStatus::NotLipschitz,
        CflError::Format(_) => CflStatus::Format,
        CflError::Io(_) => CflStatus::Io,
        CflError::Context { source, .. } => status_of(source),
    }
}

struct Fail(CflStatus, String);

impl From<CflError> for Fail {
    fn from(e: CflError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail<T>(status: CflStatus, msg: &str) -> Result<T, Fail> {
    Err(Fail(status, msg.to_string()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CflStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            CflStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(CflStatus::NullPointer, &format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CflStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const CflModel) -> Result<&'a cfl_core::CflModel, Fail> {
    if m.is_null() {
        return fail(CflStatus::NullPointer, "model is null");
    }
    Ok(&(*m).0)
}

unsafe fn write_out(out: *mut *mut CflModel, m: cfl_core::CflModel) -> Result<(), Fail> {
    if out.is_null() {
        return fail(CflStatus::NullPointer, "out is null");
    }
    *out = Box::into_raw(Box::new(CflModel(m)));
    Ok(())
}

unsafe fn copy_output(y: &Tensor<f64>, out: *mut f64, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return fail(CflStatus::NullPointer, "output buffer is null");
    }
    if out_len < y.len() {
        return fail(
            CflStatus::BufferTooSmall,
            &format!("output needs {} values, buffer holds {out_len}", y.len()),
        );
    }
    ptr::copy_nonoverlapping(y.data().as_ptr(), out, y.len());
    Ok(())
}

/// Last error message on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn cfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cfl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized model from a JSON model spec.
///
/// # Safety
/// `spec_json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_model_new(spec_json: *const c_char, out: *mut *mut CflModel) -> CflStatus {
    guard(|| {
        let text = str_arg(spec_json, "spec_json")?;
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| Fail(CflStatus::Config, e.to_string()))?;
        write_out(out, cfl_core::CflModel::new(spec)?)
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_model_load(path: *const c_char, out: *mut *mut CflModel) -> CflStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        write_out(out, checkpoint::load(Path::new(p))?)
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cfl_model_save(model: *const CflModel, path: *const c_char) -> CflStatus {
    guard(|| {
        let m = model_arg(model)?;
        let p = str_arg(path, "path")?;
        Ok(checkpoint::save(m, Path::new(p))?)
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cfl_model_free(model: *mut CflModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_model_dims(model: *const CflModel, out: *mut CflDims) -> CflStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return fail(CflStatus::NullPointer, "out is null");
        }
        let d = m.backbone.dims();
        *out = CflDims {
            d_in: d.d_in,
            d_h: d.d_h,
            d_y: d.d_y,
            layers: d.layers,
            tokens: matches!(m.backbone, cfl_core::backbone::Backbone::Transformer(_)) as i32,
        };
        Ok(())
    })
}

unsafe fn dense(m: &cfl_core::CflModel, x: *const f64, rows: usize, cols: usize) -> Result<Tensor<f64>, Fail> {
    if x.is_null() {
        return fail(CflStatus::NullPointer, "x is null");
    }
    if matches!(m.backbone, cfl_core::backbone::Backbone::Transformer(_)) {
        return fail(CflStatus::InvalidArgument, "model takes tokens; use cfl_refine_tokens");
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(CflStatus::InvalidArgument, "rows * cols overflows".into()))?;
    Ok(Tensor::matrix(rows, cols, std::slice::from_raw_parts(x, n).to_vec())?)
}

/// Runs `t` refinement iterations on a row-major `rows × cols` input and
/// writes the final `rows × d_y` output.
///
/// # Safety
/// `x` must hold `rows * cols` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn cfl_refine(
    model: *const CflModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    t: usize,
    mode: CflMode,
    out: *mut f64,
    out_len: usize,
) -> CflStatus {
    guard(|| {
        let m = model_arg(model)?;
        let x = dense(m, x, rows, cols)?;
        let trace = refine(m, Input::Dense(&x), t, mode.into())?;
        copy_output(trace.final_output(), out, out_len)
    })
}

/// Refinement of one token sequence; writes the pooled `d_y` logits.
///
/// # Safety
/// `tokens` must hold `len` ids and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn cfl_refine_tokens(
    model: *const CflModel,
    tokens: *const usize,
    len: usize,
    t: usize,
    mode: CflMode,
    out: *mut f64,
    out_len: usize,
) -> CflStatus {
    guard(|| {
        let m = model_arg(model)?;
        if tokens.is_null() {
            return fail(CflStatus::NullPointer, "tokens is null");
        }
        let toks = std::slice::from_raw_parts(tokens, len);
        let trace = refine(m, Input::Tokens(toks), t, mode.into())?;
        copy_output(trace.final_output(), out, out_len)
    })
}

/// Refines until the output delta drops below `eps` or `t_max` iterations
/// ran; `iterations` receives the count used.
///
/// # Safety
/// As [`cfl_refine`]; `iterations` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_refine_early_exit(
    model: *const CflModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    t_max: usize,
    eps: f64,
    mode: CflMode,
    out: *mut f64,
    out_len: usize,
    iterations: *mut usize,
) -> CflStatus {
    guard(|| {
        let m = model_arg(model)?;
        if iterations.is_null() {
            return fail(CflStatus::NullPointer, "iterations is null");
        }
        let x = dense(m, x, rows, cols)?;
        let trace = refine_early_exit(m, Input::Dense(&x), t_max, eps, mode.into())?;
        copy_output(trace.final_output(), out, out_len)?;
        *iterations = trace.iterations();
        Ok(())
    })
}

/// Upper bound on the Lipschitz constant of one refinement step
/// (infinity for FiLM adapters).
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_lipschitz_bound(model: *const CflModel, out: *mut f64) -> CflStatus {
    guard(|| {
        let m = model_arg(model)?;
        if out.is_null() {
            return fail(CflStatus::NullPointer, "out is null");
        }
        *out = lipschitz_report(m)?.l_total;
        Ok(())
    })
}

/// Returns a new handle whose loop weights are scaled so the bound is at
/// most `c`.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cfl_spectral_rescale(model: *const CflModel, c: f64, out: *mut *mut CflModel) -> CflStatus {
    guard(|| {
        let m = model_arg(model)?;
        write_out(out, spectral_rescale(m, c)?.model)
    })
}
