//! C ABI over the sampling side of `condiff`: open trained checkpoints,
//! combine control branches, set conditions, and draw samples or single
//! noise predictions into caller-owned buffers.
//!
//! Conventions: handles are opaque pointers owned by this library and
//! released with [`condiff_free`]; every fallible call returns a
//! [`CondiffStatus`]; on failure a message is stored per thread and readable
//! via [`condiff_last_error`] until the next failure on the same thread.
//! The generated header lives at `include/condiff.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use condiff::combine::CombineConfig;
use condiff::diffusion::sample_batch;
use condiff::evalsuite::noise_predictor;
use condiff::scorenet::{InjectionMode, ParamSet};
use condiff::synthdata::Condition;
use condiff::trainer::{self, TrainState};
use condiff::Error;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondiffStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A path or string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    Io = 3,
    /// A file exists but its bytes do not parse as the expected format.
    Format = 4,
    /// A buffer or tensor size does not match the model.
    Shape = 5,
    /// An argument value is outside the function's contract.
    InvalidArgument = 6,
    /// A non-finite value was produced mid-computation.
    Numeric = 7,
    /// A required artifact (checkpoint, dataset) is absent.
    MissingArtifact = 8,
    Config = 9,
}

/// How combined control features enter the decoder.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondiffMode {
    /// Control stacks merged pairwise, then injected with a data-dependent
    /// gain.
    MinimalImpact = 0,
    /// Plain per-level sum.
    VanillaAdd = 1,
}

/// An opaque sampler: one frozen base plus zero or more control branches,
/// each with its current condition.
pub struct CondiffModel {
    states: Vec<TrainState>,
    conditions: Vec<Condition>,
    mode: InjectionMode,
    combine: CombineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn fail(err: Error) -> CondiffStatus {
    set_error(&err.to_string());
    match err {
        Error::Shape { .. } => CondiffStatus::Shape,
        Error::Invalid(_) => CondiffStatus::InvalidArgument,
        Error::Numeric { .. } => CondiffStatus::Numeric,
        Error::Io { .. } => CondiffStatus::Io,
        Error::Format { .. } => CondiffStatus::Format,
        Error::Missing(_) => CondiffStatus::MissingArtifact,
        Error::Config(_) => CondiffStatus::Config,
    }
}

fn invalid(msg: impl Into<String>) -> CondiffStatus {
    fail(Error::Invalid(msg.into()))
}

/// # Safety
/// `path` must be a valid NUL-terminated C string.
unsafe fn path_str<'a>(path: *const c_char) -> Result<&'a str, CondiffStatus> {
    if path.is_null() {
        set_error("path is null");
        return Err(CondiffStatus::NullArgument);
    }
    CStr::from_ptr(path).to_str().map_err(|_| {
        set_error("path is not valid UTF-8");
        CondiffStatus::InvalidUtf8
    })
}

impl CondiffModel {
    fn frame(&self) -> &TrainState {
        &self.states[0]
    }

    fn dim(&self) -> usize {
        self.frame().model.data_dim
    }

    fn branches(&self) -> Vec<(&ParamSet, Condition)> {
        self.states
            .iter()
            .zip(&self.conditions)
            .filter_map(|(s, c)| s.branch.as_ref().map(|b| (b, c.clone())))
            .collect()
    }
}

/// Message of the last failing call on this thread; valid until the next
/// failure on the same thread. Never null.
#[no_mangle]
pub extern "C" fn condiff_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn condiff_version() -> *const c_char {
    c"0.1.0".as_ptr()
}

/// Opens a checkpoint as a sampler. A branch checkpoint starts with a fully
/// silent condition; a base checkpoint samples unconditionally. Returns null
/// on failure (see [`condiff_last_error`]).
///
/// # Safety
/// `path` must be a valid NUL-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn condiff_open(path: *const c_char) -> *mut CondiffModel {
    let path = match path_str(path) {
        Ok(p) => p,
        Err(_) => return ptr::null_mut(),
    };
    let state = match trainer::load_checkpoint(path.as_ref()) {
        Ok(s) => s,
        Err(e) => {
            fail(e);
            return ptr::null_mut();
        }
    };
    let conditions = if state.branch.is_some() {
        vec![Condition::silent(state.model.data_dim)]
    } else {
        Vec::new()
    };
    let model = CondiffModel {
        mode: state.train.mode,
        combine: state.train.combine,
        states: vec![state],
        conditions,
    };
    Box::into_raw(Box::new(model))
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer returned by [`condiff_open`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn condiff_free(model: *mut CondiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Data dimension of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn condiff_dim(model: *const CondiffModel) -> usize {
    model.as_ref().map_or(0, |m| m.dim())
}

/// Number of diffusion steps, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn condiff_horizon(model: *const CondiffModel) -> usize {
    model.as_ref().map_or(0, |m| m.frame().horizon)
}

/// Number of control branches, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn condiff_branch_count(model: *const CondiffModel) -> usize {
    model.as_ref().map_or(0, |m| m.branches().len())
}

/// Adds another branch checkpoint sharing the same frozen base; it starts
/// with a fully silent condition.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated C string.
#[no_mangle]
pub unsafe extern "C" fn condiff_add_branch(
    model: *mut CondiffModel,
    path: *const c_char,
) -> CondiffStatus {
    let Some(model) = model.as_mut() else {
        set_error("model handle is null");
        return CondiffStatus::NullArgument;
    };
    let path = match path_str(path) {
        Ok(p) => p,
        Err(code) => return code,
    };
    if model.frame().branch.is_none() {
        return invalid("open a branch checkpoint before adding more branches");
    }
    let state = match trainer::load_checkpoint(path.as_ref()) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    if state.branch.is_none() {
        return invalid("added checkpoints must carry a control branch");
    }
    let first = model.frame();
    if state.model != first.model
        || state.family != first.family
        || state.horizon != first.horizon
        || state.base != first.base
    {
        return invalid("checkpoints do not share the same frozen base");
    }
    let d = state.model.data_dim;
    model.states.push(state);
    model.conditions.push(Condition::silent(d));
    CondiffStatus::Ok
}

/// Sets branch `index`'s condition from two length-`len` arrays: a 0/1
/// reveal mask and the revealed values (zero outside the mask).
///
/// # Safety
/// `model` must be a live handle; `mask` and `values` must point to `len`
/// readable doubles.
#[no_mangle]
pub unsafe extern "C" fn condiff_set_condition(
    model: *mut CondiffModel,
    index: usize,
    mask: *const f64,
    values: *const f64,
    len: usize,
) -> CondiffStatus {
    let Some(model) = model.as_mut() else {
        set_error("model handle is null");
        return CondiffStatus::NullArgument;
    };
    if mask.is_null() || values.is_null() {
        set_error("mask and values must not be null");
        return CondiffStatus::NullArgument;
    }
    if index >= model.conditions.len() {
        return invalid(format!(
            "branch index {index} out of range ({} branches)",
            model.conditions.len()
        ));
    }
    if len != model.dim() {
        return fail(Error::Shape {
            op: "condiff_set_condition",
            msg: format!("condition length {len} does not match dimension {}", model.dim()),
        });
    }
    let mask = std::slice::from_raw_parts(mask, len);
    let values = std::slice::from_raw_parts(values, len);
    for (m, v) in mask.iter().zip(values) {
        if *m != 0.0 && *m != 1.0 {
            return invalid("mask entries must be 0 or 1");
        }
        if !v.is_finite() || (*m == 0.0 && *v != 0.0) {
            return invalid("values must be finite and zero outside the mask");
        }
    }
    model.conditions[index] = Condition { mask: mask.to_vec(), values: values.to_vec() };
    CondiffStatus::Ok
}

/// Switches how combined control features enter the decoder.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn condiff_set_mode(
    model: *mut CondiffModel,
    mode: CondiffMode,
) -> CondiffStatus {
    let Some(model) = model.as_mut() else {
        set_error("model handle is null");
        return CondiffStatus::NullArgument;
    };
    model.mode = match mode {
        CondiffMode::MinimalImpact => InjectionMode::MinimalImpact,
        CondiffMode::VanillaAdd => InjectionMode::VanillaAdd,
    };
    CondiffStatus::Ok
}

/// Draws `n` samples into `out`, row-major `n × dim`. `out_len` must equal
/// `n * dim`. Identical seeds give identical samples.
///
/// # Safety
/// `model` must be a live handle; `out` must point to `out_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn condiff_sample(
    model: *const CondiffModel,
    n: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> CondiffStatus {
    let Some(model) = model.as_ref() else {
        set_error("model handle is null");
        return CondiffStatus::NullArgument;
    };
    if out.is_null() {
        set_error("out buffer is null");
        return CondiffStatus::NullArgument;
    }
    let d = model.dim();
    if out_len != n * d {
        return fail(Error::Shape {
            op: "condiff_sample",
            msg: format!("out_len {out_len} does not hold {n} samples of dimension {d}"),
        });
    }
    let frame = model.frame();
    let schedule = match frame.schedule() {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    let predict =
        noise_predictor(&frame.model, &frame.base, model.branches(), model.mode, model.combine);
    let rows = match sample_batch(&schedule, &predict, d, n, seed) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let out = std::slice::from_raw_parts_mut(out, out_len);
    for (row, chunk) in rows.iter().zip(out.chunks_exact_mut(d)) {
        chunk.copy_from_slice(row);
    }
    CondiffStatus::Ok
}

/// One denoiser evaluation: predicts the noise in state `x` at timestep `t`.
/// `x_len` and `out_len` must equal the model dimension.
///
/// # Safety
/// `model` must be a live handle; `x` must point to `x_len` readable and
/// `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn condiff_predict(
    model: *const CondiffModel,
    x: *const f64,
    x_len: usize,
    t: usize,
    out: *mut f64,
    out_len: usize,
) -> CondiffStatus {
    let Some(model) = model.as_ref() else {
        set_error("model handle is null");
        return CondiffStatus::NullArgument;
    };
    if x.is_null() || out.is_null() {
        set_error("x and out must not be null");
        return CondiffStatus::NullArgument;
    }
    let d = model.dim();
    if x_len != d || out_len != d {
        return fail(Error::Shape {
            op: "condiff_predict",
            msg: format!("x_len {x_len} and out_len {out_len} must equal dimension {d}"),
        });
    }
    let frame = model.frame();
    if t > frame.horizon {
        return invalid(format!("timestep {t} exceeds horizon {}", frame.horizon));
    }
    let predict =
        noise_predictor(&frame.model, &frame.base, model.branches(), model.mode, model.combine);
    let x = std::slice::from_raw_parts(x, x_len);
    match predict(x, t) {
        Ok(eps) => {
            std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&eps);
            CondiffStatus::Ok
        }
        Err(e) => fail(e),
    }
}
