//! C ABI over `taco_core`.
//!
//! Every fallible function returns a [`TacoStatus`]; on failure the message
//! is kept per thread and can be read with [`taco_last_error_message`].
//! Objects are opaque handles created by `*_new` and released by `*_free`.
//! Strings returned to the caller must be released with [`taco_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use taco_core::analysis::task_entropy;
use taco_core::dual_encoder::ParamVector;
use taco_core::experiment::{run_experiment, ExperimentConfig, RunReport};
use taco_core::taco::{
    accumulate_sensitivity, adaptive_combine, task_distribution, GradientMatrix,
    SensitivitySettings, SensitivityState, TemperatureSchedule,
};
use taco_core::task_suite::mixing_batch_sizes;
use taco_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TacoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    InvalidArgument = 3,
    DimensionMismatch = 4,
    NonFinite = 5,
    Diverged = 6,
    Io = 7,
    Panic = 8,
    Other = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> TacoStatus {
    match err {
        Error::InvalidConfig(_) => TacoStatus::InvalidConfig,
        Error::DimensionMismatch { .. } => TacoStatus::DimensionMismatch,
        Error::NonFinite(_) => TacoStatus::NonFinite,
        Error::Diverged(_) => TacoStatus::Diverged,
        Error::InvalidArgument(_) | Error::TaskOutOfRange { .. } | Error::Empty(_) => {
            TacoStatus::InvalidArgument
        }
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format { .. } => TacoStatus::Io,
    }
}

fn fail(status: TacoStatus, msg: impl Into<String>) -> TacoStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), TacoStatus>) -> TacoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TacoStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(TacoStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: taco_core::Result<T>) -> Result<T, TacoStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize) -> Result<&'a [T], TacoStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(TacoStatus::NullPointer, "null input buffer"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], TacoStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(TacoStatus::NullPointer, "null output buffer"));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *mut T) -> Result<&'a mut T, TacoStatus> {
    p.as_mut().ok_or_else(|| fail(TacoStatus::NullPointer, "null handle"))
}

unsafe fn str_in<'a>(p: *const c_char) -> Result<&'a str, TacoStatus> {
    if p.is_null() {
        return Err(fail(TacoStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TacoStatus::InvalidArgument, "string is not UTF-8"))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn taco_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn taco_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Temperature-scaled per-task batch sizes for `num_tasks` dataset sizes.
///
/// # Safety
/// `sizes` and `out` must point to `num_tasks` elements.
#[no_mangle]
pub unsafe extern "C" fn taco_mixing_batch_sizes(
    sizes: *const usize,
    num_tasks: usize,
    temperature: f64,
    total: usize,
    out: *mut usize,
) -> TacoStatus {
    guard(|| {
        let sizes = slice_in(sizes, num_tasks)?;
        let out = slice_out(out, num_tasks)?;
        out.copy_from_slice(&lift(mixing_batch_sizes(sizes, temperature, total))?);
        Ok(())
    })
}

/// Shannon entropy (nats) of a probability vector.
///
/// # Safety
/// `q` must point to `len` elements and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn taco_task_entropy(q: *const f64, len: usize, out: *mut f64) -> TacoStatus {
    guard(|| {
        let q = slice_in(q, len)?;
        let out = handle(out)?;
        *out = lift(task_entropy(q))?;
        Ok(())
    })
}

/// Softmax of `sigma / tau` across `num_tasks` tasks.
///
/// # Safety
/// `sigma` and `out` must point to `num_tasks` elements.
#[no_mangle]
pub unsafe extern "C" fn taco_task_distribution(
    sigma: *const f64,
    num_tasks: usize,
    tau: f64,
    out: *mut f64,
) -> TacoStatus {
    guard(|| {
        let sigma = slice_in(sigma, num_tasks)?;
        let out = slice_out(out, num_tasks)?;
        if num_tasks == 0 || tau == 0.0 || !tau.is_finite() {
            return Err(fail(
                TacoStatus::InvalidArgument,
                "need num_tasks >= 1 and a finite nonzero tau",
            ));
        }
        out.copy_from_slice(&task_distribution(sigma, tau));
        Ok(())
    })
}

/// Opaque experiment configuration.
pub struct TacoConfig(ExperimentConfig);

/// Opaque finished-run report.
pub struct TacoReport(RunReport);

/// Opaque amortized sensitivity state.
pub struct TacoSensitivity(SensitivityState);

/// A configuration holding the library defaults.
#[no_mangle]
pub extern "C" fn taco_config_new() -> *mut TacoConfig {
    Box::into_raw(Box::new(TacoConfig(ExperimentConfig::default())))
}

/// # Safety
/// `cfg` must come from [`taco_config_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn taco_config_free(cfg: *mut TacoConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets one configuration key, with the same names and value syntax as the
/// `taco` binary's `--set`.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn taco_config_set(
    cfg: *mut TacoConfig,
    key: *const c_char,
    value: *const c_char,
) -> TacoStatus {
    guard(|| {
        let cfg = handle(cfg)?;
        let (key, value) = (str_in(key)?, str_in(value)?);
        lift(cfg.0.set(key, value))
    })
}

/// Trains and evaluates per `cfg`; on success `*out` receives a report handle.
///
/// # Safety
/// `cfg` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn taco_run_experiment(
    cfg: *const TacoConfig,
    out: *mut *mut TacoReport,
) -> TacoStatus {
    guard(|| {
        let cfg = cfg
            .as_ref()
            .ok_or_else(|| fail(TacoStatus::NullPointer, "null config"))?;
        let out = handle(out)?;
        let report = lift(run_experiment(&cfg.0))?;
        *out = Box::into_raw(Box::new(TacoReport(report)));
        Ok(())
    })
}

/// # Safety
/// `report` must come from [`taco_run_experiment`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn taco_report_free(report: *mut TacoReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Average validation R-precision after the final episode; NaN on NULL.
///
/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn taco_report_avg_r_precision(report: *const TacoReport) -> f64 {
    report.as_ref().map_or(f64::NAN, |r| r.0.final_avg_r_precision)
}

/// Fraction of task-specific parameters; NaN if the run has no sensitivity
/// state (task-specific models) or on NULL.
///
/// # Safety
/// `report` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn taco_report_fraction_task_specific(report: *const TacoReport) -> f64 {
    report
        .as_ref()
        .and_then(|r| r.0.specialization.as_ref())
        .map_or(f64::NAN, |s| s.fraction_task_specific)
}

/// The full report as JSON; release with [`taco_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn taco_report_to_json(
    report: *const TacoReport,
    out: *mut *mut c_char,
) -> TacoStatus {
    guard(|| {
        let report = report
            .as_ref()
            .ok_or_else(|| fail(TacoStatus::NullPointer, "null report"))?;
        let out = handle(out)?;
        let json = serde_json::to_string(&report.0)
            .map_err(|e| fail(TacoStatus::Other, e.to_string()))?;
        *out = CString::new(json)
            .map_err(|e| fail(TacoStatus::Other, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// Fresh sensitivity state for `dim` parameters and `num_tasks` tasks with a
/// fixed temperature. Returns NULL on invalid settings (see
/// [`taco_last_error_message`]).
#[no_mangle]
pub extern "C" fn taco_sensitivity_new(
    dim: usize,
    num_tasks: usize,
    beta: f64,
    tau: f64,
    burn_in_fraction: f64,
    total_steps: u64,
) -> *mut TacoSensitivity {
    let mut out = ptr::null_mut();
    guard(|| {
        let settings = SensitivitySettings {
            beta,
            schedule: TemperatureSchedule::Fixed { tau },
            burn_in_fraction,
            ..Default::default()
        };
        let state = lift(SensitivityState::new(dim, num_tasks, settings, total_steps))?;
        out = Box::into_raw(Box::new(TacoSensitivity(state)));
        Ok(())
    });
    out
}

/// # Safety
/// `state` must come from [`taco_sensitivity_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn taco_sensitivity_free(state: *mut TacoSensitivity) {
    if !state.is_null() {
        drop(Box::from_raw(state));
    }
}

unsafe fn gradient_matrix(
    state: &TacoSensitivity,
    grads: *const f64,
) -> Result<GradientMatrix, TacoStatus> {
    let (d, k) = (state.0.dim(), state.0.num_tasks());
    let flat = slice_in(grads, d * k)?;
    lift(GradientMatrix::from_columns(
        flat.chunks(d).map(|c| c.to_vec()).collect(),
    ))
}

/// One adaptive step: folds `grads` into the state, writes the
/// sensitivity-weighted combination into the `dim` elements of `out`, then
/// advances the step counter. `grads` holds `num_tasks` task gradients of
/// length `dim`, one after another; `params` the current `dim` parameters.
///
/// # Safety
/// `state` must be a live handle; buffers must have the lengths above.
#[no_mangle]
pub unsafe extern "C" fn taco_sensitivity_step(
    state: *mut TacoSensitivity,
    grads: *const f64,
    params: *const f64,
    out: *mut f64,
) -> TacoStatus {
    guard(|| {
        let state = handle(state)?;
        let g = gradient_matrix(state, grads)?;
        let params = ParamVector(slice_in(params, state.0.dim())?.to_vec());
        let out = slice_out(out, state.0.dim())?;
        lift(accumulate_sensitivity(&mut state.0, &g, &params))?;
        out.copy_from_slice(&lift(adaptive_combine(&g, &state.0))?);
        state.0.step += 1;
        Ok(())
    })
}

/// Number of steps folded in so far; 0 on NULL.
///
/// # Safety
/// `state` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn taco_sensitivity_steps(state: *const TacoSensitivity) -> u64 {
    state.as_ref().map_or(0, |s| s.0.step)
}

/// Writes the combination of `grads` (layout as in
/// [`taco_sensitivity_step`]) under the current state, without updating it.
///
/// # Safety
/// `state` must be a live handle; buffers must have the lengths above.
#[no_mangle]
pub unsafe extern "C" fn taco_sensitivity_combine(
    state: *const TacoSensitivity,
    grads: *const f64,
    out: *mut f64,
) -> TacoStatus {
    guard(|| {
        let state = state
            .as_ref()
            .ok_or_else(|| fail(TacoStatus::NullPointer, "null handle"))?;
        let g = gradient_matrix(state, grads)?;
        let out = slice_out(out, state.0.dim())?;
        out.copy_from_slice(&lift(adaptive_combine(&g, &state.0))?);
        Ok(())
    })
}
