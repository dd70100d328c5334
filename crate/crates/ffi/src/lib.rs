//! C ABI for chaoscope.
//!
//! Systems and policies are opaque handles created by `*_new` / `*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`ChaoscopeStatus`]; on failure a message for the calling
//! thread is available from [`chaoscope_last_error`] until the next call
//! on that thread. Panics never cross the boundary.
//!
//! Handles are immutable after creation and may be shared between
//! threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chaoscope::config::KeyValues;
use chaoscope::dynsys::{system_from_config, System};
use chaoscope::eval::iqm;
use chaoscope::lyapunov::{reward_mle, spectrum_over_samples, SpectrumConfig, StabilityClass};
use chaoscope::policy::{load_weights, PolicyParams};
use chaoscope::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChaoscopeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad configuration, file or argument.
    Config = 3,
    /// The computation itself failed (blow-up, degenerate perturbations).
    Numerical = 4,
    /// An output buffer is too small; the needed length is reported.
    BufferTooSmall = 5,
    /// A Rust panic was caught.
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChaoscopeClass {
    Stable = 0,
    Chaotic = 1,
    Unstable = 2,
}

impl From<StabilityClass> for ChaoscopeClass {
    fn from(c: StabilityClass) -> Self {
        match c {
            StabilityClass::Stable => ChaoscopeClass::Stable,
            StabilityClass::Chaotic => ChaoscopeClass::Chaotic,
            StabilityClass::Unstable => ChaoscopeClass::Unstable,
        }
    }
}

/// Spectrum estimator settings.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaoscopeSpectrumConfig {
    pub steps: usize,
    pub period: usize,
    pub samples: usize,
    pub epsilon: f64,
    pub tau0: f64,
}

impl From<ChaoscopeSpectrumConfig> for SpectrumConfig {
    fn from(c: ChaoscopeSpectrumConfig) -> Self {
        SpectrumConfig {
            steps: c.steps,
            period: c.period,
            samples: c.samples,
            epsilon: c.epsilon,
            tau0: c.tau0,
        }
    }
}

/// Aggregated spectrum. `mle_ci_low` / `mle_ci_high` are NaN when fewer
/// than two samples survived.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChaoscopeSpectrumResult {
    pub mle: f64,
    pub sle: f64,
    pub mle_ci_low: f64,
    pub mle_ci_high: f64,
    pub class_: ChaoscopeClass,
    /// Number of exponents written (the state dimension).
    pub n_exponents: usize,
    pub n_excluded: usize,
}

/// Opaque closed-loop system.
pub struct ChaoscopeSystem(System);

/// Opaque policy.
pub struct ChaoscopePolicy(PolicyParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: ChaoscopeStatus, msg: impl Into<String>) -> ChaoscopeStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> ChaoscopeStatus {
    let status = if e.is_config() {
        ChaoscopeStatus::Config
    } else {
        ChaoscopeStatus::Numerical
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> ChaoscopeStatus) -> ChaoscopeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(ChaoscopeStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, ChaoscopeStatus> {
    if p.is_null() {
        return Err(fail(ChaoscopeStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ChaoscopeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], ChaoscopeStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(ChaoscopeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

macro_rules! try_ffi {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! handle {
    ($p:expr, $what:expr) => {
        match $p.as_ref() {
            Some(h) => &h.0,
            None => return fail(ChaoscopeStatus::NullPointer, concat!($what, " is null")),
        }
    };
}

fn boxed<T>(out: *mut *mut T, value: T) -> ChaoscopeStatus {
    // SAFETY: callers check `out` for null before computing `value`.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    ChaoscopeStatus::Ok
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next chaoscope call on the same thread.
#[no_mangle]
pub extern "C" fn chaoscope_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn chaoscope_status_string(status: ChaoscopeStatus) -> *const c_char {
    let s: &'static CStr = match status {
        ChaoscopeStatus::Ok => c"ok",
        ChaoscopeStatus::NullPointer => c"null pointer",
        ChaoscopeStatus::InvalidUtf8 => c"invalid UTF-8",
        ChaoscopeStatus::Config => c"configuration error",
        ChaoscopeStatus::Numerical => c"numerical failure",
        ChaoscopeStatus::BufferTooSmall => c"buffer too small",
        ChaoscopeStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Default estimator settings.
#[no_mangle]
pub extern "C" fn chaoscope_spectrum_config_default() -> ChaoscopeSpectrumConfig {
    let d = SpectrumConfig::default();
    ChaoscopeSpectrumConfig {
        steps: d.steps,
        period: d.period,
        samples: d.samples,
        epsilon: d.epsilon,
        tau0: d.tau0,
    }
}

/// Create a system with default constants from its id (`"henon"`,
/// `"lorenz"`, ...).
///
/// # Safety
/// `id` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_system_new(id: *const c_char, out: *mut *mut ChaoscopeSystem) -> ChaoscopeStatus {
    guard(|| {
        if out.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "out is null");
        }
        let id = try_ffi!(str_arg(id, "id"));
        let mut kv = KeyValues::empty();
        kv.set("system", id.into());
        match system_from_config(&kv) {
            Ok(sys) => boxed(out, ChaoscopeSystem(sys)),
            Err(e) => from_error(e),
        }
    })
}

/// Create a system from a key-value config file. Keys other than the
/// system's own are ignored here.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_system_from_config(
    path: *const c_char,
    out: *mut *mut ChaoscopeSystem,
) -> ChaoscopeStatus {
    guard(|| {
        if out.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "out is null");
        }
        let path = try_ffi!(str_arg(path, "path"));
        match KeyValues::load(Path::new(path)).and_then(|kv| system_from_config(&kv)) {
            Ok(sys) => boxed(out, ChaoscopeSystem(sys)),
            Err(e) => from_error(e),
        }
    })
}

/// Release a system; null is ignored.
///
/// # Safety
/// `sys` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_system_free(sys: *mut ChaoscopeSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `sys` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_system_state_dim(sys: *const ChaoscopeSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.0.state_dim())
}

/// Action dimension, or 0 for a null handle.
///
/// # Safety
/// `sys` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_system_action_dim(sys: *const ChaoscopeSystem) -> usize {
    sys.as_ref().map_or(0, |s| s.0.action_dim())
}

/// One transition `s' = f(s, a)`; actions outside the bounds are clamped.
///
/// # Safety
/// `state` / `next` must hold `state_len` doubles and `action`
/// `action_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_system_step(
    sys: *const ChaoscopeSystem,
    state: *const f64,
    state_len: usize,
    action: *const f64,
    action_len: usize,
    next: *mut f64,
) -> ChaoscopeStatus {
    guard(|| {
        let sys = handle!(sys, "sys");
        let s = try_ffi!(slice_arg(state, state_len, "state"));
        let a = try_ffi!(slice_arg(action, action_len, "action"));
        if next.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "next is null");
        }
        match sys.step(s, a) {
            Ok(n) => {
                std::slice::from_raw_parts_mut(next, n.len()).copy_from_slice(&n);
                ChaoscopeStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// The zero-action policy for a system.
///
/// # Safety
/// `sys` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_policy_none(
    sys: *const ChaoscopeSystem,
    out: *mut *mut ChaoscopePolicy,
) -> ChaoscopeStatus {
    guard(|| {
        let sys = handle!(sys, "sys");
        if out.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "out is null");
        }
        boxed(out, ChaoscopePolicy(PolicyParams::no_action(sys)))
    })
}

/// A policy that always outputs `action`.
///
/// # Safety
/// `action` must hold `action_len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_policy_constant(
    sys: *const ChaoscopeSystem,
    action: *const f64,
    action_len: usize,
    out: *mut *mut ChaoscopePolicy,
) -> ChaoscopeStatus {
    guard(|| {
        let sys = handle!(sys, "sys");
        let a = try_ffi!(slice_arg(action, action_len, "action"));
        if out.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "out is null");
        }
        match PolicyParams::constant(sys, a) {
            Ok(p) => boxed(out, ChaoscopePolicy(p)),
            Err(e) => from_error(e),
        }
    })
}

/// Load a policy weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_policy_load(path: *const c_char, out: *mut *mut ChaoscopePolicy) -> ChaoscopeStatus {
    guard(|| {
        if out.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "out is null");
        }
        let path = try_ffi!(str_arg(path, "path"));
        match load_weights(Path::new(path)) {
            Ok(p) => boxed(out, ChaoscopePolicy(p)),
            Err(e) => from_error(e),
        }
    })
}

/// Release a policy; null is ignored.
///
/// # Safety
/// `policy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_policy_free(policy: *mut ChaoscopePolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Lyapunov spectrum over `cfg.samples` seeded initial states. Writes
/// the IQM exponents to `exponents` (capacity `capacity`, at least the
/// state dimension) and the summary to `result`.
///
/// # Safety
/// Handles must be live; `exponents` must hold `capacity` doubles;
/// `cfg` and `result` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_spectrum(
    sys: *const ChaoscopeSystem,
    policy: *const ChaoscopePolicy,
    cfg: *const ChaoscopeSpectrumConfig,
    seed: u64,
    exponents: *mut f64,
    capacity: usize,
    result: *mut ChaoscopeSpectrumResult,
) -> ChaoscopeStatus {
    guard(|| {
        let sys = handle!(sys, "sys");
        let policy = handle!(policy, "policy");
        let Some(cfg) = cfg.as_ref() else {
            return fail(ChaoscopeStatus::NullPointer, "cfg is null");
        };
        if result.is_null() || exponents.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "output pointer is null");
        }
        if capacity < sys.state_dim() {
            return fail(
                ChaoscopeStatus::BufferTooSmall,
                format!("need {} exponents, capacity {capacity}", sys.state_dim()),
            );
        }
        match spectrum_over_samples(sys, policy, &(*cfg).into(), seed) {
            Ok(s) => {
                std::slice::from_raw_parts_mut(exponents, s.exponents.len()).copy_from_slice(&s.exponents);
                let (lo, hi) = s.mle_ci.unwrap_or((f64::NAN, f64::NAN));
                *result = ChaoscopeSpectrumResult {
                    mle: s.mle,
                    sle: s.sle,
                    mle_ci_low: lo,
                    mle_ci_high: hi,
                    class_: s.class.into(),
                    n_exponents: s.exponents.len(),
                    n_excluded: s.excluded.len(),
                };
                ChaoscopeStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Reward-space exponent; `-inf` when no sample shows any divergence.
///
/// # Safety
/// Handles must be live; `cfg` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_reward_mle(
    sys: *const ChaoscopeSystem,
    policy: *const ChaoscopePolicy,
    cfg: *const ChaoscopeSpectrumConfig,
    seed: u64,
    out: *mut f64,
) -> ChaoscopeStatus {
    guard(|| {
        let sys = handle!(sys, "sys");
        let policy = handle!(policy, "policy");
        let Some(cfg) = cfg.as_ref() else {
            return fail(ChaoscopeStatus::NullPointer, "cfg is null");
        };
        if out.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "out is null");
        }
        match reward_mle(sys, policy, &(*cfg).into(), seed) {
            Ok(r) => {
                *out = r.value;
                ChaoscopeStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Interquartile mean of `n` values.
///
/// # Safety
/// `values` must hold `n` doubles and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn chaoscope_iqm(values: *const f64, n: usize, out: *mut f64) -> ChaoscopeStatus {
    guard(|| {
        let v = try_ffi!(slice_arg(values, n, "values"));
        if out.is_null() {
            return fail(ChaoscopeStatus::NullPointer, "out is null");
        }
        match iqm(v) {
            Ok(m) => {
                *out = m;
                ChaoscopeStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
