//! C ABI over the library's core surface: noise sampling, clipping,
//! sensitivity calibration, rate schedules, and whole simulation runs.
//!
//! Conventions: every function returns an [`AfdpStatus`]; outputs go through
//! pointers; heap-backed objects are opaque handles with explicit `_free`
//! functions; the last error message is kept per thread and retrievable via
//! [`afdp_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use afdp::dp::{self, PrivacySpec};
use afdp::engine::{self, RunConfig, RunRecord};
use afdp::models::{Dataset, ModelSpec};
use afdp::schedules::{self, RatePolicy};

/// Result of every C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfdpStatus {
    AfdpOk = 0,
    AfdpNullPointer = 1,
    AfdpInvalidArgument = 2,
    AfdpRuntimeError = 3,
    AfdpBufferTooSmall = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: AfdpStatus, msg: impl Into<String>) -> AfdpStatus {
    set_error(msg);
    status
}

/// Copy the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the status of the copy itself.
#[no_mangle]
pub extern "C" fn afdp_last_error_message(buf: *mut c_char, len: usize) -> AfdpStatus {
    if buf.is_null() {
        return AfdpStatus::AfdpNullPointer;
    }
    if len == 0 {
        return AfdpStatus::AfdpBufferTooSmall;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        let n = bytes.len().min(len - 1);
        unsafe {
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        if n < bytes.len() {
            AfdpStatus::AfdpBufferTooSmall
        } else {
            AfdpStatus::AfdpOk
        }
    })
}

/// Opaque deterministic random stream.
pub struct AfdpRng {
    inner: ChaCha12Rng,
}

/// Create a random stream from a seed and stream index. The pair matches
/// the library's per-edge stream derivation, so stream `k + 1` reproduces
/// edge `k` of a run with the same seed.
#[no_mangle]
pub extern "C" fn afdp_rng_new(seed: u64, stream: u64) -> *mut AfdpRng {
    let mut inner = ChaCha12Rng::seed_from_u64(seed);
    inner.set_stream(stream);
    Box::into_raw(Box::new(AfdpRng { inner }))
}

/// # Safety
/// `rng` must be a pointer from [`afdp_rng_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn afdp_rng_free(rng: *mut AfdpRng) {
    if !rng.is_null() {
        drop(unsafe { Box::from_raw(rng) });
    }
}

/// Draw one privacy-noise vector of `dim` components into `out`.
///
/// # Safety
/// `rng` must be a live handle; `out` must point to `dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn afdp_sample_noise(
    rng: *mut AfdpRng,
    epsilon: f64,
    sensitivity: f64,
    dim: usize,
    out: *mut f64,
) -> AfdpStatus {
    if rng.is_null() || out.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "rng and out must be non-null");
    }
    let spec = match PrivacySpec::new(epsilon, 0.5, sensitivity) {
        Ok(s) => s,
        Err(e) => return fail(AfdpStatus::AfdpInvalidArgument, e.to_string()),
    };
    let rng = unsafe { &mut *rng };
    match dp::sample_noise(&spec, dim, &mut rng.inner) {
        Ok(sample) => {
            unsafe { ptr::copy_nonoverlapping(sample.vector.as_ptr(), out, dim) };
            AfdpStatus::AfdpOk
        }
        Err(e) => fail(AfdpStatus::AfdpInvalidArgument, e.to_string()),
    }
}

/// Clip `gradient` (length `dim`, modified in place) to norm at most `bound`.
///
/// # Safety
/// `gradient` must point to `dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn afdp_clip_gradient(
    gradient: *mut f64,
    dim: usize,
    bound: f64,
) -> AfdpStatus {
    if gradient.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "gradient must be non-null");
    }
    let slice = unsafe { std::slice::from_raw_parts_mut(gradient, dim) };
    match dp::clip_gradient(slice, bound) {
        Ok(clipped) => {
            slice.copy_from_slice(&clipped);
            AfdpStatus::AfdpOk
        }
        Err(e) => fail(AfdpStatus::AfdpInvalidArgument, e.to_string()),
    }
}

/// Variance-calibrated starting sensitivity.
///
/// # Safety
/// `out` must be a writable double.
#[no_mangle]
pub unsafe extern "C" fn afdp_initial_sensitivity(
    sigma: f64,
    batch: usize,
    delta: f64,
    out: *mut f64,
) -> AfdpStatus {
    if out.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "out must be non-null");
    }
    match dp::initial_sensitivity(sigma, batch, delta) {
        Ok(v) => {
            unsafe { *out = v };
            AfdpStatus::AfdpOk
        }
        Err(e) => fail(AfdpStatus::AfdpInvalidArgument, e.to_string()),
    }
}

/// Worst-case sensitivity `2G / b` from a gradient-norm bound.
///
/// # Safety
/// `out` must be a writable double.
#[no_mangle]
pub unsafe extern "C" fn afdp_sensitivity_from_bound(
    grad_bound: f64,
    batch: usize,
    out: *mut f64,
) -> AfdpStatus {
    if out.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "out must be non-null");
    }
    match dp::sensitivity_from_bound(grad_bound, batch) {
        Ok(v) => {
            unsafe { *out = v };
            AfdpStatus::AfdpOk
        }
        Err(e) => fail(AfdpStatus::AfdpInvalidArgument, e.to_string()),
    }
}

/// Learning rate at iteration `t` for a JSON-encoded rate policy (the
/// serde form of the library's `RatePolicy`).
///
/// # Safety
/// `policy_json` must be a NUL-terminated string; `out` a writable double.
#[no_mangle]
pub unsafe extern "C" fn afdp_rate_at(
    policy_json: *const c_char,
    t: u64,
    out: *mut f64,
) -> AfdpStatus {
    if policy_json.is_null() || out.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "policy_json and out must be non-null");
    }
    let s = match unsafe { CStr::from_ptr(policy_json) }.to_str() {
        Ok(s) => s,
        Err(_) => return fail(AfdpStatus::AfdpInvalidArgument, "policy_json is not UTF-8"),
    };
    let policy: RatePolicy = match serde_json::from_str(s) {
        Ok(p) => p,
        Err(e) => return fail(AfdpStatus::AfdpInvalidArgument, format!("bad policy JSON: {e}")),
    };
    match schedules::rate_at(&policy, t) {
        Ok(v) => {
            unsafe { *out = v };
            AfdpStatus::AfdpOk
        }
        Err(e) => fail(AfdpStatus::AfdpInvalidArgument, e.to_string()),
    }
}

/// Opaque completed-run handle.
pub struct AfdpRunRecord {
    inner: RunRecord,
}

/// Run a full simulation from JSON-encoded run config and model spec (the
/// serde forms of the library's `RunConfig` and `ModelSpec`). Quadratic
/// models pair with the synthetic quadratic dataset; classifier specs are
/// rejected here because sample data cannot cross this ABI.
///
/// # Safety
/// Both strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn afdp_run_quadratic(
    config_json: *const c_char,
    spec_json: *const c_char,
    noise_sigma: f64,
    out: *mut *mut AfdpRunRecord,
) -> AfdpStatus {
    if config_json.is_null() || spec_json.is_null() || out.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "all arguments must be non-null");
    }
    let parse = |p: *const c_char| unsafe { CStr::from_ptr(p) }.to_str().map(str::to_owned);
    let (cs, ss) = match (parse(config_json), parse(spec_json)) {
        (Ok(a), Ok(b)) => (a, b),
        _ => return fail(AfdpStatus::AfdpInvalidArgument, "arguments are not UTF-8"),
    };
    let config: RunConfig = match serde_json::from_str(&cs) {
        Ok(c) => c,
        Err(e) => return fail(AfdpStatus::AfdpInvalidArgument, format!("bad config JSON: {e}")),
    };
    let spec: ModelSpec = match serde_json::from_str(&ss) {
        Ok(s) => s,
        Err(e) => return fail(AfdpStatus::AfdpInvalidArgument, format!("bad spec JSON: {e}")),
    };
    if spec.quad_spectrum.is_none() {
        return fail(
            AfdpStatus::AfdpInvalidArgument,
            "only quadratic model specs can run through this entry point",
        );
    }
    let dataset = Dataset::QuadraticNoise { dim: spec.dim, sigma: noise_sigma };
    match engine::run(&config, &spec, &dataset, None) {
        Ok(record) => {
            unsafe { *out = Box::into_raw(Box::new(AfdpRunRecord { inner: record })) };
            AfdpStatus::AfdpOk
        }
        Err(e) => fail(AfdpStatus::AfdpRuntimeError, e.to_string()),
    }
}

/// Number of recorded iterations.
///
/// # Safety
/// `record` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn afdp_run_record_len(
    record: *const AfdpRunRecord,
    out: *mut u64,
) -> AfdpStatus {
    if record.is_null() || out.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "record and out must be non-null");
    }
    unsafe { *out = (*record).inner.rows.len() as u64 };
    AfdpStatus::AfdpOk
}

/// Total privacy budget spent over the run.
///
/// # Safety
/// `record` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn afdp_run_record_budget_spent(
    record: *const AfdpRunRecord,
    out: *mut f64,
) -> AfdpStatus {
    if record.is_null() || out.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "record and out must be non-null");
    }
    unsafe { *out = (*record).inner.ledger_total };
    AfdpStatus::AfdpOk
}

/// Copy the final model into `buf`. `buf_len` holds the capacity on entry
/// and the model dimension on exit; call with `buf == NULL` to query the
/// required size.
///
/// # Safety
/// `record` must be a live handle; `buf` (when non-null) must hold
/// `*buf_len` doubles; `buf_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn afdp_run_record_final_model(
    record: *const AfdpRunRecord,
    buf: *mut f64,
    buf_len: *mut usize,
) -> AfdpStatus {
    if record.is_null() || buf_len.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "record and buf_len must be non-null");
    }
    let model = unsafe { &(*record).inner.final_model };
    let capacity = unsafe { *buf_len };
    unsafe { *buf_len = model.len() };
    if buf.is_null() {
        return AfdpStatus::AfdpOk;
    }
    if capacity < model.len() {
        return fail(
            AfdpStatus::AfdpBufferTooSmall,
            format!("need {} slots, got {capacity}", model.len()),
        );
    }
    unsafe { ptr::copy_nonoverlapping(model.as_ptr(), buf, model.len()) };
    AfdpStatus::AfdpOk
}

/// Write the run's CSV log to `path`.
///
/// # Safety
/// `record` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn afdp_run_record_write_csv(
    record: *const AfdpRunRecord,
    path: *const c_char,
) -> AfdpStatus {
    if record.is_null() || path.is_null() {
        return fail(AfdpStatus::AfdpNullPointer, "record and path must be non-null");
    }
    let path = match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(p) => p,
        Err(_) => return fail(AfdpStatus::AfdpInvalidArgument, "path is not UTF-8"),
    };
    let file = match std::fs::File::create(path) {
        Ok(f) => f,
        Err(e) => return fail(AfdpStatus::AfdpRuntimeError, format!("create {path}: {e}")),
    };
    match engine::write_csv(unsafe { &(*record).inner }, std::io::BufWriter::new(file)) {
        Ok(()) => AfdpStatus::AfdpOk,
        Err(e) => fail(AfdpStatus::AfdpRuntimeError, e.to_string()),
    }
}

/// # Safety
/// `record` must be a pointer from [`afdp_run_quadratic`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn afdp_run_record_free(record: *mut AfdpRunRecord) {
    if !record.is_null() {
        drop(unsafe { Box::from_raw(record) });
    }
}
