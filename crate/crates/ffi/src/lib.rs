//! C ABI over the `fedpisa` simulator.
//!
//! Every fallible function returns an [`FpStatus`]; on failure a message is
//! kept per thread and can be read with [`fp_last_error_message`]. Handles are
//! opaque and owned by the caller once returned; release them with the
//! matching `*_free` function. Strings handed out by this library must be
//! released with [`fp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fedpisa::lora::unflatten;
use fedpisa::{output, ExperimentConfig, Matrix, ResultsBundle};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Shape = 4,
    Runtime = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque experiment configuration.
pub struct FpConfig {
    inner: ExperimentConfig,
}

/// Opaque results of a finished experiment.
pub struct FpResults {
    inner: ResultsBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &fedpisa::Error) -> FpStatus {
    use fedpisa::Error as E;
    match err {
        E::Config(_) => FpStatus::Config,
        E::Shape(_) => FpStatus::Shape,
        E::Io(_) => FpStatus::Io,
        _ => FpStatus::Runtime,
    }
}

type Outcome = Result<(), (FpStatus, String)>;

fn fail(err: fedpisa::Error) -> (FpStatus, String) {
    (status_of(&err), err.to_string())
}

fn guard(f: impl FnOnce() -> Outcome) -> FpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FpStatus::Panic
        }
    }
}

fn null(what: &str) -> (FpStatus, String) {
    (FpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (FpStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn to_c_string(s: String) -> Result<*mut c_char, (FpStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| (FpStatus::Runtime, e.to_string()))
}

/// Message describing the last failure on this thread, or null if the last
/// call succeeded. Valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn fp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// The built-in small-scale preset.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn fp_config_desk(out: *mut *mut FpConfig) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(FpConfig { inner: ExperimentConfig::desk() }));
        Ok(())
    })
}

/// Parse and validate a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_config_parse(toml: *const c_char, out: *mut *mut FpConfig) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(toml, "toml")?;
        let inner = ExperimentConfig::from_toml_str(text).map_err(fail)?;
        *out = Box::into_raw(Box::new(FpConfig { inner }));
        Ok(())
    })
}

/// Apply one `key=value` override (dotted keys reach nested tables). The
/// configuration is left untouched if the result fails validation.
///
/// # Safety
/// `cfg` must come from this library; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fp_config_set(cfg: *mut FpConfig, assignment: *const c_char) -> FpStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let ov = read_str(assignment, "assignment")?;
        cfg.inner = cfg.inner.with_override(ov).map_err(fail)?;
        Ok(())
    })
}

/// Resolved configuration as TOML. Free with [`fp_string_free`].
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_config_to_toml(cfg: *const FpConfig, out: *mut *mut c_char) -> FpStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = to_c_string(cfg.inner.to_toml_string())?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_config_free(cfg: *mut FpConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Run the full experiment described by `cfg`.
///
/// # Safety
/// `cfg` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_experiment_run(cfg: *const FpConfig, out: *mut *mut FpResults) -> FpStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = fedpisa::run_experiment(&cfg.inner).map_err(fail)?;
        *out = Box::into_raw(Box::new(FpResults { inner }));
        Ok(())
    })
}

/// # Safety
/// `res` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_results_free(res: *mut FpResults) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Number of completed rounds, or 0 for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_results_num_rounds(res: *const FpResults) -> usize {
    res.as_ref().map_or(0, |r| r.inner.rounds.len())
}

/// Cumulative bytes transmitted, or 0 for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_results_total_bytes(res: *const FpResults) -> u64 {
    res.as_ref().map_or(0, |r| r.inner.ledger.total_bytes())
}

/// Cumulative communication cost in GiB, or NaN for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_results_total_cost_gib(res: *const FpResults) -> f64 {
    res.as_ref().map_or(f64::NAN, |r| r.inner.ledger.total_cost_gib())
}

/// Mean expressive test MSE after the last round, or NaN for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_results_final_expressive_mse(res: *const FpResults) -> f64 {
    res.as_ref().map_or(f64::NAN, |r| r.inner.final_mean_expressive_mse())
}

/// Mean identity error after the last round, or NaN for a null handle.
///
/// # Safety
/// `res` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fp_results_final_identity_error(res: *const FpResults) -> f64 {
    res.as_ref().map_or(f64::NAN, |r| r.inner.final_mean_identity_error())
}

/// Per-round records as JSON lines. Free with [`fp_string_free`].
///
/// # Safety
/// `res` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_results_rounds_jsonl(res: *const FpResults, out: *mut *mut c_char) -> FpStatus {
    guard(|| {
        let res = res.as_ref().ok_or_else(|| null("res"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = to_c_string(output::rounds_jsonl(&res.inner))?;
        Ok(())
    })
}

/// Write the results bundle files into `dir`, creating it if needed.
///
/// # Safety
/// `res` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fp_results_write(res: *const FpResults, dir: *const c_char) -> FpStatus {
    guard(|| {
        let res = res.as_ref().ok_or_else(|| null("res"))?;
        let dir = read_str(dir, "dir")?;
        output::write_bundle(&res.inner, Path::new(dir)).map_err(fail)
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Cosine similarity of two length-`len` vectors; 0 when either is
/// (numerically) zero.
///
/// # Safety
/// `u` and `v` must each point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_cosine_similarity(u: *const f64, v: *const f64, len: usize, out: *mut f64) -> FpStatus {
    guard(|| {
        if u.is_null() || v.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let u = std::slice::from_raw_parts(u, len);
        let v = std::slice::from_raw_parts(v, len);
        *out = fedpisa::cosine_similarity(u, v).map_err(fail)?;
        Ok(())
    })
}

/// Attention weights over `n` row-major `rows x cols` factor matrices stored
/// back to back in `factors`. Writes the `n x n` row-major weight matrix to
/// `out`.
///
/// # Safety
/// `factors` must point to `n * rows * cols` doubles and `out` to room for
/// `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn fp_attention_weights(
    factors: *const f64,
    n: usize,
    rows: usize,
    cols: usize,
    tau: f64,
    out: *mut f64,
) -> FpStatus {
    guard(|| {
        if factors.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        if n == 0 || rows == 0 || cols == 0 {
            return Err((FpStatus::Shape, "n, rows and cols must be positive".into()));
        }
        let size = rows
            .checked_mul(cols)
            .filter(|s| s.checked_mul(n).is_some() && n.checked_mul(n).is_some())
            .ok_or_else(|| (FpStatus::Shape, "buffer size overflows".to_string()))?;
        let flat = std::slice::from_raw_parts(factors, size * n);
        let mats: Vec<Matrix> = flat
            .chunks_exact(size)
            .map(|c| unflatten(c, rows, cols))
            .collect::<fedpisa::Result<_>>()
            .map_err(fail)?;
        let refs: Vec<&Matrix> = mats.iter().collect();
        let att = fedpisa::attention_weights(&refs, tau).map_err(fail)?;
        let dst = std::slice::from_raw_parts_mut(out, n * n);
        for (i, row) in att.weights.iter().enumerate() {
            dst[i * n..(i + 1) * n].copy_from_slice(row);
        }
        Ok(())
    })
}
