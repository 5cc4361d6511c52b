//! C ABI over the experiment runner: opaque handles, integer status codes,
//! and a thread-local last-error message. The matching header lives at
//! `include/hidenseek.h`.
//!
//! Every entry point is panic-safe: panics are caught and reported as
//! `HNS_STATUS_PANIC` instead of unwinding across the boundary.

use hidenseek::config::{parse_config, parse_config_str, ExperimentConfig};
use hidenseek::runner;
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HnsStatus {
    Ok = 0,
    /// Invalid or inconsistent configuration.
    Config = 1,
    /// Dataset missing or malformed.
    Data = 2,
    /// Numeric failure (non-finite loss, dimension or protocol violation).
    Numeric = 3,
    /// Null pointer or non-UTF-8 string argument.
    InvalidArgument = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

fn status_of(err: &hidenseek::Error) -> HnsStatus {
    match err.exit_code() {
        1 => HnsStatus::Config,
        2 => HnsStatus::Data,
        _ => HnsStatus::Numeric,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(err: hidenseek::Error) -> HnsStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn guarded(f: impl FnOnce() -> HnsStatus + std::panic::UnwindSafe) -> HnsStatus {
    match catch_unwind(f) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(&msg);
            HnsStatus::Panic
        }
    }
}

/// Opaque experiment handle.
pub struct HnsExperiment {
    config: ExperimentConfig,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, HnsStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(HnsStatus::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        HnsStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf` (truncated to
/// `cap` bytes including the NUL) and returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null (to query length).
#[no_mangle]
pub unsafe extern "C" fn hns_last_error(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            // always NUL-terminate what was written
            *buf.add(n - 1) = 0;
        }
        bytes.len() - 1
    })
}

/// Creates an experiment from a TOML config file. A null path yields the
/// built-in defaults. On success writes the handle to `out`.
///
/// # Safety
/// `out` must be a valid pointer; `config_path`, when non-null, must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hns_experiment_new(
    config_path: *const c_char,
    out: *mut *mut HnsExperiment,
) -> HnsStatus {
    if out.is_null() {
        set_error("null output handle");
        return HnsStatus::InvalidArgument;
    }
    *out = ptr::null_mut();
    let path: Option<PathBuf> = if config_path.is_null() {
        None
    } else {
        match cstr_arg(config_path) {
            Ok(s) => Some(PathBuf::from(s)),
            Err(status) => return status,
        }
    };
    guarded(AssertUnwindSafe(|| {
        match parse_config(path.as_deref().map(Path::new), &[]) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(HnsExperiment { config }));
                HnsStatus::Ok
            }
            Err(e) => fail(e),
        }
    }))
}

/// Applies one `key = value` override, re-validating the whole config.
///
/// # Safety
/// `exp` must be a live handle from `hns_experiment_new`; `key` and `value`
/// must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn hns_experiment_set(
    exp: *mut HnsExperiment,
    key: *const c_char,
    value: *const c_char,
) -> HnsStatus {
    if exp.is_null() {
        set_error("null experiment handle");
        return HnsStatus::InvalidArgument;
    }
    let key = match cstr_arg(key) {
        Ok(s) => s.to_string(),
        Err(status) => return status,
    };
    let value = match cstr_arg(value) {
        Ok(s) => s.to_string(),
        Err(status) => return status,
    };
    let handle = &mut *exp;
    guarded(AssertUnwindSafe(|| {
        let base = match handle.config.to_toml() {
            Ok(t) => t,
            Err(e) => return fail(e),
        };
        match parse_config_str(&base, &[(key.clone(), value.clone())]) {
            Ok(config) => {
                handle.config = config;
                HnsStatus::Ok
            }
            Err(e) => fail(e),
        }
    }))
}

/// Copies the resolved output directory into `buf` and returns its length.
///
/// # Safety
/// As for `hns_last_error`.
#[no_mangle]
pub unsafe extern "C" fn hns_experiment_output_dir(
    exp: *const HnsExperiment,
    buf: *mut c_char,
    cap: size_t,
) -> size_t {
    if exp.is_null() {
        return 0;
    }
    let dir = (*exp).config.resolved_output_dir();
    let text = dir.to_string_lossy();
    let bytes = text.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
    }
    bytes.len()
}

/// Runs the configured experiment (all repetitions), writing metrics CSVs,
/// the summary, and the resolved config to the output directory.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hns_experiment_run(exp: *mut HnsExperiment) -> HnsStatus {
    if exp.is_null() {
        set_error("null experiment handle");
        return HnsStatus::InvalidArgument;
    }
    let handle = &*exp;
    guarded(AssertUnwindSafe(|| match runner::run_experiment(&handle.config) {
        Ok(_) => HnsStatus::Ok,
        Err(e) => fail(e),
    }))
}

/// Initializes and server-prunes without training; writes the pruned
/// checkpoint and kept-unit report.
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hns_experiment_prune_only(exp: *mut HnsExperiment) -> HnsStatus {
    if exp.is_null() {
        set_error("null experiment handle");
        return HnsStatus::InvalidArgument;
    }
    let handle = &*exp;
    guarded(AssertUnwindSafe(|| match runner::run_prune_only(&handle.config) {
        Ok(_) => HnsStatus::Ok,
        Err(e) => fail(e),
    }))
}

/// Writes the per-round communication-cost table (cost.csv) and fills the
/// byte-model upload/download sizes for the configured algorithm.
///
/// # Safety
/// `exp` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn hns_experiment_cost(
    exp: *mut HnsExperiment,
    upload_bytes: *mut u64,
    download_bytes: *mut u64,
) -> HnsStatus {
    if exp.is_null() {
        set_error("null experiment handle");
        return HnsStatus::InvalidArgument;
    }
    let handle = &*exp;
    guarded(AssertUnwindSafe(|| {
        let report = match runner::cost_report(&handle.config) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let out_dir = handle.config.resolved_output_dir();
        if let Err(e) = std::fs::create_dir_all(&out_dir)
            .and_then(|_| std::fs::write(out_dir.join("cost.csv"), &report))
        {
            return fail(hidenseek::Error::Io(e));
        }
        let name = format!("\n{},", algorithm_name(&handle.config));
        if let Some(line) = report
            .lines()
            .find(|l| l.starts_with(name.trim_start_matches('\n')))
        {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() >= 3 {
                if let (Ok(up), Ok(down)) = (fields[1].parse::<u64>(), fields[2].parse::<u64>()) {
                    if !upload_bytes.is_null() {
                        *upload_bytes = up;
                    }
                    if !download_bytes.is_null() {
                        *download_bytes = down;
                    }
                }
            }
        }
        HnsStatus::Ok
    }))
}

fn algorithm_name(cfg: &ExperimentConfig) -> &'static str {
    cfg.algorithm.name()
}

/// Releases a handle. Null is a no-op.
///
/// # Safety
/// `exp` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn hns_experiment_free(exp: *mut HnsExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}
