//! C ABI over the `lsmrac` simulator.
//!
//! Handles are opaque pointers created by `lsmrac_*_new`/`lsmrac_run` style
//! functions and released with the matching `*_free`. Every fallible call
//! returns an [`LsmracStatus`]; on failure a message is available from
//! [`lsmrac_last_error`] on the calling thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lsmrac::closed_loop::{RunError, Scenario, Trace};
use lsmrac::factorization::{gamma_threshold, ldu_factor, SquareMatrix};
use lsmrac::output::{trace_column, trace_header, write_trace_file};
use lsmrac::scenario::{builtin, ScenarioFile};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsmracStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Diverged = 4,
    Factorization = 5,
    BufferTooSmall = 6,
    Io = 7,
    Panic = 8,
}

/// A validated scenario.
pub struct LsmracScenario {
    inner: Scenario,
}

/// A recorded run: column-major view of the trace CSV table.
pub struct LsmracTrace {
    inner: Trace,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("interior NULs removed"));
}

fn fail(status: LsmracStatus, msg: impl std::fmt::Display) -> LsmracStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> LsmracStatus) -> LsmracStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(LsmracStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, LsmracStatus> {
    if p.is_null() {
        return Err(fail(LsmracStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LsmracStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failure on this thread (empty if none). The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lsmrac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lsmrac_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a built-in scenario (`sim1` ... `sim6-sigma`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_scenario_builtin(name: *const c_char, out: *mut *mut LsmracScenario) -> LsmracStatus {
    guard(|| {
        if out.is_null() {
            return fail(LsmracStatus::NullPointer, "out is NULL");
        }
        let name = match str_arg(name, "name") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match builtin(name) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(LsmracScenario { inner: s }));
                LsmracStatus::Ok
            }
            Err(e) => fail(LsmracStatus::InvalidArgument, e),
        }
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_scenario_from_toml(text: *const c_char, out: *mut *mut LsmracScenario) -> LsmracStatus {
    guard(|| {
        if out.is_null() {
            return fail(LsmracStatus::NullPointer, "out is NULL");
        }
        let text = match str_arg(text, "text") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match ScenarioFile::parse(text).and_then(|f| f.to_scenario()) {
            Ok(s) => {
                *out = Box::into_raw(Box::new(LsmracScenario { inner: s }));
                LsmracStatus::Ok
            }
            Err(e) => fail(LsmracStatus::Parse, e),
        }
    })
}

/// Overrides step, final time and record stride. Non-positive values keep
/// the current setting.
///
/// # Safety
/// `s` must come from a scenario constructor and not be freed.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_scenario_set_integration(
    s: *mut LsmracScenario,
    h: f64,
    duration: f64,
    stride: usize,
) -> LsmracStatus {
    guard(|| {
        let Some(s) = s.as_mut() else {
            return fail(LsmracStatus::NullPointer, "scenario is NULL");
        };
        let ig = &mut s.inner.integration;
        if h > 0.0 {
            ig.h = h;
        }
        if duration > 0.0 {
            ig.duration = duration;
        }
        if stride > 0 {
            ig.stride = stride;
        }
        LsmracStatus::Ok
    })
}

/// Number of plant inputs/outputs, 0 for NULL.
///
/// # Safety
/// `s` must be NULL or a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_scenario_channels(s: *const LsmracScenario) -> usize {
    s.as_ref().map_or(0, |s| s.inner.m())
}

/// Releases a scenario. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_scenario_free(s: *mut LsmracScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

fn wrap_trace(t: Trace) -> *mut LsmracTrace {
    let names = trace_header(&t)
        .into_iter()
        .map(|n| CString::new(n).expect("column names have no NUL"))
        .collect();
    Box::into_raw(Box::new(LsmracTrace { inner: t, names }))
}

/// Integrates the scenario. On divergence returns `LSMRAC_STATUS_DIVERGED`
/// and, when any sample was recorded, still stores the partial trace in
/// `out` (otherwise `*out` is NULL).
///
/// # Safety
/// `s` must be a live scenario handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_run(s: *const LsmracScenario, out: *mut *mut LsmracTrace) -> LsmracStatus {
    guard(|| {
        if out.is_null() {
            return fail(LsmracStatus::NullPointer, "out is NULL");
        }
        *out = ptr::null_mut();
        let Some(s) = s.as_ref() else {
            return fail(LsmracStatus::NullPointer, "scenario is NULL");
        };
        match lsmrac::closed_loop::run(&s.inner) {
            Ok(t) => {
                *out = wrap_trace(t);
                LsmracStatus::Ok
            }
            Err(RunError::Diverged { t, trace }) => {
                if !trace.is_empty() {
                    *out = wrap_trace(*trace);
                }
                fail(LsmracStatus::Diverged, format!("run diverged at t = {t}"))
            }
            Err(e) => fail(LsmracStatus::InvalidArgument, e),
        }
    })
}

/// Number of recorded samples, 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_trace_len(t: *const LsmracTrace) -> usize {
    t.as_ref().map_or(0, |t| t.inner.len())
}

/// Number of CSV columns, 0 for NULL.
///
/// # Safety
/// `t` must be NULL or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_trace_columns(t: *const LsmracTrace) -> usize {
    t.as_ref().map_or(0, |t| t.names.len())
}

/// Name of column `j` (owned by the trace), NULL when out of range.
///
/// # Safety
/// `t` must be NULL or a live trace handle.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_trace_column_name(t: *const LsmracTrace, j: usize) -> *const c_char {
    t.as_ref()
        .and_then(|t| t.names.get(j))
        .map_or(ptr::null(), |n| n.as_ptr())
}

/// Copies column `j` into `buf` (capacity `len` doubles).
///
/// # Safety
/// `t` must be a live trace handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_trace_copy_column(t: *const LsmracTrace, j: usize, buf: *mut f64, len: usize) -> LsmracStatus {
    guard(|| {
        let Some(t) = t.as_ref() else {
            return fail(LsmracStatus::NullPointer, "trace is NULL");
        };
        if buf.is_null() {
            return fail(LsmracStatus::NullPointer, "buf is NULL");
        }
        let Some(col) = trace_column(&t.inner, j) else {
            return fail(LsmracStatus::InvalidArgument, format!("column {j} out of range"));
        };
        if len < col.len() {
            return fail(LsmracStatus::BufferTooSmall, format!("need {} doubles, got {len}", col.len()));
        }
        std::slice::from_raw_parts_mut(buf, col.len()).copy_from_slice(&col);
        LsmracStatus::Ok
    })
}

/// Writes the trace CSV to `path`.
///
/// # Safety
/// `t` must be a live trace handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_trace_write_csv(t: *const LsmracTrace, path: *const c_char) -> LsmracStatus {
    guard(|| {
        let Some(t) = t.as_ref() else {
            return fail(LsmracStatus::NullPointer, "trace is NULL");
        };
        let path = match str_arg(path, "path") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match write_trace_file(&t.inner, std::path::Path::new(path)) {
            Ok(()) => LsmracStatus::Ok,
            Err(e) => fail(LsmracStatus::Io, e),
        }
    })
}

/// Releases a trace. NULL is ignored.
///
/// # Safety
/// `t` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_trace_free(t: *mut LsmracTrace) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Leading minors, LDU pivots and adaptation-gain threshold of the
/// row-major `m x m` matrix `k`. `minors` and `dp` must hold `m` doubles
/// each; `gamma_threshold_out` receives one value.
///
/// # Safety
/// All pointers must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn lsmrac_factor(
    k: *const f64,
    m: usize,
    minors: *mut f64,
    dp: *mut f64,
    gamma_threshold_out: *mut f64,
) -> LsmracStatus {
    guard(|| {
        if k.is_null() || minors.is_null() || dp.is_null() || gamma_threshold_out.is_null() {
            return fail(LsmracStatus::NullPointer, "NULL argument");
        }
        if m == 0 {
            return fail(LsmracStatus::InvalidArgument, "m must be positive");
        }
        let mat = SquareMatrix::from_row_slice(m, m, std::slice::from_raw_parts(k, m * m));
        match ldu_factor(&mat) {
            Ok(ldu) => {
                std::slice::from_raw_parts_mut(minors, m).copy_from_slice(&ldu.minors);
                let d = ldu.dp_diagonal();
                std::slice::from_raw_parts_mut(dp, m).copy_from_slice(d.as_slice());
                *gamma_threshold_out = gamma_threshold(&ldu);
                LsmracStatus::Ok
            }
            Err(e) => fail(LsmracStatus::Factorization, e),
        }
    })
}
