use std::ffi::{CStr, CString};
use std::ptr;

use lsmrac_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lsmrac_last_error()) }.to_string_lossy().into_owned()
}

fn short_builtin(name: &str, duration: f64) -> *mut LsmracScenario {
    let name = CString::new(name).unwrap();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(lsmrac_scenario_builtin(name.as_ptr(), &mut s), LsmracStatus::Ok);
        assert_eq!(lsmrac_scenario_set_integration(s, 0.0, duration, 0), LsmracStatus::Ok);
    }
    s
}

#[test]
fn run_and_read_columns() {
    let s = short_builtin("sim3", 0.5);
    unsafe {
        assert_eq!(lsmrac_scenario_channels(s), 2);
        let mut t = ptr::null_mut();
        assert_eq!(lsmrac_run(s, &mut t), LsmracStatus::Ok);
        let n = lsmrac_trace_len(t);
        assert_eq!(n, 501);
        // t, y(2), ym(2), e0(2), u(2), theta(9), Rmineig(2)
        assert_eq!(lsmrac_trace_columns(t), 20);
        let name = CStr::from_ptr(lsmrac_trace_column_name(t, 5)).to_str().unwrap();
        assert_eq!(name, "e0_1");
        assert!(lsmrac_trace_column_name(t, 20).is_null());

        let mut col = vec![0.0; n];
        assert_eq!(lsmrac_trace_copy_column(t, 0, col.as_mut_ptr(), n), LsmracStatus::Ok);
        assert_eq!(col[0], 0.0);
        assert!((col[n - 1] - 0.5).abs() < 1e-12);
        assert_eq!(lsmrac_trace_copy_column(t, 5, col.as_mut_ptr(), n), LsmracStatus::Ok);
        assert_eq!(col[0], 1.0);
        assert_eq!(lsmrac_trace_copy_column(t, 5, col.as_mut_ptr(), n - 1), LsmracStatus::BufferTooSmall);
        assert_eq!(lsmrac_trace_copy_column(t, 99, col.as_mut_ptr(), n), LsmracStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("t.csv").to_str().unwrap()).unwrap();
        assert_eq!(lsmrac_trace_write_csv(t, path.as_ptr()), LsmracStatus::Ok);
        let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(text.lines().count(), n + 1);

        lsmrac_trace_free(t);
        lsmrac_scenario_free(s);
    }
}

#[test]
fn divergence_keeps_partial_trace() {
    let s = short_builtin("sim3", 5.0);
    unsafe {
        assert_eq!(lsmrac_scenario_set_integration(s, 0.05, 0.0, 1), LsmracStatus::Ok);
        let mut t = ptr::null_mut();
        assert_eq!(lsmrac_run(s, &mut t), LsmracStatus::Diverged);
        assert!(last_error().contains("diverged"));
        assert!(!t.is_null());
        assert!(lsmrac_trace_len(t) >= 1);
        lsmrac_trace_free(t);
        lsmrac_scenario_free(s);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut s = ptr::null_mut();
        let bad = CString::new("sim99").unwrap();
        assert_eq!(lsmrac_scenario_builtin(bad.as_ptr(), &mut s), LsmracStatus::InvalidArgument);
        assert!(last_error().contains("sim99"));
        assert_eq!(lsmrac_scenario_builtin(ptr::null(), &mut s), LsmracStatus::NullPointer);

        let toml = CString::new("label = \"x\"\n[plant]\nbogus = 1\n").unwrap();
        assert_eq!(lsmrac_scenario_from_toml(toml.as_ptr(), &mut s), LsmracStatus::Parse);
        assert!(s.is_null());

        let mut t = ptr::null_mut();
        assert_eq!(lsmrac_run(ptr::null(), &mut t), LsmracStatus::NullPointer);
        assert_eq!(lsmrac_trace_len(ptr::null()), 0);
        lsmrac_trace_free(ptr::null_mut());
        lsmrac_scenario_free(ptr::null_mut());
    }
}

#[test]
fn factor_third_order_gain() {
    let k = [1.0, 2.0, -2.0, 1.0];
    let mut minors = [0.0; 2];
    let mut dp = [0.0; 2];
    let mut thr = 0.0;
    unsafe {
        assert_eq!(
            lsmrac_factor(k.as_ptr(), 2, minors.as_mut_ptr(), dp.as_mut_ptr(), &mut thr),
            LsmracStatus::Ok
        );
    }
    assert_eq!(minors, [1.0, 5.0]);
    assert_eq!(dp, [1.0, 5.0]);
    assert_eq!(thr, 0.5);

    let swap = [0.0, 1.0, 1.0, 0.0];
    unsafe {
        assert_eq!(
            lsmrac_factor(swap.as_ptr(), 2, minors.as_mut_ptr(), dp.as_mut_ptr(), &mut thr),
            LsmracStatus::Factorization
        );
    }
    assert!(last_error().contains('1'));
}

#[test]
fn toml_round_trip_through_abi() {
    let text = lsmrac::scenario::builtin_file("sim4").unwrap().to_toml();
    let c = CString::new(text).unwrap();
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(lsmrac_scenario_from_toml(c.as_ptr(), &mut s), LsmracStatus::Ok);
        assert_eq!(lsmrac_scenario_channels(s), 2);
        lsmrac_scenario_free(s);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lsmrac.h")).unwrap();
    for f in [
        "lsmrac_last_error",
        "lsmrac_version",
        "lsmrac_scenario_builtin",
        "lsmrac_scenario_from_toml",
        "lsmrac_scenario_set_integration",
        "lsmrac_scenario_channels",
        "lsmrac_scenario_free",
        "lsmrac_run",
        "lsmrac_trace_len",
        "lsmrac_trace_columns",
        "lsmrac_trace_column_name",
        "lsmrac_trace_copy_column",
        "lsmrac_trace_write_csv",
        "lsmrac_trace_free",
        "lsmrac_factor",
        "typedef struct LsmracScenario LsmracScenario",
        "LSMRAC_STATUS_DIVERGED = 4",
    ] {
        assert!(header.contains(f), "{f} missing from header");
    }
}

/// Compiles and runs a C client against the static library when a C
/// compiler is available.
#[test]
fn c_client_links_against_staticlib() {
    let Ok(exe) = std::env::current_exe() else { return };
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("liblsmrac_ffi.a");
    if !lib.exists() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "lsmrac.h"
int main(void) {
    double k[4] = {1, 2, -2, 1}, minors[2], dp[2], thr;
    if (lsmrac_factor(k, 2, minors, dp, &thr) != LSMRAC_STATUS_OK) return 1;
    LsmracScenario *s = NULL;
    if (lsmrac_scenario_builtin("sim3", &s) != LSMRAC_STATUS_OK) return 2;
    lsmrac_scenario_set_integration(s, 0, 0.1, 0);
    LsmracTrace *t = NULL;
    if (lsmrac_run(s, &t) != LSMRAC_STATUS_OK) return 3;
    printf("%g %zu %s\n", thr, lsmrac_trace_len(t), lsmrac_trace_column_name(t, 1));
    lsmrac_trace_free(t);
    lsmrac_scenario_free(s);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("client");
    let status = std::process::Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.5 101 y_1");
}
