use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use lmmk_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = lmmk_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn record_seal_and_analyze() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(lmmk_session_new(cstr("test-dev").as_ptr(), true, 0, &mut s), LmmkStatus::Ok);

        let mut h = 0u64;
        assert_eq!(
            lmmk_session_begin_phase(s, LmmkPhaseKind::Prefill, 0, false, 0, &mut h),
            LmmkStatus::Ok
        );
        let t0 = lmmk_now_ns();
        let times = LmmkKernelTimes {
            cpu_enqueue_ns: t0,
            queued_ns: t0 + 10,
            submit_ns: t0 + 20,
            start_ns: t0 + 30,
            end_ns: t0 + 130,
        };
        assert_eq!(lmmk_session_record_kernel(s, cstr("k").as_ptr(), 0, &times), LmmkStatus::Ok);
        while lmmk_now_ns() < t0 + 1_000 {}
        assert_eq!(lmmk_session_end_phase(s, h), LmmkStatus::Ok);
        assert_eq!(lmmk_session_end_phase(s, h), LmmkStatus::UnknownHandle);

        let mut t = ptr::null_mut();
        assert_eq!(lmmk_session_seal(s, &mut t), LmmkStatus::Ok);
        assert_eq!(
            lmmk_session_record_kernel(s, cstr("k").as_ptr(), 0, &times),
            LmmkStatus::SessionSealed
        );
        assert_eq!(lmmk_trace_phase_count(t), 1);
        assert_eq!(lmmk_trace_kernel_count(t), 1);

        let mut idle = LmmkIdleSummary::default();
        assert_eq!(lmmk_trace_idle(t, t0, t0 + 200, &mut idle), LmmkStatus::Ok);
        assert_eq!((idle.window_ns, idle.busy_ns, idle.idle_ns, idle.gap_count), (200, 100, 100, 2));
        assert_eq!(lmmk_trace_phase_idle(t, LmmkPhaseKind::Prefill, &mut idle), LmmkStatus::Ok);
        assert_eq!(idle.busy_ns, 100);

        lmmk_trace_free(t);
        lmmk_session_free(s);
    }
}

#[test]
fn order_violation_is_reported() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(lmmk_session_new(cstr("d").as_ptr(), false, 0, &mut s), LmmkStatus::Ok);
        let bad = LmmkKernelTimes {
            cpu_enqueue_ns: 0,
            queued_ns: 10,
            submit_ns: 5,
            start_ns: 20,
            end_ns: 30,
        };
        assert_eq!(
            lmmk_session_record_kernel(s, cstr("k").as_ptr(), 0, &bad),
            LmmkStatus::OrderViolation
        );
        assert!(!last_error().is_empty());

        let mut h = 0;
        assert_eq!(
            lmmk_session_begin_phase(s, LmmkPhaseKind::Decode, 0, false, 0, &mut h),
            LmmkStatus::InvalidArgument
        );

        // Unaligned clocks: phase windows cannot be analyzed.
        let mut t = ptr::null_mut();
        assert_eq!(lmmk_session_seal(s, &mut t), LmmkStatus::Ok);
        let mut idle = LmmkIdleSummary::default();
        assert_eq!(
            lmmk_trace_phase_idle(t, LmmkPhaseKind::Decode, &mut idle),
            LmmkStatus::UnalignedClocks
        );
        lmmk_trace_free(t);
        lmmk_session_free(s);
    }
}

#[test]
fn null_arguments() {
    unsafe {
        assert_eq!(lmmk_session_new(ptr::null(), false, 0, ptr::null_mut()), LmmkStatus::NullPointer);
        assert!(last_error().contains("device_label"));
        let mut h = 0;
        assert_eq!(
            lmmk_session_begin_phase(ptr::null(), LmmkPhaseKind::Prefill, 0, false, 0, &mut h),
            LmmkStatus::NullPointer
        );
        assert_eq!(lmmk_trace_kernel_count(ptr::null()), 0);
        lmmk_trace_free(ptr::null_mut());
        lmmk_session_free(ptr::null_mut());
    }
}

#[test]
fn metrics_through_c_abi() {
    unsafe {
        let (mut a, mut e) = (0.0, 0.0);
        assert_eq!(lmmk_metrics_accuracy(0.8038, 0.7763, &mut a, &mut e), LmmkStatus::Ok);
        assert!((a - 96.4575).abs() < 1e-3 && (e - 35.4244).abs() < 1e-3, "{a} {e}");
        assert_eq!(lmmk_metrics_accuracy(1.0, 0.0, &mut a, &mut e), LmmkStatus::Metrics);

        let mut v = 0.0;
        assert_eq!(lmmk_metrics_hq(0.5, 2.0, 2.0, &mut v), LmmkStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(lmmk_metrics_duplication(100.0, 150.0, 50, &mut v), LmmkStatus::Ok);
        assert_eq!(v, 1.0);
        assert_eq!(lmmk_metrics_duplication(100.0, 150.0, 0, &mut v), LmmkStatus::Metrics);
    }
}

#[test]
fn simulate_write_read_export() {
    let dir = tempfile::tempdir().unwrap();
    let jsonl = cstr(dir.path().join("t.jsonl").to_str().unwrap());
    let chrome = cstr(dir.path().join("t.json").to_str().unwrap());
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(
            lmmk_simulate_preset(cstr("gemma2-decode").as_ptr(), 8, 4, 1, 0.0, &mut t),
            LmmkStatus::Ok
        );
        assert_eq!(lmmk_trace_phase_count(t), 2 + 4 * 4);
        assert_eq!(lmmk_trace_write_jsonl(t, jsonl.as_ptr()), LmmkStatus::Ok);
        assert_eq!(lmmk_trace_export_chrome(t, chrome.as_ptr()), LmmkStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(lmmk_trace_read_jsonl(jsonl.as_ptr(), &mut back), LmmkStatus::Ok);
        assert_eq!(lmmk_trace_kernel_count(back), lmmk_trace_kernel_count(t));

        let (mut a, mut b) = (LmmkIdleSummary::default(), LmmkIdleSummary::default());
        assert_eq!(lmmk_trace_phase_idle(t, LmmkPhaseKind::Decode, &mut a), LmmkStatus::Ok);
        assert_eq!(lmmk_trace_phase_idle(back, LmmkPhaseKind::Decode, &mut b), LmmkStatus::Ok);
        assert_eq!(a, b);
        assert!(a.idle_fraction > 0.15 && a.idle_fraction < 0.25);

        let mut none = ptr::null_mut();
        assert_eq!(
            lmmk_simulate_preset(cstr("missing").as_ptr(), 1, 1, 0, 0.0, &mut none),
            LmmkStatus::Simulation
        );
        assert!(none.is_null());
        let missing = cstr(dir.path().join("nope.jsonl").to_str().unwrap());
        assert_eq!(lmmk_trace_read_jsonl(missing.as_ptr(), &mut none), LmmkStatus::Io);

        lmmk_trace_free(back);
        lmmk_trace_free(t);
    }
    let text = std::fs::read_to_string(dir.path().join("t.json")).unwrap();
    assert!(text.starts_with("{\"traceEvents\":["));
}

#[test]
fn header_declares_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lmmk.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "lmmk_session_new",
        "lmmk_session_seal",
        "lmmk_trace_read_jsonl",
        "lmmk_trace_idle",
        "lmmk_metrics_accuracy",
        "lmmk_simulate_preset",
        "lmmk_last_error_message",
        "typedef struct LmmkSession LmmkSession;",
        "LMMK_STATUS_ORDER_VIOLATION",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }

    // Syntax-check the header with a C compiler when one is installed.
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"lmmk.h\"\nint main(void) { LmmkSession *s = 0; return (int)lmmk_session_new(\"x\", false, 0, &s); }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "C compiler rejected the header"),
        Err(_) => eprintln!("no C compiler found; skipped header compile check"),
    }
}
