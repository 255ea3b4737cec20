//! C ABI for the lmmk profiling toolkit.
//!
//! Sessions and traces are opaque handles created and destroyed through
//! this API. Every fallible function returns an [`LmmkStatus`]; on failure
//! a human-readable message is available from [`lmmk_last_error_message`]
//! on the calling thread until the next failing call. Panics never cross
//! the boundary: they are caught and reported as `LMMK_STATUS_PANIC`.
//!
//! The header `include/lmmk.h` is generated at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lmmk::metrics::{self, MetricPair, MetricsError};
use lmmk::recorder::{self, PhaseHandle, PhaseKind, RecorderError, SessionInfo, TimestampNs, Trace, TraceSession};
use lmmk::sim::{self, SimError};
use lmmk::timeline::{self, Interval, TimelineError};
use lmmk::trace_io::{self, TraceIoError};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmmkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SessionSealed = 3,
    UnknownHandle = 4,
    OrderViolation = 5,
    Io = 6,
    Parse = 7,
    UnalignedClocks = 8,
    Metrics = 9,
    Simulation = 10,
    Panic = 11,
}

/// Inference phase kinds. Per-token kinds (decode, softmax, copy, sampling)
/// require a token index; embedding and prefill must not have one.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmmkPhaseKind {
    Embedding = 0,
    Prefill = 1,
    Decode = 2,
    Softmax = 3,
    CopyProbsToCpu = 4,
    Sampling = 5,
}

impl From<LmmkPhaseKind> for PhaseKind {
    fn from(k: LmmkPhaseKind) -> Self {
        match k {
            LmmkPhaseKind::Embedding => PhaseKind::Embedding,
            LmmkPhaseKind::Prefill => PhaseKind::Prefill,
            LmmkPhaseKind::Decode => PhaseKind::Decode,
            LmmkPhaseKind::Softmax => PhaseKind::Softmax,
            LmmkPhaseKind::CopyProbsToCpu => PhaseKind::CopyProbsToCpu,
            LmmkPhaseKind::Sampling => PhaseKind::Sampling,
        }
    }
}

/// Device-side lifecycle timestamps of one kernel, in nanoseconds.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LmmkKernelTimes {
    pub cpu_enqueue_ns: u64,
    pub queued_ns: u64,
    pub submit_ns: u64,
    pub start_ns: u64,
    pub end_ns: u64,
}

/// Busy/idle summary of an analysis window.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LmmkIdleSummary {
    pub window_ns: u64,
    pub busy_ns: u64,
    pub idle_ns: u64,
    pub idle_fraction: f64,
    pub gap_count: usize,
}

/// A recording session. Safe to record into from several threads.
pub struct LmmkSession {
    inner: TraceSession,
}

/// A sealed, immutable trace.
pub struct LmmkTrace {
    inner: Trace,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    let c = CString::new(text).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message describing the most recent failure on this thread, or NULL if
/// none. The pointer stays valid until the next failing call on the same
/// thread; do not free it.
#[no_mangle]
pub extern "C" fn lmmk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

struct Failure(LmmkStatus, String);

impl Failure {
    fn new(status: LmmkStatus, msg: impl std::fmt::Display) -> Self {
        Failure(status, msg.to_string())
    }
}

impl From<RecorderError> for Failure {
    fn from(e: RecorderError) -> Self {
        let status = match e {
            RecorderError::SessionSealed => LmmkStatus::SessionSealed,
            RecorderError::UnknownHandle | RecorderError::AlreadyEnded => LmmkStatus::UnknownHandle,
            RecorderError::TimestampOrderViolation(_) | RecorderError::PhaseEndBeforeStart => {
                LmmkStatus::OrderViolation
            }
            _ => LmmkStatus::InvalidArgument,
        };
        Failure::new(status, e)
    }
}

impl From<TraceIoError> for Failure {
    fn from(e: TraceIoError) -> Self {
        let status = match e {
            TraceIoError::Io(_) => LmmkStatus::Io,
            TraceIoError::Invalid { .. } => LmmkStatus::OrderViolation,
            _ => LmmkStatus::Parse,
        };
        Failure::new(status, e)
    }
}

impl From<TimelineError> for Failure {
    fn from(e: TimelineError) -> Self {
        let status = match e {
            TimelineError::UnalignedClocks => LmmkStatus::UnalignedClocks,
            _ => LmmkStatus::InvalidArgument,
        };
        Failure::new(status, e)
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::new(LmmkStatus::Metrics, e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::new(LmmkStatus::Simulation, e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LmmkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LmmkStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            LmmkStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(LmmkStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(LmmkStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(LmmkStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(LmmkStatus::NullPointer, format!("{what} is NULL")))
}

/// Current monotonic host time in nanoseconds.
#[no_mangle]
pub extern "C" fn lmmk_now_ns() -> u64 {
    recorder::now().get()
}

/// Creates a session. Pass `has_clock_offset = false` when the device and
/// host clocks are not aligned; phase-window analyses will then fail with
/// `LMMK_STATUS_UNALIGNED_CLOCKS`.
///
/// # Safety
/// `device_label` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_session_new(
    device_label: *const c_char,
    has_clock_offset: bool,
    clock_offset_ns: i64,
    out: *mut *mut LmmkSession,
) -> LmmkStatus {
    guard(|| {
        let label = str_arg(device_label, "device_label")?;
        let out = out_arg(out, "out")?;
        let mut info = SessionInfo::new(label);
        if has_clock_offset {
            info = info.with_clock_offset(clock_offset_ns);
        }
        *out = Box::into_raw(Box::new(LmmkSession {
            inner: TraceSession::new(info),
        }));
        Ok(())
    })
}

/// Destroys a session. NULL is ignored.
///
/// # Safety
/// `session` must come from [`lmmk_session_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmmk_session_free(session: *mut LmmkSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Opens a phase at the current time. `token_index` is read only when
/// `has_token_index` is true.
///
/// # Safety
/// `session` must be a live session; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_session_begin_phase(
    session: *const LmmkSession,
    kind: LmmkPhaseKind,
    turn: u32,
    has_token_index: bool,
    token_index: u32,
    out_handle: *mut u64,
) -> LmmkStatus {
    guard(|| {
        let s = ref_arg(session, "session")?;
        let out = out_arg(out_handle, "out_handle")?;
        let token = has_token_index.then_some(token_index);
        *out = s.inner.begin_phase(kind.into(), turn, token)?.to_raw();
        Ok(())
    })
}

/// Closes the phase identified by `handle` at the current time.
///
/// # Safety
/// `session` must be a live session.
#[no_mangle]
pub unsafe extern "C" fn lmmk_session_end_phase(session: *const LmmkSession, handle: u64) -> LmmkStatus {
    guard(|| {
        let s = ref_arg(session, "session")?;
        s.inner.end_phase(PhaseHandle::from_raw(handle))?;
        Ok(())
    })
}

/// Records one kernel with device-clock timestamps.
///
/// # Safety
/// `session` must be a live session, `name` a NUL-terminated string and
/// `times` a readable [`LmmkKernelTimes`].
#[no_mangle]
pub unsafe extern "C" fn lmmk_session_record_kernel(
    session: *const LmmkSession,
    name: *const c_char,
    queue_id: u32,
    times: *const LmmkKernelTimes,
) -> LmmkStatus {
    guard(|| {
        let s = ref_arg(session, "session")?;
        let name = str_arg(name, "name")?;
        let t = ref_arg(times, "times")?;
        s.inner.record_kernel(
            name,
            queue_id,
            TimestampNs(t.cpu_enqueue_ns),
            TimestampNs(t.queued_ns),
            TimestampNs(t.submit_ns),
            TimestampNs(t.start_ns),
            TimestampNs(t.end_ns),
        )?;
        Ok(())
    })
}

/// Seals the session and returns the trace. The session stays allocated
/// (further records fail) and must still be freed.
///
/// # Safety
/// `session` must be a live session; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_session_seal(session: *const LmmkSession, out: *mut *mut LmmkTrace) -> LmmkStatus {
    guard(|| {
        let s = ref_arg(session, "session")?;
        let out = out_arg(out, "out")?;
        let trace = s.inner.seal()?;
        *out = Box::into_raw(Box::new(LmmkTrace { inner: trace }));
        Ok(())
    })
}

/// Destroys a trace. NULL is ignored.
///
/// # Safety
/// `trace` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_free(trace: *mut LmmkTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Reads a JSONL trace file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_read_jsonl(path: *const c_char, out: *mut *mut LmmkTrace) -> LmmkStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let trace = trace_io::read_jsonl(&path)?;
        *out = Box::into_raw(Box::new(LmmkTrace { inner: trace }));
        Ok(())
    })
}

/// Writes the trace as JSONL.
///
/// # Safety
/// `trace` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_write_jsonl(trace: *const LmmkTrace, path: *const c_char) -> LmmkStatus {
    guard(|| {
        let t = ref_arg(trace, "trace")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        trace_io::write_jsonl(&t.inner, &path)?;
        Ok(())
    })
}

/// Writes the trace in the trace-viewer JSON format.
///
/// # Safety
/// `trace` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_export_chrome(trace: *const LmmkTrace, path: *const c_char) -> LmmkStatus {
    guard(|| {
        let t = ref_arg(trace, "trace")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        trace_io::export_chrome_trace(&t.inner, &path)?;
        Ok(())
    })
}

/// Number of phase records; 0 for NULL.
///
/// # Safety
/// `trace` must be live or NULL.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_phase_count(trace: *const LmmkTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.inner.phases().len())
}

/// Number of kernel records; 0 for NULL.
///
/// # Safety
/// `trace` must be live or NULL.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_kernel_count(trace: *const LmmkTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.inner.kernels().len())
}

/// Idle analysis of the device-clock window `[start_ns, end_ns)`.
///
/// # Safety
/// `trace` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_idle(
    trace: *const LmmkTrace,
    start_ns: u64,
    end_ns: u64,
    out: *mut LmmkIdleSummary,
) -> LmmkStatus {
    guard(|| {
        let t = ref_arg(trace, "trace")?;
        let out = out_arg(out, "out")?;
        let window = Interval::new(start_ns, end_ns)?;
        let r = timeline::idle_gaps(&t.inner, window);
        *out = LmmkIdleSummary {
            window_ns: window.len(),
            busy_ns: r.busy_ns,
            idle_ns: r.idle_ns,
            idle_fraction: r.idle_fraction,
            gap_count: r.gaps.len(),
        };
        Ok(())
    })
}

/// Idle time summed over every occurrence of a phase kind.
///
/// # Safety
/// `trace` must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_trace_phase_idle(
    trace: *const LmmkTrace,
    kind: LmmkPhaseKind,
    out: *mut LmmkIdleSummary,
) -> LmmkStatus {
    guard(|| {
        let t = ref_arg(trace, "trace")?;
        let out = out_arg(out, "out")?;
        let per = timeline::phase_idle(&t.inner, kind.into())?;
        let s = timeline::summarize_phase_idle(&per);
        *out = LmmkIdleSummary {
            window_ns: s.window_ns,
            busy_ns: s.busy_ns,
            idle_ns: s.idle_ns,
            idle_fraction: s.idle_fraction,
            gap_count: per.iter().map(|p| p.report.gaps.len()).sum(),
        };
        Ok(())
    })
}

/// Accuracy (percent) and scaled error (µs per ms) of a latency pair.
///
/// # Safety
/// `alpha_pct` and `eps_star` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_metrics_accuracy(
    t_lm_ms: f64,
    t_gt_ms: f64,
    alpha_pct: *mut f64,
    eps_star: *mut f64,
) -> LmmkStatus {
    guard(|| {
        let a = out_arg(alpha_pct, "alpha_pct")?;
        let e = out_arg(eps_star, "eps_star")?;
        let r = metrics::evaluate_pair(MetricPair::new(t_lm_ms, t_gt_ms))?;
        *a = r.alpha_pct;
        *e = r.eps_star_us_per_ms;
        Ok(())
    })
}

/// Harmonic score of the accuracy ratio and the two speedup ratios.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_metrics_hq(m_a: f64, m_prefill: f64, m_decode: f64, out: *mut f64) -> LmmkStatus {
    guard(|| {
        let o = out_arg(out, "out")?;
        *o = metrics::hq(m_a, m_prefill, m_decode)?;
        Ok(())
    })
}

/// Per-kernel latency from baseline and duplicated phase times.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_metrics_duplication(
    t_base_ms: f64,
    t_dup_ms: f64,
    n: u64,
    out: *mut f64,
) -> LmmkStatus {
    guard(|| {
        let o = out_arg(out, "out")?;
        *o = metrics::duplication_estimate(t_base_ms, t_dup_ms, n)?;
        Ok(())
    })
}

/// Runs a built-in workload preset and returns its trace.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lmmk_simulate_preset(
    preset: *const c_char,
    prompt_tokens: u32,
    output_tokens: u32,
    seed: u64,
    sigma_rel: f64,
    out: *mut *mut LmmkTrace,
) -> LmmkStatus {
    guard(|| {
        let name = str_arg(preset, "preset")?;
        let out = out_arg(out, "out")?;
        let mut spec = sim::preset(name)?;
        spec.jitter.seed = seed;
        spec.jitter.sigma_rel = sigma_rel;
        spec.validate()?;
        let (trace, _) = sim::simulate(&spec, prompt_tokens, output_tokens, None)?;
        *out = Box::into_raw(Box::new(LmmkTrace { inner: trace }));
        Ok(())
    })
}
