//! Phase- and kernel-level event capture.
//!
//! A [`TraceSession`] collects [`PhaseRecord`]s (semantic inference phases
//! timed on the host monotonic clock) and [`KernelRecord`]s (device commands
//! with their four lifecycle timestamps). Sealing the session sorts the
//! records and freezes them into an immutable [`Trace`].
//!
//! Recording is safe from two threads at once (typically the host enqueue
//! path and a completion callback). Storage is preallocated; once kernel
//! names have been seen and the buffers are within capacity, the record
//! calls do not allocate.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds on a monotonic clock.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimestampNs(pub u64);

impl TimestampNs {
    pub const ZERO: TimestampNs = TimestampNs(0);

    pub fn get(self) -> u64 {
        self.0
    }

    /// `self - earlier`, saturating at zero.
    pub fn since(self, earlier: TimestampNs) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl From<u64> for TimestampNs {
    fn from(v: u64) -> Self {
        TimestampNs(v)
    }
}

impl fmt::Display for TimestampNs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Reads the host monotonic clock.
#[cfg(unix)]
pub fn now() -> TimestampNs {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and CLOCK_MONOTONIC is always supported.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    debug_assert_eq!(rc, 0);
    TimestampNs(ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64)
}

#[cfg(not(unix))]
pub fn now() -> TimestampNs {
    use std::sync::OnceLock;
    use std::time::Instant;
    static ANCHOR: OnceLock<Instant> = OnceLock::new();
    let anchor = *ANCHOR.get_or_init(Instant::now);
    TimestampNs(anchor.elapsed().as_nanos() as u64)
}

/// Semantic stage of one inference round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Embedding,
    Prefill,
    Decode,
    Softmax,
    CopyProbsToCpu,
    Sampling,
}

impl PhaseKind {
    pub const ALL: [PhaseKind; 6] = [
        PhaseKind::Embedding,
        PhaseKind::Prefill,
        PhaseKind::Decode,
        PhaseKind::Softmax,
        PhaseKind::CopyProbsToCpu,
        PhaseKind::Sampling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseKind::Embedding => "embedding",
            PhaseKind::Prefill => "prefill",
            PhaseKind::Decode => "decode",
            PhaseKind::Softmax => "softmax",
            PhaseKind::CopyProbsToCpu => "copy_probs_to_cpu",
            PhaseKind::Sampling => "sampling",
        }
    }

    /// Phases that recur once per generated token carry a token index.
    pub fn is_per_token(self) -> bool {
        !matches!(self, PhaseKind::Embedding | PhaseKind::Prefill)
    }
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PhaseKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PhaseKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown phase kind `{s}`"))
    }
}

/// One timed occurrence of a semantic phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub kind: PhaseKind,
    pub turn: u32,
    pub token_index: Option<u32>,
    pub t_start_ns: TimestampNs,
    pub t_end_ns: TimestampNs,
}

impl PhaseRecord {
    pub fn duration_ns(&self) -> u64 {
        self.t_end_ns.since(self.t_start_ns)
    }
}

/// One device command: host enqueue time plus the four device lifecycle timestamps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub name: Arc<str>,
    pub queue_id: u32,
    pub t_cpu_enqueue_ns: TimestampNs,
    pub t_queued_ns: TimestampNs,
    pub t_submit_ns: TimestampNs,
    pub t_start_ns: TimestampNs,
    pub t_end_ns: TimestampNs,
}

impl KernelRecord {
    pub fn execution_ns(&self) -> u64 {
        self.t_end_ns.since(self.t_start_ns)
    }

    /// Checks `queued <= submit <= start <= end` and a non-empty name.
    pub fn validate(&self) -> Result<(), RecorderError> {
        if self.name.is_empty() {
            return Err(RecorderError::EmptyKernelName);
        }
        check_lifecycle_order(
            self.t_queued_ns,
            self.t_submit_ns,
            self.t_start_ns,
            self.t_end_ns,
        )
    }
}

/// The lifecycle inequality that failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderViolation {
    SubmitBeforeQueued,
    StartBeforeSubmit,
    EndBeforeStart,
}

impl fmt::Display for OrderViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderViolation::SubmitBeforeQueued => "t_queued_ns <= t_submit_ns",
            OrderViolation::StartBeforeSubmit => "t_submit_ns <= t_start_ns",
            OrderViolation::EndBeforeStart => "t_start_ns <= t_end_ns",
        })
    }
}

fn check_lifecycle_order(
    queued: TimestampNs,
    submit: TimestampNs,
    start: TimestampNs,
    end: TimestampNs,
) -> Result<(), RecorderError> {
    let violation = if submit < queued {
        OrderViolation::SubmitBeforeQueued
    } else if start < submit {
        OrderViolation::StartBeforeSubmit
    } else if end < start {
        OrderViolation::EndBeforeStart
    } else {
        return Ok(());
    };
    Err(RecorderError::TimestampOrderViolation(violation))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecorderError {
    #[error("session is sealed")]
    SessionSealed,
    #[error("phase handle does not belong to an open phase of this session")]
    UnknownHandle,
    #[error("phase already ended")]
    AlreadyEnded,
    #[error("phase `{requested}` overlaps open or earlier phase `{existing}`")]
    OverlappingPhase {
        requested: PhaseKind,
        existing: PhaseKind,
    },
    #[error("phase `{kind}` token index must be {}", if .0.is_per_token() { "present" } else { "absent" }, kind = .0)]
    TokenIndexMismatch(PhaseKind),
    #[error("phase ends before it starts")]
    PhaseEndBeforeStart,
    #[error("timestamp order violated: expected {0}")]
    TimestampOrderViolation(OrderViolation),
    #[error("kernel name is empty")]
    EmptyKernelName,
    #[error("session still has an open phase")]
    OpenPhaseRemaining,
    #[error("calibration needs at least {min} iterations, got {got}")]
    TooFewIterations { min: usize, got: usize },
}

/// Session-level metadata carried into the sealed trace.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionInfo {
    pub device_label: String,
    /// Offset that maps device timestamps onto the host clock
    /// (`host = device + offset`). `None` means the domains are not aligned.
    pub clock_offset_ns: Option<i64>,
    pub created_at: Option<String>,
    pub prompt_tokens: Option<u32>,
    pub output_tokens: Option<u32>,
}

impl SessionInfo {
    pub fn new(device_label: impl Into<String>) -> Self {
        SessionInfo {
            device_label: device_label.into(),
            ..Default::default()
        }
    }

    pub fn with_clock_offset(mut self, offset_ns: i64) -> Self {
        self.clock_offset_ns = Some(offset_ns);
        self
    }

    pub fn with_token_counts(mut self, prompt_tokens: u32, output_tokens: u32) -> Self {
        self.prompt_tokens = Some(prompt_tokens);
        self.output_tokens = Some(output_tokens);
        self
    }
}

/// Opaque token returned by [`TraceSession::begin_phase`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseHandle {
    session: u64,
    seq: u64,
}

impl PhaseHandle {
    /// Packs the handle into a single integer for foreign callers.
    pub fn to_raw(self) -> u64 {
        (self.session << 40) | (self.seq & ((1 << 40) - 1))
    }

    pub fn from_raw(raw: u64) -> Self {
        PhaseHandle {
            session: raw >> 40,
            seq: raw & ((1 << 40) - 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct OpenPhase {
    seq: u64,
    kind: PhaseKind,
    turn: u32,
    token_index: Option<u32>,
    t_start_ns: TimestampNs,
}

#[derive(Debug)]
struct SessionState {
    sealed: bool,
    phases: Vec<PhaseRecord>,
    kernels: Vec<KernelRecord>,
    names: HashMap<Box<str>, Arc<str>>,
    open: Option<OpenPhase>,
    next_seq: u64,
    last_phase: Option<(PhaseKind, TimestampNs)>,
}

static NEXT_SESSION_ID: AtomicU64 = AtomicU64::new(1);

/// Collects phase and kernel records until sealed.
#[derive(Debug)]
pub struct TraceSession {
    id: u64,
    info: SessionInfo,
    state: Mutex<SessionState>,
}

impl TraceSession {
    pub fn new(info: SessionInfo) -> Self {
        Self::with_capacity(info, 1024, 16 * 1024)
    }

    pub fn with_capacity(info: SessionInfo, phases: usize, kernels: usize) -> Self {
        TraceSession {
            id: NEXT_SESSION_ID.fetch_add(1, Ordering::Relaxed) & ((1 << 24) - 1),
            info,
            state: Mutex::new(SessionState {
                sealed: false,
                phases: Vec::with_capacity(phases),
                kernels: Vec::with_capacity(kernels),
                names: HashMap::new(),
                open: None,
                next_seq: 0,
                last_phase: None,
            }),
        }
    }

    pub fn info(&self) -> &SessionInfo {
        &self.info
    }

    fn lock(&self) -> MutexGuard<'_, SessionState> {
        // A panic while holding the lock leaves the buffers consistent.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Grows the record buffers so that the next `phases`/`kernels` records
    /// fit without reallocating.
    pub fn reserve(&self, phases: usize, kernels: usize) {
        let mut st = self.lock();
        st.phases.reserve(phases);
        st.kernels.reserve(kernels);
    }

    /// Registers a kernel name ahead of time so the first record call for it
    /// does not allocate.
    pub fn intern(&self, name: &str) -> Arc<str> {
        let mut st = self.lock();
        intern_locked(&mut st, name)
    }

    pub fn is_sealed(&self) -> bool {
        self.lock().sealed
    }

    pub fn begin_phase(
        &self,
        kind: PhaseKind,
        turn: u32,
        token_index: Option<u32>,
    ) -> Result<PhaseHandle, RecorderError> {
        let mut st = self.lock();
        if st.sealed {
            return Err(RecorderError::SessionSealed);
        }
        check_token_index(kind, token_index)?;
        if let Some(open) = st.open {
            return Err(RecorderError::OverlappingPhase {
                requested: kind,
                existing: open.kind,
            });
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        st.open = Some(OpenPhase {
            seq,
            kind,
            turn,
            token_index,
            t_start_ns: now(),
        });
        Ok(PhaseHandle {
            session: self.id,
            seq,
        })
    }

    pub fn end_phase(&self, handle: PhaseHandle) -> Result<PhaseRecord, RecorderError> {
        let t_end = now();
        let mut st = self.lock();
        if handle.session != self.id || handle.seq >= st.next_seq {
            return Err(RecorderError::UnknownHandle);
        }
        let open = match st.open {
            Some(open) if open.seq == handle.seq => open,
            _ => return Err(RecorderError::AlreadyEnded),
        };
        if st.sealed {
            return Err(RecorderError::SessionSealed);
        }
        st.open = None;
        let record = PhaseRecord {
            kind: open.kind,
            turn: open.turn,
            token_index: open.token_index,
            t_start_ns: open.t_start_ns,
            t_end_ns: t_end.max(open.t_start_ns),
        };
        st.last_phase = Some((record.kind, record.t_end_ns));
        st.phases.push(record.clone());
        Ok(record)
    }

    /// Appends a phase with externally supplied timestamps (replay, simulation).
    pub fn record_phase(&self, record: PhaseRecord) -> Result<(), RecorderError> {
        let mut st = self.lock();
        if st.sealed {
            return Err(RecorderError::SessionSealed);
        }
        check_token_index(record.kind, record.token_index)?;
        if record.t_end_ns < record.t_start_ns {
            return Err(RecorderError::PhaseEndBeforeStart);
        }
        if let Some(open) = st.open {
            return Err(RecorderError::OverlappingPhase {
                requested: record.kind,
                existing: open.kind,
            });
        }
        if let Some((kind, end)) = st.last_phase {
            if record.t_start_ns < end {
                return Err(RecorderError::OverlappingPhase {
                    requested: record.kind,
                    existing: kind,
                });
            }
        }
        st.last_phase = Some((record.kind, record.t_end_ns));
        st.phases.push(record);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn record_kernel(
        &self,
        name: &str,
        queue_id: u32,
        t_cpu_enqueue_ns: TimestampNs,
        t_queued_ns: TimestampNs,
        t_submit_ns: TimestampNs,
        t_start_ns: TimestampNs,
        t_end_ns: TimestampNs,
    ) -> Result<KernelRecord, RecorderError> {
        if name.is_empty() {
            return Err(RecorderError::EmptyKernelName);
        }
        check_lifecycle_order(t_queued_ns, t_submit_ns, t_start_ns, t_end_ns)?;
        let mut st = self.lock();
        if st.sealed {
            return Err(RecorderError::SessionSealed);
        }
        let name = intern_locked(&mut st, name);
        let record = KernelRecord {
            name,
            queue_id,
            t_cpu_enqueue_ns,
            t_queued_ns,
            t_submit_ns,
            t_start_ns,
            t_end_ns,
        };
        st.kernels.push(record.clone());
        Ok(record)
    }

    /// Sorts the records and freezes them into a [`Trace`]. The session
    /// rejects further records afterwards.
    pub fn seal(&self) -> Result<Trace, RecorderError> {
        let mut st = self.lock();
        if st.sealed {
            return Err(RecorderError::SessionSealed);
        }
        if st.open.is_some() {
            return Err(RecorderError::OpenPhaseRemaining);
        }
        st.sealed = true;
        let phases = std::mem::take(&mut st.phases);
        let kernels = std::mem::take(&mut st.kernels);
        drop(st);
        Trace::new(self.info.clone(), phases, kernels)
    }
}

fn intern_locked(st: &mut SessionState, name: &str) -> Arc<str> {
    if let Some(existing) = st.names.get(name) {
        return Arc::clone(existing);
    }
    let shared: Arc<str> = Arc::from(name);
    st.names.insert(Box::from(name), Arc::clone(&shared));
    shared
}

fn check_token_index(kind: PhaseKind, token_index: Option<u32>) -> Result<(), RecorderError> {
    if kind.is_per_token() == token_index.is_some() {
        Ok(())
    } else {
        Err(RecorderError::TokenIndexMismatch(kind))
    }
}

/// Immutable, time-sorted session of phase and kernel records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    info: SessionInfo,
    phases: Vec<PhaseRecord>,
    kernels: Vec<KernelRecord>,
}

impl Trace {
    /// Validates every record, sorts phases by start and kernels by queue
    /// time, and checks that phases do not overlap.
    pub fn new(
        info: SessionInfo,
        mut phases: Vec<PhaseRecord>,
        mut kernels: Vec<KernelRecord>,
    ) -> Result<Trace, RecorderError> {
        for p in &phases {
            check_token_index(p.kind, p.token_index)?;
            if p.t_end_ns < p.t_start_ns {
                return Err(RecorderError::PhaseEndBeforeStart);
            }
        }
        for k in &kernels {
            k.validate()?;
        }
        phases.sort_by_key(|p| (p.t_start_ns, p.t_end_ns));
        kernels.sort_by_key(|k| k.t_queued_ns);
        for pair in phases.windows(2) {
            if pair[1].t_start_ns < pair[0].t_end_ns {
                return Err(RecorderError::OverlappingPhase {
                    requested: pair[1].kind,
                    existing: pair[0].kind,
                });
            }
        }
        Ok(Trace {
            info,
            phases,
            kernels,
        })
    }

    pub fn empty(info: SessionInfo) -> Trace {
        Trace {
            info,
            phases: Vec::new(),
            kernels: Vec::new(),
        }
    }

    pub fn info(&self) -> &SessionInfo {
        &self.info
    }

    pub fn phases(&self) -> &[PhaseRecord] {
        &self.phases
    }

    pub fn kernels(&self) -> &[KernelRecord] {
        &self.kernels
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty() && self.kernels.is_empty()
    }

    pub fn clock_offset_ns(&self) -> Option<i64> {
        self.info.clock_offset_ns
    }

    /// Maps a device timestamp onto the host clock; `None` when unaligned.
    pub fn device_to_host(&self, t: TimestampNs) -> Option<i64> {
        let offset = self.info.clock_offset_ns?;
        i64::try_from(t.0).ok()?.checked_add(offset)
    }

    /// Host enqueue to device queued delay. `None` when the clocks are unaligned.
    pub fn enqueue_to_queued_ns(&self, k: &KernelRecord) -> Option<i64> {
        let queued = self.device_to_host(k.t_queued_ns)?;
        Some(queued - k.t_cpu_enqueue_ns.0 as i64)
    }
}

/// Clock resolution and per-record cost measured on this machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimerCalibration {
    pub resolution_ns: u64,
    pub overhead_ns_median: f64,
    pub iterations: usize,
}

pub const MIN_CALIBRATION_ITERATIONS: usize = 1000;

/// Measures the smallest nonzero clock step and the median cost of a full
/// `begin_phase`/`end_phase` pair.
pub fn calibrate_timer(iterations: usize) -> Result<TimerCalibration, RecorderError> {
    if iterations < MIN_CALIBRATION_ITERATIONS {
        return Err(RecorderError::TooFewIterations {
            min: MIN_CALIBRATION_ITERATIONS,
            got: iterations,
        });
    }

    let mut resolution = u64::MAX;
    for _ in 0..iterations {
        let a = now();
        let mut b = now();
        // Coarse clocks may return the same value many times in a row.
        let mut spins = 0;
        while b == a && spins < 10_000 {
            b = now();
            spins += 1;
        }
        let delta = b.since(a);
        if delta > 0 {
            resolution = resolution.min(delta);
        }
    }
    if resolution == u64::MAX {
        resolution = 1;
    }

    let session = TraceSession::with_capacity(SessionInfo::new("calibration"), iterations, 0);
    let mut costs = Vec::with_capacity(iterations);
    for i in 0..iterations {
        let t0 = now();
        let h = session
            .begin_phase(PhaseKind::Decode, 0, Some(i as u32))
            .expect("calibration session is open");
        session.end_phase(h).expect("handle is open");
        costs.push(now().since(t0));
    }
    costs.sort_unstable();
    let mid = costs.len() / 2;
    let median = if costs.len() % 2 == 0 {
        (costs[mid - 1] + costs[mid]) as f64 / 2.0
    } else {
        costs[mid] as f64
    };

    Ok(TimerCalibration {
        resolution_ns: resolution,
        overhead_ns_median: median,
        iterations,
    })
}
