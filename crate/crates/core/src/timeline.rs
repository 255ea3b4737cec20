//! Timeline reconstruction over sealed traces: idle gaps, per-kernel
//! aggregates, lifecycle breakdowns and phase attribution.
//!
//! Busy time is the union of kernel execution intervals `[t_start, t_end)`
//! across all queues. Queuing and dispatch time never count as busy.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recorder::{KernelRecord, PhaseKind, PhaseRecord, TimestampNs, Trace};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TimelineError {
    #[error("interval end {end} precedes start {start}")]
    MalformedInterval { start: u64, end: u64 },
    #[error("trace has no clock offset; host and device timestamps cannot be compared")]
    UnalignedClocks,
}

/// Half-open interval `[start_ns, end_ns)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start_ns: TimestampNs,
    pub end_ns: TimestampNs,
}

impl Interval {
    pub fn new(start_ns: u64, end_ns: u64) -> Result<Interval, TimelineError> {
        if end_ns < start_ns {
            return Err(TimelineError::MalformedInterval {
                start: start_ns,
                end: end_ns,
            });
        }
        Ok(Interval {
            start_ns: TimestampNs(start_ns),
            end_ns: TimestampNs(end_ns),
        })
    }

    pub fn len(&self) -> u64 {
        self.end_ns.since(self.start_ns)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn clip(&self, start: u64, end: u64) -> Option<(u64, u64)> {
        let s = start.max(self.start_ns.0);
        let e = end.min(self.end_ns.0);
        (s < e).then_some((s, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifecycleBreakdown {
    pub queuing_ns: u64,
    pub dispatch_ns: u64,
    pub execution_ns: u64,
}

impl LifecycleBreakdown {
    pub fn total_ns(&self) -> u64 {
        self.queuing_ns + self.dispatch_ns + self.execution_ns
    }
}

/// Splits a kernel's device lifetime into queuing, dispatch and execution.
pub fn lifecycle(record: &KernelRecord) -> LifecycleBreakdown {
    LifecycleBreakdown {
        queuing_ns: record.t_submit_ns.since(record.t_queued_ns),
        dispatch_ns: record.t_start_ns.since(record.t_submit_ns),
        execution_ns: record.t_end_ns.since(record.t_start_ns),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleReport {
    pub window: Interval,
    pub busy_ns: u64,
    pub idle_ns: u64,
    pub idle_fraction: f64,
    pub gaps: Vec<Interval>,
}

/// Idle analysis of `window` over every kernel in the trace.
pub fn idle_gaps(trace: &Trace, window: Interval) -> IdleReport {
    idle_gaps_from(
        window,
        trace
            .kernels()
            .iter()
            .map(|k| (k.t_start_ns.0, k.t_end_ns.0)),
    )
}

/// Idle analysis restricted to one device queue.
pub fn idle_gaps_for_queue(trace: &Trace, window: Interval, queue_id: u32) -> IdleReport {
    idle_gaps_from(
        window,
        trace
            .kernels()
            .iter()
            .filter(|k| k.queue_id == queue_id)
            .map(|k| (k.t_start_ns.0, k.t_end_ns.0)),
    )
}

/// Sweep over busy intervals (`start`, `end` in ns) clipped to `window`.
pub fn idle_gaps_from(
    window: Interval,
    intervals: impl IntoIterator<Item = (u64, u64)>,
) -> IdleReport {
    let mut clipped: Vec<(u64, u64)> = intervals
        .into_iter()
        .filter_map(|(s, e)| window.clip(s, e))
        .collect();
    clipped.sort_unstable();

    let mut busy = 0u64;
    let mut gaps = Vec::new();
    let mut cursor = window.start_ns.0;
    for (s, e) in clipped {
        if s > cursor {
            gaps.push(Interval {
                start_ns: TimestampNs(cursor),
                end_ns: TimestampNs(s),
            });
        }
        if e > cursor {
            busy += e - s.max(cursor);
            cursor = e;
        }
    }
    if cursor < window.end_ns.0 {
        gaps.push(Interval {
            start_ns: TimestampNs(cursor),
            end_ns: window.end_ns,
        });
    }

    let len = window.len();
    let idle = len - busy;
    IdleReport {
        window,
        busy_ns: busy,
        idle_ns: idle,
        idle_fraction: if len == 0 {
            0.0
        } else {
            idle as f64 / len as f64
        },
        gaps,
    }
}

/// Interval from the earliest kernel start to the latest kernel end.
pub fn kernel_span(trace: &Trace) -> Option<Interval> {
    let start = trace.kernels().iter().map(|k| k.t_start_ns).min()?;
    let end = trace.kernels().iter().map(|k| k.t_end_ns).max()?;
    Some(Interval {
        start_ns: start,
        end_ns: end,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelAggregate {
    pub name: Arc<str>,
    pub invocation_count: u64,
    pub total_execution_ns: u64,
    pub mean_execution_ns: f64,
    pub share_of_busy: f64,
}

/// Groups kernels by name. With a window, only kernels whose `t_start`
/// lies in `[start, end)` are included. Sorted by total time, descending.
pub fn aggregate_kernels(trace: &Trace, window: Option<Interval>) -> Vec<KernelAggregate> {
    aggregate_records(trace.kernels().iter().filter(|k| match window {
        Some(w) => k.t_start_ns >= w.start_ns && k.t_start_ns < w.end_ns,
        None => true,
    }))
}

pub fn aggregate_records<'a>(
    records: impl IntoIterator<Item = &'a KernelRecord>,
) -> Vec<KernelAggregate> {
    let mut groups: HashMap<Arc<str>, (u64, u64)> = HashMap::new();
    for k in records {
        let e = groups.entry(Arc::clone(&k.name)).or_default();
        e.0 += 1;
        e.1 += k.execution_ns();
    }
    let busy: u64 = groups.values().map(|(_, t)| t).sum();
    let mut out: Vec<KernelAggregate> = groups
        .into_iter()
        .map(|(name, (count, total))| KernelAggregate {
            name,
            invocation_count: count,
            total_execution_ns: total,
            mean_execution_ns: total as f64 / count as f64,
            share_of_busy: if busy == 0 {
                0.0
            } else {
                total as f64 / busy as f64
            },
        })
        .collect();
    out.sort_by(|a, b| {
        b.total_execution_ns
            .cmp(&a.total_execution_ns)
            .then_with(|| a.name.cmp(&b.name))
    });
    out
}

/// Attribution target for a kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhaseBucket {
    Phase(PhaseKind),
    Unattributed,
}

impl PhaseBucket {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseBucket::Phase(k) => k.as_str(),
            PhaseBucket::Unattributed => "unattributed",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub device_busy_ns: u64,
    pub phase_wall_ns: u64,
    pub kernel_count: u64,
    pub occurrences: u64,
}

/// Index of the phase whose closed interval `[start, end]` contains the
/// host time `t`; at a shared boundary the earlier phase wins.
fn containing_phase(phases: &[PhaseRecord], t: i64) -> Option<usize> {
    // First phase whose end is >= t.
    let idx = phases.partition_point(|p| (p.t_end_ns.0 as i64) < t);
    let p = phases.get(idx)?;
    (p.t_start_ns.0 as i64 <= t).then_some(idx)
}

/// For each kernel, the index into `trace.phases()` of the phase that
/// contains its start time.
pub fn kernel_phase_indices(trace: &Trace) -> Result<Vec<Option<usize>>, TimelineError> {
    trace.clock_offset_ns().ok_or(TimelineError::UnalignedClocks)?;
    let phases = trace.phases();
    trace
        .kernels()
        .iter()
        .map(|k| {
            let host = trace
                .device_to_host(k.t_start_ns)
                .ok_or(TimelineError::UnalignedClocks)?;
            Ok(containing_phase(phases, host))
        })
        .collect()
}

/// Per-phase wall time and device busy time, with kernels attributed by
/// start-time containment.
pub fn phase_attribution(trace: &Trace) -> Result<BTreeMap<PhaseBucket, PhaseStats>, TimelineError> {
    let owners = kernel_phase_indices(trace)?;
    let mut out: BTreeMap<PhaseBucket, PhaseStats> = BTreeMap::new();
    for p in trace.phases() {
        let s = out.entry(PhaseBucket::Phase(p.kind)).or_default();
        s.phase_wall_ns += p.duration_ns();
        s.occurrences += 1;
    }
    for (k, owner) in trace.kernels().iter().zip(owners) {
        let bucket = match owner {
            Some(i) => PhaseBucket::Phase(trace.phases()[i].kind),
            None => PhaseBucket::Unattributed,
        };
        let s = out.entry(bucket).or_default();
        s.device_busy_ns += k.execution_ns();
        s.kernel_count += 1;
    }
    Ok(out)
}

/// Idle report for one phase occurrence, in device time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseIdle {
    pub kind: PhaseKind,
    pub turn: u32,
    pub token_index: Option<u32>,
    pub report: IdleReport,
}

/// Idle analysis of every occurrence of `kind`, each phase window mapped
/// into the device clock domain.
pub fn phase_idle(trace: &Trace, kind: PhaseKind) -> Result<Vec<PhaseIdle>, TimelineError> {
    let offset = trace.clock_offset_ns().ok_or(TimelineError::UnalignedClocks)?;
    let to_device = |t: TimestampNs| (t.0 as i64 - offset).max(0) as u64;
    let mut busy_intervals: Vec<(u64, u64)> = trace
        .kernels()
        .iter()
        .map(|k| (k.t_start_ns.0, k.t_end_ns.0))
        .collect();
    busy_intervals.sort_unstable();

    let mut out = Vec::new();
    for p in trace.phases().iter().filter(|p| p.kind == kind) {
        let window = Interval {
            start_ns: TimestampNs(to_device(p.t_start_ns)),
            end_ns: TimestampNs(to_device(p.t_end_ns)),
        };
        // Only intervals starting before the window end can intersect it.
        let upto = busy_intervals.partition_point(|&(s, _)| s < window.end_ns.0);
        let report = idle_gaps_from(
            window,
            busy_intervals[..upto]
                .iter()
                .copied()
                .filter(|&(_, e)| e > window.start_ns.0),
        );
        out.push(PhaseIdle {
            kind: p.kind,
            turn: p.turn,
            token_index: p.token_index,
            report,
        });
    }
    Ok(out)
}

/// Summed idle over all occurrences of a phase kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseIdleSummary {
    pub occurrences: usize,
    pub window_ns: u64,
    pub busy_ns: u64,
    pub idle_ns: u64,
    pub idle_fraction: f64,
}

pub fn summarize_phase_idle(reports: &[PhaseIdle]) -> PhaseIdleSummary {
    let window: u64 = reports.iter().map(|r| r.report.window.len()).sum();
    let busy: u64 = reports.iter().map(|r| r.report.busy_ns).sum();
    let idle = window - busy;
    PhaseIdleSummary {
        occurrences: reports.len(),
        window_ns: window,
        busy_ns: busy,
        idle_ns: idle,
        idle_fraction: if window == 0 {
            0.0
        } else {
            idle as f64 / window as f64
        },
    }
}
