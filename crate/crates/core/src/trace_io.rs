//! Trace and report file formats.
//!
//! * JSONL traces: a `session` header line followed by one `phase` or
//!   `kernel` object per line, integer nanoseconds only.
//! * Trace-viewer JSON (`{"traceEvents":[...]}`) with complete events in
//!   fractional microseconds.
//! * CSV reports with fixed rounding: latencies to 4 decimals (ms),
//!   accuracy to 2, scaled error to 3.
//!
//! Output is UTF-8 with LF line endings and a fixed key order, so files
//! are byte-stable for a given trace. See `docs/formats.md`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::metrics::{evaluate_pair, MetricPair, MetricsError};
use crate::recorder::{
    KernelRecord, PhaseKind, PhaseRecord, RecorderError, SessionInfo, TimestampNs, Trace,
};
use crate::timeline::{lifecycle, KernelAggregate, PhaseBucket, PhaseStats};

pub const TRACE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: RecorderError,
    },
    #[error("unknown trace format version {0}")]
    UnknownVersion(u32),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl TraceIoError {
    /// 1-based line number for parse and validation failures.
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceIoError::Parse { line, .. } | TraceIoError::Invalid { line, .. } => Some(*line),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFileHeader {
    pub version: u32,
    pub device_label: String,
    pub clock_offset_ns: Option<i64>,
    #[serde(default)]
    pub prompt_tokens: Option<u32>,
    #[serde(default)]
    pub output_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct PhaseLine {
    kind: PhaseKind,
    turn: u32,
    token: Option<u32>,
    t_start_ns: u64,
    t_end_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct KernelLine {
    name: String,
    queue: u32,
    t_cpu_enqueue_ns: u64,
    t_queued_ns: u64,
    t_submit_ns: u64,
    t_start_ns: u64,
    t_end_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "lowercase", deny_unknown_fields)]
enum Line {
    Session(TraceFileHeader),
    Phase(PhaseLine),
    Kernel(KernelLine),
}

fn header_of(info: &SessionInfo) -> TraceFileHeader {
    TraceFileHeader {
        version: TRACE_FORMAT_VERSION,
        device_label: info.device_label.clone(),
        clock_offset_ns: info.clock_offset_ns,
        prompt_tokens: info.prompt_tokens,
        output_tokens: info.output_tokens,
        created_at: info.created_at.clone(),
    }
}

pub fn write_jsonl_to(trace: &Trace, mut out: impl Write) -> io::Result<()> {
    let line = |l: &Line, out: &mut dyn Write| -> io::Result<()> {
        serde_json::to_writer(&mut *out, l)?;
        out.write_all(b"\n")
    };
    line(&Line::Session(header_of(trace.info())), &mut out)?;
    for p in trace.phases() {
        line(
            &Line::Phase(PhaseLine {
                kind: p.kind,
                turn: p.turn,
                token: p.token_index,
                t_start_ns: p.t_start_ns.0,
                t_end_ns: p.t_end_ns.0,
            }),
            &mut out,
        )?;
    }
    for k in trace.kernels() {
        line(
            &Line::Kernel(KernelLine {
                name: k.name.to_string(),
                queue: k.queue_id,
                t_cpu_enqueue_ns: k.t_cpu_enqueue_ns.0,
                t_queued_ns: k.t_queued_ns.0,
                t_submit_ns: k.t_submit_ns.0,
                t_start_ns: k.t_start_ns.0,
                t_end_ns: k.t_end_ns.0,
            }),
            &mut out,
        )?;
    }
    out.flush()
}

pub fn write_jsonl(trace: &Trace, path: &Path) -> Result<(), TraceIoError> {
    let out = BufWriter::new(File::create(path)?);
    write_jsonl_to(trace, out)?;
    Ok(())
}

pub fn read_jsonl_from(reader: impl BufRead) -> Result<Trace, TraceIoError> {
    let mut header: Option<TraceFileHeader> = None;
    let mut phases = Vec::new();
    let mut kernels: Vec<KernelRecord> = Vec::new();
    let mut names: std::collections::HashMap<String, Arc<str>> = Default::default();

    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| TraceIoError::Parse {
            line: n,
            message: e.to_string(),
        })?;
        match (parsed, &header) {
            (Line::Session(h), None) => {
                if h.version != TRACE_FORMAT_VERSION {
                    return Err(TraceIoError::UnknownVersion(h.version));
                }
                header = Some(h);
            }
            (Line::Session(_), Some(_)) => {
                return Err(TraceIoError::Parse {
                    line: n,
                    message: "duplicate session header".into(),
                })
            }
            (_, None) => {
                return Err(TraceIoError::Parse {
                    line: n,
                    message: "first line must be the session header".into(),
                })
            }
            (Line::Phase(p), Some(_)) => {
                let record = PhaseRecord {
                    kind: p.kind,
                    turn: p.turn,
                    token_index: p.token,
                    t_start_ns: TimestampNs(p.t_start_ns),
                    t_end_ns: TimestampNs(p.t_end_ns),
                };
                // Validate per line so errors carry the line number.
                Trace::new(SessionInfo::default(), vec![record.clone()], Vec::new())
                    .map_err(|source| TraceIoError::Invalid { line: n, source })?;
                phases.push(record);
            }
            (Line::Kernel(k), Some(_)) => {
                let name = names
                    .entry(k.name.clone())
                    .or_insert_with(|| Arc::from(k.name.as_str()))
                    .clone();
                let record = KernelRecord {
                    name,
                    queue_id: k.queue,
                    t_cpu_enqueue_ns: TimestampNs(k.t_cpu_enqueue_ns),
                    t_queued_ns: TimestampNs(k.t_queued_ns),
                    t_submit_ns: TimestampNs(k.t_submit_ns),
                    t_start_ns: TimestampNs(k.t_start_ns),
                    t_end_ns: TimestampNs(k.t_end_ns),
                };
                record
                    .validate()
                    .map_err(|source| TraceIoError::Invalid { line: n, source })?;
                kernels.push(record);
            }
        }
    }

    let header = header.ok_or(TraceIoError::Parse {
        line: 1,
        message: "missing session header".into(),
    })?;
    let info = SessionInfo {
        device_label: header.device_label,
        clock_offset_ns: header.clock_offset_ns,
        created_at: header.created_at,
        prompt_tokens: header.prompt_tokens,
        output_tokens: header.output_tokens,
    };
    Trace::new(info, phases, kernels).map_err(|source| TraceIoError::Invalid { line: 0, source })
}

pub fn read_jsonl(path: &Path) -> Result<Trace, TraceIoError> {
    read_jsonl_from(BufReader::new(File::open(path)?))
}

fn micros(ns: u64) -> f64 {
    ns as f64 / 1000.0
}

/// Builds the trace-viewer document: phases on `tid` 0, kernels on
/// `queue_id + 1`.
pub fn chrome_trace_value(trace: &Trace) -> serde_json::Value {
    let mut events = Vec::with_capacity(trace.phases().len() + trace.kernels().len());
    for p in trace.phases() {
        events.push(json!({
            "name": p.kind.as_str(),
            "cat": "phase",
            "ph": "X",
            "ts": micros(p.t_start_ns.0),
            "dur": micros(p.duration_ns()),
            "pid": 1,
            "tid": 0,
            "args": { "turn": p.turn, "token": p.token_index },
        }));
    }
    for k in trace.kernels() {
        let l = lifecycle(k);
        events.push(json!({
            "name": &*k.name,
            "cat": "kernel",
            "ph": "X",
            "ts": micros(k.t_start_ns.0),
            "dur": micros(l.execution_ns),
            "pid": 1,
            "tid": k.queue_id as u64 + 1,
            "args": { "queuing_us": micros(l.queuing_ns), "dispatch_us": micros(l.dispatch_ns) },
        }));
    }
    json!({ "traceEvents": events })
}

pub fn export_chrome_trace_to(trace: &Trace, mut out: impl Write) -> io::Result<()> {
    serde_json::to_writer(&mut out, &chrome_trace_value(trace))?;
    out.write_all(b"\n")?;
    out.flush()
}

pub fn export_chrome_trace(trace: &Trace, path: &Path) -> Result<(), TraceIoError> {
    export_chrome_trace_to(trace, BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// A row type with a fixed header and pre-formatted fields.
pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

pub fn fmt_ms(ms: f64) -> String {
    format!("{ms:.4}")
}

pub fn fmt_alpha(alpha: f64) -> String {
    format!("{alpha:.2}")
}

pub fn fmt_eps(eps: f64) -> String {
    format!("{eps:.3}")
}

fn ns_to_ms(ns: f64) -> f64 {
    ns / 1e6
}

/// Profiler-vs-ground-truth comparison for one phase or kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub group: String,
    pub item: String,
    pub t_lm_ms: f64,
    pub t_gt_ms: f64,
    pub alpha_pct: f64,
    pub eps_star_us_per_ms: f64,
}

impl AccuracyRow {
    pub fn new(group: impl Into<String>, item: impl Into<String>, pair: MetricPair) -> Result<Self, MetricsError> {
        let r = evaluate_pair(pair)?;
        Ok(AccuracyRow {
            group: group.into(),
            item: item.into(),
            t_lm_ms: pair.t_lm_ms,
            t_gt_ms: pair.t_gt_ms,
            alpha_pct: r.alpha_pct,
            eps_star_us_per_ms: r.eps_star_us_per_ms,
        })
    }
}

impl CsvRow for AccuracyRow {
    fn header() -> &'static [&'static str] {
        &["group", "item", "t_lm_ms", "t_gt_ms", "alpha_pct", "eps_star_us_per_ms"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.group.clone(),
            self.item.clone(),
            fmt_ms(self.t_lm_ms),
            fmt_ms(self.t_gt_ms),
            fmt_alpha(self.alpha_pct),
            fmt_eps(self.eps_star_us_per_ms),
        ]
    }
}

impl CsvRow for KernelAggregate {
    fn header() -> &'static [&'static str] {
        &["name", "count", "mean_ms", "total_ms", "share"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.name.to_string(),
            self.invocation_count.to_string(),
            fmt_ms(ns_to_ms(self.mean_execution_ns)),
            fmt_ms(ns_to_ms(self.total_execution_ns as f64)),
            format!("{:.4}", self.share_of_busy),
        ]
    }
}

/// One phase bucket from a phase attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseRow {
    pub bucket: PhaseBucket,
    pub stats: PhaseStats,
}

impl CsvRow for PhaseRow {
    fn header() -> &'static [&'static str] {
        &["phase", "occurrences", "wall_ms", "busy_ms", "kernel_count"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.bucket.as_str().to_string(),
            self.stats.occurrences.to_string(),
            fmt_ms(ns_to_ms(self.stats.phase_wall_ns as f64)),
            fmt_ms(ns_to_ms(self.stats.device_busy_ns as f64)),
            self.stats.kernel_count.to_string(),
        ]
    }
}

/// Idle summary for a named window.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleRow {
    pub scope: String,
    pub window_ms: f64,
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub idle_fraction: f64,
    pub gaps: usize,
}

impl CsvRow for IdleRow {
    fn header() -> &'static [&'static str] {
        &["scope", "window_ms", "busy_ms", "idle_ms", "idle_fraction", "gaps"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.scope.clone(),
            fmt_ms(self.window_ms),
            fmt_ms(self.busy_ms),
            fmt_ms(self.idle_ms),
            format!("{:.4}", self.idle_fraction),
            self.gaps.to_string(),
        ]
    }
}

pub fn write_csv_report_to<R: CsvRow>(rows: &[R], out: impl Write) -> Result<(), TraceIoError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(R::header())?;
    for r in rows {
        w.write_record(r.fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_report<R: CsvRow>(rows: &[R], path: &Path) -> Result<(), TraceIoError> {
    write_csv_report_to(rows, BufWriter::new(File::create(path)?))
}
