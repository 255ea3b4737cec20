//! `lmmk` command-line front end.
//!
//! Every subcommand is a thin wrapper over library calls. Exit codes: 0 on
//! success, 1 on runtime or data errors, 2 on usage errors. Diagnostics go
//! to the error stream; results go to standard output or `--out`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use crate::metrics::{duplication_estimate, evaluate_pair, hq_from_measurements, HqInputs, MetricPair};
use crate::predictor::train_and_evaluate;
use crate::recorder::{calibrate_timer, PhaseKind, Trace};
use crate::sampler::{read_lengths, sample_subset, write_plan, DEFAULT_BINS};
use crate::sim::{simulate, DuplicationPlan, SimError, WorkloadSpec};
use crate::timeline::{
    aggregate_kernels, idle_gaps, kernel_span, phase_attribution, phase_idle, summarize_phase_idle,
    Interval, KernelAggregate,
};
use crate::trace_io::{
    chrome_trace_value, fmt_alpha, fmt_eps, read_jsonl, write_csv_report_to, write_jsonl, IdleRow,
    PhaseRow,
};

/// Environment variable that, when set, replaces any `--seed` value.
pub const SEED_ENV: &str = "LMMK_SEED";

#[derive(Debug, Parser)]
#[command(name = "lmmk", version, about = "Phase and kernel profiling toolkit for on-device LLM inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a synthetic workload and write its trace plus ground truth.
    Simulate(SimulateArgs),
    /// Idle time, kernel aggregates and phase attribution for a trace.
    Analyze(AnalyzeArgs),
    /// Accuracy, HQ score and duplication estimates.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Pick a prompt subset whose length histogram matches the corpus.
    Sample(SampleArgs),
    /// Fit a per-step latency model and score it on held-out steps.
    Predict(PredictArgs),
    /// Convert a trace for a timeline viewer.
    Export(ExportArgs),
    /// Measure clock resolution and recorder overhead.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `preset:<name>` or a path to a workload TOML file.
    #[arg(long)]
    pub workload: String,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub prompt_tokens: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub output_tokens: u32,
    /// Overrides the workload's jitter seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the workload's relative jitter sigma.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// `<kernel>:<n>` — run n extra copies after every invocation.
    #[arg(long, value_parser = parse_duplicate)]
    pub duplicate: Option<DuplicationPlan>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_duplicate(s: &str) -> Result<DuplicationPlan, String> {
    let (name, n) = s
        .rsplit_once(':')
        .ok_or_else(|| format!("expected <kernel>:<n>, got `{s}`"))?;
    let n: u32 = n.parse().map_err(|e| format!("bad duplication count `{n}`: {e}"))?;
    if name.is_empty() || n == 0 {
        return Err(format!("expected <kernel>:<n> with n >= 1, got `{s}`"));
    }
    Ok(DuplicationPlan::new(name, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub trace: PathBuf,
    #[arg(long)]
    pub idle: bool,
    #[arg(long)]
    pub aggregate: bool,
    #[arg(long)]
    pub phases: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Accuracy and scaled error of a latency pair, in ms.
    Accuracy {
        #[arg(long, allow_negative_numbers = true)]
        lm: f64,
        #[arg(long, allow_negative_numbers = true)]
        gt: f64,
    },
    /// Harmonic score of accuracy and speedup ratios.
    Hq {
        #[arg(long, allow_negative_numbers = true)]
        acc_q: f64,
        #[arg(long, allow_negative_numbers = true)]
        acc_f: f64,
        #[arg(long, allow_negative_numbers = true)]
        prefill_q: f64,
        #[arg(long, allow_negative_numbers = true)]
        prefill_f: f64,
        #[arg(long, allow_negative_numbers = true)]
        decode_q: f64,
        #[arg(long, allow_negative_numbers = true)]
        decode_f: f64,
    },
    /// Per-kernel latency from baseline and duplicated phase times.
    Duplication {
        #[arg(long, allow_negative_numbers = true)]
        base: f64,
        #[arg(long, allow_negative_numbers = true)]
        dup: f64,
        #[arg(long)]
        n: u64,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// One positive integer per line.
    #[arg(long)]
    pub lengths: PathBuf,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub trace: PathBuf,
    #[arg(long)]
    pub kernel: String,
    #[arg(long, default_value_t = 100)]
    pub train_steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Chrome,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub trace: PathBuf,
    #[arg(long, value_enum, default_value_t = ExportFormat::Chrome)]
    pub format: ExportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 10_000)]
    pub iterations: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = stdout.write_all(text.as_bytes());
            } else {
                let _ = stderr.write_all(text.as_bytes());
            }
            return if code == 0 { 0 } else { 2 };
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    match dispatch(cli.command, seed_env.as_deref(), stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "lmmk: {e}");
            e.exit_code()
        }
    }
}

fn seed_override(env: Option<&str>, flag: Option<u64>) -> Result<Option<u64>, CliError> {
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        None => Ok(flag),
    }
}

fn dispatch(command: Command, seed_env: Option<&str>, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate(a) => cmd_simulate(a, seed_env, stdout),
        Command::Analyze(a) => cmd_analyze(a, stdout),
        Command::Metrics(m) => cmd_metrics(m, stdout),
        Command::Sample(a) => cmd_sample(a, seed_env, stdout),
        Command::Predict(a) => cmd_predict(a, stdout),
        Command::Export(a) => cmd_export(a, stdout),
        Command::Calibrate(a) => cmd_calibrate(a, stdout),
    }
}

/// Path of the ground-truth sidecar written next to a simulated trace.
pub fn ground_truth_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".gt.json");
    PathBuf::from(s)
}

fn cmd_simulate(a: SimulateArgs, seed_env: Option<&str>, stdout: &mut dyn Write) -> Result<(), CliError> {
    // Anything wrong with the workload reference or overrides is a usage error.
    let mut spec = WorkloadSpec::resolve(&a.workload).map_err(usage)?;
    if let Some(seed) = seed_override(seed_env, a.seed)? {
        spec.jitter.seed = seed;
    }
    if let Some(sigma) = a.jitter {
        spec.jitter.sigma_rel = sigma;
    }
    spec.validate().map_err(usage)?;
    if let Some(plan) = &a.duplicate {
        if spec.kernel(&plan.kernel_name).is_none() {
            return Err(usage(SimError::UnknownKernel(plan.kernel_name.clone())));
        }
    }

    let (trace, truth) =
        simulate(&spec, a.prompt_tokens, a.output_tokens, a.duplicate.as_ref()).map_err(runtime)?;
    write_jsonl(&trace, &a.out).map_err(runtime)?;
    let gt_path = ground_truth_path(&a.out);
    std::fs::write(&gt_path, truth.to_json()).map_err(runtime)?;
    writeln!(
        stdout,
        "wrote {} ({} phases, {} kernels) and {}",
        a.out.display(),
        trace.phases().len(),
        trace.kernels().len(),
        gt_path.display()
    )
    .map_err(runtime)
}

/// Whole-trace analysis window: all phases (mapped to the device clock)
/// when clocks are aligned, otherwise the kernel span.
fn trace_window(trace: &Trace) -> Option<Interval> {
    let span = kernel_span(trace);
    match (trace.clock_offset_ns(), trace.phases().first(), trace.phases().last()) {
        (Some(offset), Some(first), Some(_)) => {
            let to_device = |t: u64| (t as i64 - offset).max(0) as u64;
            let end = trace.phases().iter().map(|p| p.t_end_ns.0).max().unwrap_or(0);
            let mut start = to_device(first.t_start_ns.0);
            let mut end = to_device(end);
            if let Some(s) = span {
                start = start.min(s.start_ns.0);
                end = end.max(s.end_ns.0);
            }
            Interval::new(start, end).ok()
        }
        _ => span,
    }
}

struct Analysis {
    idle: Option<Vec<IdleRow>>,
    aggregate: Option<Vec<KernelAggregate>>,
    phases: Option<Vec<PhaseRow>>,
}

fn analyze_trace(trace: &Trace, idle: bool, aggregate: bool, phases: bool) -> Result<Analysis, CliError> {
    let idle = if idle {
        let mut rows = Vec::new();
        if let Some(w) = trace_window(trace) {
            let r = idle_gaps(trace, w);
            rows.push(IdleRow {
                scope: "trace".into(),
                window_ms: w.len() as f64 / 1e6,
                busy_ms: r.busy_ns as f64 / 1e6,
                idle_ms: r.idle_ns as f64 / 1e6,
                idle_fraction: r.idle_fraction,
                gaps: r.gaps.len(),
            });
        }
        if trace.clock_offset_ns().is_some() {
            for kind in PhaseKind::ALL {
                let per = phase_idle(trace, kind).map_err(runtime)?;
                if per.is_empty() {
                    continue;
                }
                let s = summarize_phase_idle(&per);
                rows.push(IdleRow {
                    scope: kind.as_str().into(),
                    window_ms: s.window_ns as f64 / 1e6,
                    busy_ms: s.busy_ns as f64 / 1e6,
                    idle_ms: s.idle_ns as f64 / 1e6,
                    idle_fraction: s.idle_fraction,
                    gaps: per.iter().map(|p| p.report.gaps.len()).sum(),
                });
            }
        }
        Some(rows)
    } else {
        None
    };
    let aggregate = aggregate.then(|| aggregate_kernels(trace, None));
    let phases = if phases {
        let map = phase_attribution(trace).map_err(runtime)?;
        Some(
            map.into_iter()
                .map(|(bucket, stats)| PhaseRow { bucket, stats })
                .collect(),
        )
    } else {
        None
    };
    Ok(Analysis {
        idle,
        aggregate,
        phases,
    })
}

fn analysis_json(a: &Analysis) -> serde_json::Value {
    let mut doc = serde_json::Map::new();
    if let Some(rows) = &a.idle {
        let v: Vec<_> = rows
            .iter()
            .map(|r| {
                json!({
                    "scope": r.scope,
                    "window_ms": r.window_ms,
                    "busy_ms": r.busy_ms,
                    "idle_ms": r.idle_ms,
                    "idle_fraction": r.idle_fraction,
                    "gaps": r.gaps,
                })
            })
            .collect();
        doc.insert("idle".into(), v.into());
    }
    if let Some(rows) = &a.aggregate {
        doc.insert("aggregate".into(), serde_json::to_value(rows).expect("serializable"));
    }
    if let Some(rows) = &a.phases {
        let v: Vec<_> = rows
            .iter()
            .map(|r| {
                json!({
                    "phase": r.bucket.as_str(),
                    "occurrences": r.stats.occurrences,
                    "phase_wall_ns": r.stats.phase_wall_ns,
                    "device_busy_ns": r.stats.device_busy_ns,
                    "kernel_count": r.stats.kernel_count,
                })
            })
            .collect();
        doc.insert("phases".into(), v.into());
    }
    doc.into()
}

fn with_output(
    out: Option<&Path>,
    stdout: &mut dyn Write,
    f: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).map_err(runtime)?);
            f(&mut w)?;
            w.flush().map_err(runtime)
        }
        None => f(stdout),
    }
}

fn cmd_analyze(a: AnalyzeArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let trace = read_jsonl(&a.trace).map_err(|e| runtime(format!("{}: {e}", a.trace.display())))?;
    let all = !(a.idle || a.aggregate || a.phases);
    let analysis = analyze_trace(&trace, a.idle || all, a.aggregate || all, a.phases || all)?;
    with_output(a.out.as_deref(), stdout, |w| match a.report {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut *w, &analysis_json(&analysis)).map_err(runtime)?;
            w.write_all(b"\n").map_err(runtime)
        }
        ReportFormat::Csv => {
            // Sections are separated by one blank line, in a fixed order.
            let mut first = true;
            let mut sep = |w: &mut dyn Write| -> Result<(), CliError> {
                if !std::mem::take(&mut first) {
                    w.write_all(b"\n").map_err(runtime)?;
                }
                Ok(())
            };
            if let Some(rows) = &analysis.idle {
                sep(w)?;
                write_csv_report_to(rows, &mut *w).map_err(runtime)?;
            }
            if let Some(rows) = &analysis.aggregate {
                sep(w)?;
                write_csv_report_to(rows, &mut *w).map_err(runtime)?;
            }
            if let Some(rows) = &analysis.phases {
                sep(w)?;
                write_csv_report_to(rows, &mut *w).map_err(runtime)?;
            }
            Ok(())
        }
    })
}

fn cmd_metrics(m: MetricsCommand, stdout: &mut dyn Write) -> Result<(), CliError> {
    let line = match m {
        MetricsCommand::Accuracy { lm, gt } => {
            let r = evaluate_pair(MetricPair::new(lm, gt)).map_err(usage)?;
            format!(
                "alpha={} eps_star={}",
                fmt_alpha(r.alpha_pct),
                fmt_eps(r.eps_star_us_per_ms)
            )
        }
        MetricsCommand::Hq {
            acc_q,
            acc_f,
            prefill_q,
            prefill_f,
            decode_q,
            decode_f,
        } => {
            let score = hq_from_measurements(&HqInputs {
                task_id: "cli".into(),
                acc_quant: acc_q,
                acc_full: acc_f,
                prefill_quant_ms: prefill_q,
                prefill_full_ms: prefill_f,
                decode_quant_ms: decode_q,
                decode_full_ms: decode_f,
            })
            .map_err(usage)?;
            format!("{score:.4}")
        }
        MetricsCommand::Duplication { base, dup, n } => {
            let t = duplication_estimate(base, dup, n).map_err(usage)?;
            format!("{t:.4}")
        }
    };
    writeln!(stdout, "{line}").map_err(runtime)
}

fn cmd_sample(a: SampleArgs, seed_env: Option<&str>, stdout: &mut dyn Write) -> Result<(), CliError> {
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        return Err(usage(format!("--fraction must be in (0, 1], got {}", a.fraction)));
    }
    if a.bins < 1 {
        return Err(usage("--bins must be at least 1"));
    }
    let seed = seed_override(seed_env, Some(a.seed))?.unwrap_or(a.seed);
    let file = File::open(&a.lengths).map_err(|e| runtime(format!("{}: {e}", a.lengths.display())))?;
    let lengths = read_lengths(BufReader::new(file)).map_err(runtime)?;
    let plan = sample_subset(&lengths, a.fraction, a.bins, seed).map_err(runtime)?;
    match &a.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path).map_err(runtime)?);
            write_plan(&plan, &mut w).map_err(runtime)?;
            w.flush().map_err(runtime)?;
            writeln!(
                stdout,
                "size={} achieved_kl_nats={:.6}",
                plan.indices.len(),
                plan.achieved_kl_nats
            )
            .map_err(runtime)
        }
        None => write_plan(&plan, &mut *stdout).map_err(runtime),
    }
}

fn cmd_predict(a: PredictArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let trace = read_jsonl(&a.trace).map_err(|e| runtime(format!("{}: {e}", a.trace.display())))?;
    let r = train_and_evaluate(&trace, &a.kernel, a.train_steps).map_err(runtime)?;
    writeln!(
        stdout,
        "kernel={} train_steps={} holdout_steps={}\n\
         slope_ns_per_step={:.4} intercept_ns={:.4} mape={:.4}\n\
         step_slope_ns_per_step={:.4} step_intercept_ns={:.4} constant_floor_ns={:.4} step_mape={:.4}",
        a.kernel,
        r.kernel_model.trained_steps,
        r.holdout_steps,
        r.kernel_model.slope_ns_per_step,
        r.kernel_model.intercept_ns,
        r.kernel_eval.mape,
        r.step_model.slope_ns_per_step,
        r.step_model.intercept_ns,
        r.constant_floor_ns,
        r.step_eval.mape,
    )
    .map_err(runtime)
}

fn cmd_export(a: ExportArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let trace = read_jsonl(&a.trace).map_err(|e| runtime(format!("{}: {e}", a.trace.display())))?;
    let ExportFormat::Chrome = a.format;
    with_output(a.out.as_deref(), stdout, |w| {
        serde_json::to_writer(&mut *w, &chrome_trace_value(&trace)).map_err(runtime)?;
        w.write_all(b"\n").map_err(runtime)
    })
}

fn cmd_calibrate(a: CalibrateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cal = calibrate_timer(a.iterations).map_err(usage)?;
    serde_json::to_writer(&mut *stdout, &cal).map_err(runtime)?;
    stdout.write_all(b"\n").map_err(runtime)
}

/// Entry point used by the `lmmk` binary.
pub fn main_with_env() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    let code = run(std::env::args_os(), &mut out, &mut err);
    let _ = out.flush();
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let mut full = vec!["lmmk"];
        full.extend_from_slice(args);
        let code = run(full, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn accuracy_line() {
        let (code, out, _) = call(&["metrics", "accuracy", "--lm", "0.8038", "--gt", "0.7763"]);
        assert_eq!(code, 0);
        assert_eq!(out, "alpha=96.46 eps_star=35.424\n");
    }

    #[test]
    fn metric_usage_errors() {
        assert_eq!(call(&["metrics", "accuracy", "--lm", "1", "--gt", "0"]).0, 2);
        assert_eq!(call(&["metrics", "duplication", "--base", "1", "--dup", "2", "--n", "0"]).0, 2);
        assert_eq!(call(&["metrics", "bogus"]).0, 2);
    }

    #[test]
    fn hq_and_duplication() {
        let hq = call(&[
            "metrics", "hq", "--acc-q", "0.5", "--acc-f", "0.5", "--prefill-q", "3", "--prefill-f", "3",
            "--decode-q", "7", "--decode-f", "7",
        ]);
        assert_eq!((hq.0, hq.1.as_str()), (0, "1.0000\n"));
        let d = call(&["metrics", "duplication", "--base", "100", "--dup", "150", "--n", "50"]);
        assert_eq!((d.0, d.1.as_str()), (0, "1.0000\n"));
    }

    #[test]
    fn calibrate_minimum() {
        let (code, _, err) = call(&["calibrate", "--iterations", "10"]);
        assert_eq!(code, 2);
        assert!(err.contains("1000"), "{err}");
    }

    #[test]
    fn duplicate_flag_parsing() {
        assert_eq!(
            parse_duplicate("batch_decode_paged_kv:50").unwrap(),
            DuplicationPlan::new("batch_decode_paged_kv", 50)
        );
        assert!(parse_duplicate("k").is_err());
        assert!(parse_duplicate("k:0").is_err());
    }

    #[test]
    fn seed_env_wins() {
        assert_eq!(seed_override(Some("7"), Some(3)).unwrap(), Some(7));
        assert_eq!(seed_override(None, Some(3)).unwrap(), Some(3));
        assert!(seed_override(Some("x"), None).is_err());
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(ground_truth_path(Path::new("a/t.jsonl")), PathBuf::from("a/t.jsonl.gt.json"));
    }
}
