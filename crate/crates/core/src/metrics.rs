//! Profiling-fidelity and quantization metrics.
//!
//! * accuracy `α = (1 − |t_lm − t_gt| / t_gt) · 100` (percent, may go negative)
//! * scaled error `ε* = 1000 · |t_lm − t_gt| / t_gt` (µs of error per ms of truth)
//! * Harmonic Quantization score: the harmonic mean of the accuracy ratio
//!   and the prefill/decode speedup ratios
//! * the kernel-duplication ground-truth estimator and its `n` rule
//!
//! Note `α = 100 − ε*/10` holds exactly by construction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recorder::{PhaseKind, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("ground-truth latency must be positive and finite, got {0}")]
    NonPositiveGroundTruth(f64),
    #[error("HQ component `{name}` must be positive and finite, got {value}")]
    NonPositiveComponent { name: &'static str, value: f64 },
    #[error("duplicated phase ({dup}) is faster than the baseline ({base})")]
    NegativeDelta { base: f64, dup: f64 },
    #[error("duplication count must be at least 1")]
    ZeroDuplicationCount,
    #[error("expected latency must be positive, got {0}")]
    NonPositiveExpectedLatency(f64),
    #[error("trace has no `{0}` phase")]
    MissingPhase(PhaseKind),
    #[error("trace metadata lacks prompt/output token counts")]
    MissingTokenCounts,
}

/// A profiler measurement paired with its ground truth, both in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub t_lm_ms: f64,
    pub t_gt_ms: f64,
}

impl MetricPair {
    pub fn new(t_lm_ms: f64, t_gt_ms: f64) -> Self {
        MetricPair { t_lm_ms, t_gt_ms }
    }

    pub fn abs_error_ms(&self) -> f64 {
        (self.t_lm_ms - self.t_gt_ms).abs()
    }

    fn relative_error(&self) -> Result<f64, MetricsError> {
        if !(self.t_gt_ms > 0.0 && self.t_gt_ms.is_finite()) {
            return Err(MetricsError::NonPositiveGroundTruth(self.t_gt_ms));
        }
        Ok(self.abs_error_ms() / self.t_gt_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub alpha_pct: f64,
    pub eps_star_us_per_ms: f64,
}

pub fn accuracy(p: MetricPair) -> Result<f64, MetricsError> {
    Ok((1.0 - p.relative_error()?) * 100.0)
}

pub fn scaled_error(p: MetricPair) -> Result<f64, MetricsError> {
    Ok(1000.0 * p.relative_error()?)
}

pub fn evaluate_pair(p: MetricPair) -> Result<AccuracyResult, MetricsError> {
    Ok(AccuracyResult {
        alpha_pct: accuracy(p)?,
        eps_star_us_per_ms: scaled_error(p)?,
    })
}

fn positive(name: &'static str, value: f64) -> Result<f64, MetricsError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(MetricsError::NonPositiveComponent { name, value })
    }
}

/// Harmonic mean of the three ratios.
pub fn hq(m_a: f64, m_prefill: f64, m_decode: f64) -> Result<f64, MetricsError> {
    let a = positive("m_a", m_a)?;
    let p = positive("m_prefill", m_prefill)?;
    let d = positive("m_decode", m_decode)?;
    Ok(3.0 / (1.0 / a + 1.0 / p + 1.0 / d))
}

/// Measurements for one task: accuracy and phase latencies of the
/// quantized model and of its full-precision original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HqInputs {
    pub task_id: String,
    pub acc_quant: f64,
    pub acc_full: f64,
    pub prefill_quant_ms: f64,
    pub prefill_full_ms: f64,
    pub decode_quant_ms: f64,
    pub decode_full_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HqBreakdown {
    pub m_a: f64,
    pub m_prefill: f64,
    pub m_decode: f64,
    pub score: f64,
}

/// Latency ratios are full-over-quantized, so a speedup is > 1.
pub fn hq_breakdown(inputs: &HqInputs) -> Result<HqBreakdown, MetricsError> {
    let m_a = inputs.acc_quant / positive("acc_full", inputs.acc_full)?;
    let m_prefill =
        inputs.prefill_full_ms / positive("prefill_quant_ms", inputs.prefill_quant_ms)?;
    let m_decode = inputs.decode_full_ms / positive("decode_quant_ms", inputs.decode_quant_ms)?;
    Ok(HqBreakdown {
        m_a,
        m_prefill,
        m_decode,
        score: hq(m_a, m_prefill, m_decode)?,
    })
}

pub fn hq_from_measurements(inputs: &HqInputs) -> Result<f64, MetricsError> {
    hq_breakdown(inputs).map(|b| b.score)
}

/// Per-kernel latency from a baseline phase time and the phase time with
/// the kernel duplicated `n` times: `(t_dup − t_base) / n`.
pub fn duplication_estimate(
    t_base_phase_ms: f64,
    t_dup_phase_ms: f64,
    n: u64,
) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroDuplicationCount);
    }
    if t_dup_phase_ms < t_base_phase_ms {
        return Err(MetricsError::NegativeDelta {
            base: t_base_phase_ms,
            dup: t_dup_phase_ms,
        });
    }
    Ok((t_dup_phase_ms - t_base_phase_ms) / n as f64)
}

pub const DUPLICATION_N_LONG: u64 = 50;
pub const DUPLICATION_N_SHORT: u64 = 1000;
pub const DUPLICATION_LONG_THRESHOLD_MS: f64 = 1.0;

/// 50 copies for kernels expected to exceed 1 ms, 1000 otherwise.
/// Exactly 1 ms counts as short.
pub fn choose_duplication_count(expected_latency_ms: f64) -> Result<u64, MetricsError> {
    if !(expected_latency_ms > 0.0 && expected_latency_ms.is_finite()) {
        return Err(MetricsError::NonPositiveExpectedLatency(expected_latency_ms));
    }
    Ok(if expected_latency_ms > DUPLICATION_LONG_THRESHOLD_MS {
        DUPLICATION_N_LONG
    } else {
        DUPLICATION_N_SHORT
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub prefill_tokens_per_s: f64,
    pub decode_tokens_per_s: f64,
    pub prefill_s_per_input_token: f64,
    pub decode_s_per_output_token: f64,
}

impl ThroughputReport {
    /// Builds the report from token counts and total phase wall times.
    pub fn from_totals(
        prompt_tokens: u32,
        output_tokens: u32,
        prefill_wall_ns: u64,
        decode_wall_ns: u64,
    ) -> ThroughputReport {
        let prefill_s = prefill_wall_ns as f64 * 1e-9;
        let decode_s = decode_wall_ns as f64 * 1e-9;
        ThroughputReport {
            prefill_tokens_per_s: prompt_tokens as f64 / prefill_s,
            decode_tokens_per_s: output_tokens as f64 / decode_s,
            prefill_s_per_input_token: prefill_s / prompt_tokens as f64,
            decode_s_per_output_token: decode_s / output_tokens as f64,
        }
    }
}

/// Prefill and decode throughput from the trace's phase wall times and
/// the token counts in its metadata.
pub fn throughput(trace: &Trace) -> Result<ThroughputReport, MetricsError> {
    let wall = |kind: PhaseKind| -> Result<u64, MetricsError> {
        let mut seen = false;
        let mut total = 0;
        for p in trace.phases().iter().filter(|p| p.kind == kind) {
            seen = true;
            total += p.duration_ns();
        }
        if seen {
            Ok(total)
        } else {
            Err(MetricsError::MissingPhase(kind))
        }
    };
    let prefill = wall(PhaseKind::Prefill)?;
    let decode = wall(PhaseKind::Decode)?;
    let info = trace.info();
    match (info.prompt_tokens, info.output_tokens) {
        (Some(p), Some(o)) if p > 0 && o > 0 => {
            Ok(ThroughputReport::from_totals(p, o, prefill, decode))
        }
        _ => Err(MetricsError::MissingTokenCounts),
    }
}

/// Rounds to `decimals` places the way reports print them.
pub fn round_to(value: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (value * scale).round() / scale
}
