//! Per-step decode latency prediction.
//!
//! The paged-attention kernel is the only decode kernel whose cost grows
//! with the KV cache, and it grows close to linearly in the decode step.
//! An affine fit of that kernel plus a constant floor for everything else
//! predicts the latency of future steps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recorder::{PhaseKind, Trace};
use crate::timeline::{kernel_phase_indices, TimelineError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("kernel `{0}` does not occur in any decode step")]
    KernelNotFound(String),
    #[error("need at least 2 decode steps, found {0}")]
    InsufficientSteps(usize),
    #[error("all steps are equal; slope is undefined")]
    DegenerateSeries,
    #[error("steps must be strictly increasing")]
    UnorderedSteps,
    #[error("holdout series is empty")]
    EmptyHoldout,
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

/// `(step, latency_ns)` pairs with strictly increasing steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSeries {
    points: Vec<(u32, f64)>,
}

impl StepSeries {
    pub fn new(points: Vec<(u32, f64)>) -> Result<StepSeries, PredictorError> {
        if points.len() < 2 {
            return Err(PredictorError::InsufficientSteps(points.len()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(PredictorError::UnorderedSteps);
        }
        Ok(StepSeries { points })
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn latency_at(&self, step: u32) -> Option<f64> {
        self.points
            .binary_search_by_key(&step, |p| p.0)
            .ok()
            .map(|i| self.points[i].1)
    }

    /// Points with `step < boundary` and `step >= boundary`.
    pub fn split_at_step(&self, boundary: u32) -> (Vec<(u32, f64)>, Vec<(u32, f64)>) {
        self.points.iter().partition(|p| p.0 < boundary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Reduce {
    Mean,
    Sum,
}

fn decode_step_values(trace: &Trace, kernel_name: &str, reduce: Reduce) -> Result<Vec<(u32, f64)>, PredictorError> {
    let owners = kernel_phase_indices(trace)?;
    let mut by_step: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for (k, owner) in trace.kernels().iter().zip(owners) {
        if &*k.name != kernel_name {
            continue;
        }
        let Some(phase) = owner.map(|i| &trace.phases()[i]) else {
            continue;
        };
        if phase.kind != PhaseKind::Decode {
            continue;
        }
        let Some(step) = phase.token_index else {
            continue;
        };
        let e = by_step.entry(step).or_default();
        e.0 += 1;
        e.1 += k.execution_ns();
    }
    if by_step.is_empty() {
        return Err(PredictorError::KernelNotFound(kernel_name.to_string()));
    }
    Ok(by_step
        .into_iter()
        .map(|(step, (n, total))| {
            let v = match reduce {
                Reduce::Mean => total as f64 / n as f64,
                Reduce::Sum => total as f64,
            };
            (step, v)
        })
        .collect())
}

/// Mean execution time of `kernel_name` per decode step.
pub fn extract_step_series(trace: &Trace, kernel_name: &str) -> Result<StepSeries, PredictorError> {
    StepSeries::new(decode_step_values(trace, kernel_name, Reduce::Mean)?)
}

/// Summed execution time of `kernel_name` per decode step.
pub fn extract_step_totals(trace: &Trace, kernel_name: &str) -> Result<StepSeries, PredictorError> {
    StepSeries::new(decode_step_values(trace, kernel_name, Reduce::Sum)?)
}

/// Wall time of each decode phase, keyed by token index.
pub fn extract_step_wall(trace: &Trace) -> Result<StepSeries, PredictorError> {
    let mut by_step: BTreeMap<u32, u64> = BTreeMap::new();
    for p in trace.phases().iter().filter(|p| p.kind == PhaseKind::Decode) {
        if let Some(step) = p.token_index {
            *by_step.entry(step).or_default() += p.duration_ns();
        }
    }
    StepSeries::new(by_step.into_iter().map(|(s, ns)| (s, ns as f64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept_ns: f64,
    pub slope_ns_per_step: f64,
    pub trained_steps: usize,
}

impl LinearModel {
    pub fn at(&self, step: u32) -> f64 {
        self.intercept_ns + self.slope_ns_per_step * step as f64
    }
}

/// Ordinary least squares of latency on step.
pub fn fit(points: &[(u32, f64)]) -> Result<LinearModel, PredictorError> {
    if points.len() < 2 {
        return Err(PredictorError::InsufficientSteps(points.len()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in points {
        let dx = x as f64 - mean_x;
        sxx += dx * dx;
        sxy += dx * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(PredictorError::DegenerateSeries);
    }
    let slope = sxy / sxx;
    Ok(LinearModel {
        intercept_ns: mean_y - slope * mean_x,
        slope_ns_per_step: slope,
        trained_steps: points.len(),
    })
}

pub fn fit_series(series: &StepSeries) -> Result<LinearModel, PredictorError> {
    fit(series.points())
}

/// `floor + intercept + slope * step`.
pub fn predict_step_latency(model: &LinearModel, constant_floor_ns: f64, step: u32) -> f64 {
    constant_floor_ns + model.at(step)
}

/// Mean over `steps` of (step wall time − growing-kernel time): every
/// non-growing kernel plus idle time.
pub fn constant_floor(wall: &StepSeries, growing: &StepSeries, steps: &[u32]) -> f64 {
    let diffs: Vec<f64> = steps
        .iter()
        .filter_map(|&s| Some(wall.latency_at(s)? - growing.latency_at(s)?))
        .collect();
    if diffs.is_empty() {
        0.0
    } else {
        diffs.iter().sum::<f64>() / diffs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mape: f64,
    pub max_ape: f64,
}

/// Mean and max absolute percentage error over `holdout`.
pub fn evaluate(
    model: &LinearModel,
    holdout: &[(u32, f64)],
    constant_floor_ns: f64,
) -> Result<Evaluation, PredictorError> {
    if holdout.is_empty() {
        return Err(PredictorError::EmptyHoldout);
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for &(step, actual) in holdout {
        let predicted = predict_step_latency(model, constant_floor_ns, step);
        let ape = (predicted - actual).abs() / actual.abs();
        sum += ape;
        max = max.max(ape);
    }
    Ok(Evaluation {
        mape: sum / holdout.len() as f64,
        max_ape: max,
    })
}

/// Outcome of training on the first `train_steps` steps and scoring the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub kernel_model: LinearModel,
    pub kernel_eval: Evaluation,
    pub step_model: LinearModel,
    pub constant_floor_ns: f64,
    pub step_eval: Evaluation,
    pub holdout_steps: usize,
}

/// Fits the kernel's per-invocation series and the per-step wall time
/// (floor plus the kernel's per-step total) on steps `< train_steps` and
/// evaluates both on the remaining steps.
pub fn train_and_evaluate(
    trace: &Trace,
    kernel_name: &str,
    train_steps: u32,
) -> Result<HoldoutReport, PredictorError> {
    let series = extract_step_series(trace, kernel_name)?;
    let totals = extract_step_totals(trace, kernel_name)?;
    let wall = extract_step_wall(trace)?;

    let (train, holdout) = series.split_at_step(train_steps);
    if holdout.is_empty() {
        return Err(PredictorError::InsufficientSteps(series.len()));
    }
    let kernel_model = fit(&train)?;
    let kernel_eval = evaluate(&kernel_model, &holdout, 0.0)?;

    let (train_totals, _) = totals.split_at_step(train_steps);
    let step_model = fit(&train_totals)?;
    let train_ids: Vec<u32> = train_totals.iter().map(|p| p.0).collect();
    let floor = constant_floor(&wall, &totals, &train_ids);
    let (_, wall_holdout) = wall.split_at_step(train_steps);
    let step_eval = evaluate(&step_model, &wall_holdout, floor)?;

    Ok(HoldoutReport {
        kernel_model,
        kernel_eval,
        step_model,
        constant_floor_ns: floor,
        step_eval,
        holdout_steps: holdout.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, JitterModel, KernelSpec, PhaseScript, WorkloadSpec};
    use proptest::prelude::*;

    fn linear_spec(slope: u64) -> WorkloadSpec {
        WorkloadSpec {
            name: "lin".into(),
            version: 1,
            jitter: JitterModel::default(),
            phases: vec![
                PhaseScript::host_only(PhaseKind::Embedding, 100),
                PhaseScript::new(PhaseKind::Prefill, vec![KernelSpec::new("p", 1_000).delays(10, 0, 0)]),
                PhaseScript::new(
                    PhaseKind::Decode,
                    vec![
                        KernelSpec::new("grow", 10_000).slope(slope).delays(50, 5, 5).invocations(4),
                        KernelSpec::new("flat", 7_000).delays(50, 5, 5).invocations(4),
                    ],
                ),
                PhaseScript::new(PhaseKind::Softmax, vec![KernelSpec::new("s", 500).delays(10, 0, 0)]),
                PhaseScript::host_only(PhaseKind::CopyProbsToCpu, 100),
                PhaseScript::host_only(PhaseKind::Sampling, 100),
            ],
        }
    }

    #[test]
    fn exact_linear_fit() {
        let pts: Vec<(u32, f64)> = (0..100).map(|i| (i, 100.0 + 2.0 * i as f64)).collect();
        let m = fit(&pts).unwrap();
        assert!((m.intercept_ns - 100.0).abs() < 1e-9);
        assert!((m.slope_ns_per_step - 2.0).abs() < 1e-12);
        for &(s, y) in &pts {
            assert!((m.at(s) - y).abs() <= 1e-9 * y);
        }
        assert_eq!(evaluate(&m, &pts, 0.0).unwrap().mape, 0.0);
    }

    #[test]
    fn constant_series_zero_slope() {
        let pts: Vec<(u32, f64)> = (0..10).map(|i| (i, 55.0)).collect();
        assert_eq!(fit(&pts).unwrap().slope_ns_per_step, 0.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(fit(&[(3, 1.0), (3, 2.0)]), Err(PredictorError::DegenerateSeries));
        assert_eq!(fit(&[(3, 1.0)]), Err(PredictorError::InsufficientSteps(1)));
        assert_eq!(StepSeries::new(vec![(2, 1.0), (1, 1.0)]), Err(PredictorError::UnorderedSteps));
    }

    #[test]
    fn prediction_is_affine() {
        let m = LinearModel {
            intercept_ns: 100.0,
            slope_ns_per_step: 2.0,
            trained_steps: 2,
        };
        assert_eq!(predict_step_latency(&m, 0.0, 50), 200.0);
        assert_eq!(predict_step_latency(&m, 30.0, 0), 130.0);
        for s in 0..100 {
            let d = predict_step_latency(&m, 7.0, s + 1) - predict_step_latency(&m, 7.0, s);
            assert_eq!(d, 2.0);
        }
    }

    #[test]
    fn constant_prediction_has_error() {
        let truth: Vec<(u32, f64)> = (0..10).map(|i| (i, 100.0 + 10.0 * i as f64)).collect();
        let flat = LinearModel {
            intercept_ns: 100.0,
            slope_ns_per_step: 0.0,
            trained_steps: 2,
        };
        assert!(evaluate(&flat, &truth, 0.0).unwrap().mape > 0.0);
        assert_eq!(evaluate(&flat, &[], 0.0), Err(PredictorError::EmptyHoldout));
    }

    #[test]
    fn simulated_series_is_linear() {
        let (trace, _) = simulate(&linear_spec(2_000), 1, 30, None).unwrap();
        let series = extract_step_series(&trace, "grow").unwrap();
        assert_eq!(series.len(), 30);
        for &(s, y) in series.points() {
            assert_eq!(y, 10_000.0 + 2_000.0 * s as f64);
        }
        assert_eq!(
            extract_step_series(&trace, "absent"),
            Err(PredictorError::KernelNotFound("absent".into()))
        );
        let (one, _) = simulate(&linear_spec(2_000), 1, 1, None).unwrap();
        assert_eq!(
            extract_step_series(&one, "grow"),
            Err(PredictorError::InsufficientSteps(1))
        );
    }

    #[test]
    fn holdout_on_exact_trace_is_perfect() {
        let (trace, _) = simulate(&linear_spec(1_500), 1, 60, None).unwrap();
        let r = train_and_evaluate(&trace, "grow", 20).unwrap();
        assert!(r.kernel_eval.mape < 1e-12);
        assert!(r.step_eval.mape < 1e-12, "{:?}", r);
        assert_eq!(r.holdout_steps, 40);
    }

    #[test]
    fn jittered_slope_recovered() {
        let mut spec = linear_spec(2_000);
        spec.jitter = JitterModel {
            seed: 7,
            sigma_rel: 0.02,
        };
        let (trace, _) = simulate(&spec, 1, 200, None).unwrap();
        let m = fit_series(&extract_step_series(&trace, "grow").unwrap()).unwrap();
        assert!((m.slope_ns_per_step - 2_000.0).abs() / 2_000.0 <= 0.05, "{m:?}");
    }

    proptest! {
        #[test]
        fn fit_ignores_order(pts in prop::collection::vec((0u32..1000, 1.0f64..1e6), 2..40), seed in 0u64..100) {
            let mut uniq: BTreeMap<u32, f64> = BTreeMap::new();
            for (s, y) in pts { uniq.insert(s, y); }
            let sorted: Vec<(u32, f64)> = uniq.into_iter().collect();
            prop_assume!(sorted.len() >= 2);
            let mut shuffled = sorted.clone();
            let k = shuffled.len();
            shuffled.rotate_left((seed as usize) % k);
            shuffled.reverse();
            let a = fit(&sorted).unwrap();
            let b = fit(&shuffled).unwrap();
            let tol = 1e-9 * (1.0 + a.intercept_ns.abs());
            prop_assert!((a.intercept_ns - b.intercept_ns).abs() <= tol);
            prop_assert!((a.slope_ns_per_step - b.slope_ns_per_step).abs() <= 1e-9 * (1.0 + a.slope_ns_per_step.abs()));
        }
    }
}
