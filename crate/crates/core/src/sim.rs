//! Deterministic discrete-event simulator of an on-device inference backend.
//!
//! A [`WorkloadSpec`] describes, per phase, which kernels run, how long they
//! take on the device, and how long the host takes to prepare each launch.
//! The simulator plays a generation round through the recorder API and keeps
//! the realized timings as [`GroundTruth`], so every analysis downstream can
//! be checked against exact values.
//!
//! The device has one in-order queue per `queue_id` and the host dispatches
//! synchronously: kernel `i + 1` is prepared only after kernel `i` finishes.
//! For one invocation:
//!
//! ```text
//! enqueue = prev_end + dispatch_gap      (host clock == device clock)
//! submit  = enqueue + queue_delay
//! start   = submit + submit_delay
//! end     = start + base + slope * step
//! ```
//!
//! Every term is scaled by `exp(sigma * g)`, `g ~ N(0, 1)`, drawn from a
//! seeded ChaCha stream. With `sigma = 0` no draws happen and timings are
//! exact integers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::choose_duplication_count;
use crate::recorder::{
    PhaseKind, PhaseRecord, RecorderError, SessionInfo, TimestampNs, Trace, TraceSession,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("kernel `{0}` is not part of the workload")]
    UnknownKernel(String),
    #[error("prompt_tokens and output_tokens must both be at least 1")]
    InvalidTokenCounts,
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("cannot parse workload: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read workload file: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub name: String,
    pub base_latency_ns: u64,
    #[serde(default)]
    pub per_step_slope_ns: u64,
    #[serde(default)]
    pub dispatch_gap_ns: u64,
    #[serde(default)]
    pub queue_delay_ns: u64,
    #[serde(default)]
    pub submit_delay_ns: u64,
    #[serde(default = "one")]
    pub invocations_per_phase: u32,
    #[serde(default)]
    pub queue_id: u32,
}

impl KernelSpec {
    pub fn new(name: impl Into<String>, base_latency_ns: u64) -> Self {
        KernelSpec {
            name: name.into(),
            base_latency_ns,
            per_step_slope_ns: 0,
            dispatch_gap_ns: 0,
            queue_delay_ns: 0,
            submit_delay_ns: 0,
            invocations_per_phase: 1,
            queue_id: 0,
        }
    }

    pub fn slope(mut self, ns_per_step: u64) -> Self {
        self.per_step_slope_ns = ns_per_step;
        self
    }

    pub fn delays(mut self, dispatch_gap_ns: u64, queue_delay_ns: u64, submit_delay_ns: u64) -> Self {
        self.dispatch_gap_ns = dispatch_gap_ns;
        self.queue_delay_ns = queue_delay_ns;
        self.submit_delay_ns = submit_delay_ns;
        self
    }

    pub fn invocations(mut self, n: u32) -> Self {
        self.invocations_per_phase = n;
        self
    }

    /// Unjittered device latency at decode step `step`.
    pub fn latency_at(&self, step: u32) -> u64 {
        self.base_latency_ns + self.per_step_slope_ns * step as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseScript {
    pub kind: PhaseKind,
    /// Host-only time spent after the phase's last kernel completes.
    #[serde(default)]
    pub host_overhead_ns: u64,
    #[serde(default)]
    pub kernels: Vec<KernelSpec>,
}

impl PhaseScript {
    pub fn new(kind: PhaseKind, kernels: Vec<KernelSpec>) -> Self {
        PhaseScript {
            kind,
            host_overhead_ns: 0,
            kernels,
        }
    }

    pub fn host_only(kind: PhaseKind, host_overhead_ns: u64) -> Self {
        PhaseScript {
            kind,
            host_overhead_ns,
            kernels: Vec::new(),
        }
    }

    pub fn with_host_overhead(mut self, ns: u64) -> Self {
        self.host_overhead_ns = ns;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterModel {
    pub seed: u64,
    pub sigma_rel: f64,
}

impl Default for JitterModel {
    fn default() -> Self {
        JitterModel {
            seed: 0,
            sigma_rel: 0.0,
        }
    }
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub jitter: JitterModel,
    pub phases: Vec<PhaseScript>,
}

pub const PRESET_GEMMA2_DECODE: &str = "gemma2-decode";
const GEMMA2_DECODE_TOML: &str = include_str!("../presets/gemma2_decode.toml");

/// The fused GEMM kernels that dominate a decode step of the gemma preset.
pub const GEMMA2_GEMM_TRIO: [&str; 3] = [
    "dequantize1_NT_matmul10",
    "dequantize3_NT_matmul12",
    "dequantize4_NT_matmul13",
];

/// Short memory-bound decode kernels of the gemma preset.
pub const GEMMA2_MICRO_KERNELS: [&str; 4] = [
    "rms_norm2",
    "fused_rope",
    "tir_kv_cache_transpose_append",
    "add_norm_prefill",
];

pub const GEMMA2_PAGED_KV: &str = "batch_decode_paged_kv";

/// Compiled-in preset calibrated to the decode-step structure of a 4-bit
/// gemma-2-2b-it on a phone GPU.
pub fn preset_gemma_decode() -> WorkloadSpec {
    WorkloadSpec::from_toml_str(GEMMA2_DECODE_TOML).expect("bundled preset is valid")
}

pub fn preset_names() -> &'static [&'static str] {
    &[PRESET_GEMMA2_DECODE]
}

pub fn preset(name: &str) -> Result<WorkloadSpec, SimError> {
    match name {
        PRESET_GEMMA2_DECODE => Ok(preset_gemma_decode()),
        other => Err(SimError::UnknownPreset(other.to_string())),
    }
}

impl WorkloadSpec {
    pub fn from_toml_str(s: &str) -> Result<WorkloadSpec, SimError> {
        let spec: WorkloadSpec = toml::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<WorkloadSpec, SimError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Resolves `preset:<name>` or a path to a TOML workload file.
    pub fn resolve(reference: &str) -> Result<WorkloadSpec, SimError> {
        match reference.strip_prefix("preset:") {
            Some(name) => preset(name),
            None => Self::load(Path::new(reference)),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("workload spec serializes")
    }

    pub fn script(&self, kind: PhaseKind) -> Option<&PhaseScript> {
        self.phases.iter().find(|p| p.kind == kind)
    }

    pub fn kernel(&self, name: &str) -> Option<(PhaseKind, &KernelSpec)> {
        self.phases
            .iter()
            .flat_map(|p| p.kernels.iter().map(move |k| (p.kind, k)))
            .find(|(_, k)| k.name == name)
    }

    pub fn kernel_names(&self) -> impl Iterator<Item = &str> {
        self.phases
            .iter()
            .flat_map(|p| p.kernels.iter().map(|k| k.name.as_str()))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        if self.version != 1 {
            return bad(format!("unsupported workload version {}", self.version));
        }
        if !(self.jitter.sigma_rel >= 0.0 && self.jitter.sigma_rel.is_finite()) {
            return bad(format!("sigma_rel must be >= 0, got {}", self.jitter.sigma_rel));
        }
        for kind in PhaseKind::ALL {
            let n = self.phases.iter().filter(|p| p.kind == kind).count();
            if n != 1 {
                return bad(format!("phase `{kind}` must appear exactly once, found {n}"));
            }
        }
        for p in &self.phases {
            let needs_kernels = matches!(
                p.kind,
                PhaseKind::Prefill | PhaseKind::Decode | PhaseKind::Softmax
            );
            if needs_kernels && p.kernels.is_empty() {
                return bad(format!("phase `{}` needs at least one kernel", p.kind));
            }
            if !needs_kernels && p.kernels.len() > 1 {
                return bad(format!("phase `{}` allows at most one kernel", p.kind));
            }
            for k in &p.kernels {
                if k.name.is_empty() {
                    return bad(format!("phase `{}` has a kernel without a name", p.kind));
                }
                if k.base_latency_ns < 1 {
                    return bad(format!("kernel `{}` needs base_latency_ns >= 1", k.name));
                }
                if k.invocations_per_phase < 1 {
                    return bad(format!("kernel `{}` needs invocations_per_phase >= 1", k.name));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicationPlan {
    pub kernel_name: String,
    pub n: u32,
}

impl DuplicationPlan {
    pub fn new(kernel_name: impl Into<String>, n: u32) -> Self {
        DuplicationPlan {
            kernel_name: kernel_name.into(),
            n,
        }
    }

    /// Picks `n` from the kernel's expected latency: 50 above 1 ms, else 1000.
    pub fn by_expected_latency(kernel_name: impl Into<String>, expected_ns: u64) -> Self {
        let n = choose_duplication_count(expected_ns.max(1) as f64 / 1e6)
            .expect("positive latency") as u32;
        DuplicationPlan::new(kernel_name, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTruth {
    pub count: u64,
    pub total_ns: u64,
    pub mean_ns: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTruth {
    pub occurrences: u64,
    pub wall_ns: u64,
    pub busy_ns: u64,
    pub kernel_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowTruth {
    pub kind: PhaseKind,
    pub token_index: Option<u32>,
    pub start_ns: u64,
    pub end_ns: u64,
    pub busy_ns: u64,
    pub idle_fraction: f64,
}

/// Realized timings of a simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub workload: String,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub kernels: BTreeMap<String, KernelTruth>,
    pub phases: BTreeMap<PhaseKind, PhaseTruth>,
    pub windows: Vec<WindowTruth>,
}

impl GroundTruth {
    pub fn phase(&self, kind: PhaseKind) -> PhaseTruth {
        self.phases.get(&kind).copied().unwrap_or_default()
    }

    pub fn windows_of(&self, kind: PhaseKind) -> impl Iterator<Item = &WindowTruth> {
        self.windows.iter().filter(move |w| w.kind == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

struct Jitter {
    sigma: f64,
    rng: ChaCha8Rng,
}

impl Jitter {
    fn new(model: JitterModel) -> Self {
        Jitter {
            sigma: model.sigma_rel,
            rng: ChaCha8Rng::seed_from_u64(model.seed),
        }
    }

    fn apply(&mut self, ns: u64) -> u64 {
        if self.sigma == 0.0 || ns == 0 {
            return ns;
        }
        let g: f64 = StandardNormal.sample(&mut self.rng);
        (ns as f64 * (self.sigma * g).exp()).round() as u64
    }

    fn latency(&mut self, ns: u64) -> u64 {
        self.apply(ns).max(1)
    }
}

struct Runner<'a> {
    spec: &'a WorkloadSpec,
    plan: Option<&'a DuplicationPlan>,
    session: &'a TraceSession,
    jitter: Jitter,
    cursor: u64,
    kernels: BTreeMap<String, (u64, u64)>,
    phases: BTreeMap<PhaseKind, PhaseTruth>,
    windows: Vec<WindowTruth>,
}

impl Runner<'_> {
    fn phase(&mut self, kind: PhaseKind, turn: u32, token: Option<u32>) -> Result<(), SimError> {
        let script = self
            .spec
            .script(kind)
            .ok_or_else(|| SimError::InvalidSpec(format!("missing phase `{kind}`")))?;
        let step = token.unwrap_or(0);
        let phase_start = self.cursor;
        let mut busy = 0u64;
        let mut count = 0u64;
        let rounds = script
            .kernels
            .iter()
            .map(|k| k.invocations_per_phase)
            .max()
            .unwrap_or(0);

        for round in 0..rounds {
            for k in script.kernels.iter().filter(|k| round < k.invocations_per_phase) {
                let enqueue = self.cursor + self.jitter.apply(k.dispatch_gap_ns);
                let submit = enqueue + self.jitter.apply(k.queue_delay_ns);
                let start = submit + self.jitter.apply(k.submit_delay_ns);
                let exec = self.jitter.latency(k.latency_at(step));
                self.emit(k, enqueue, submit, start, exec)?;
                busy += exec;
                count += 1;
                self.cursor = start + exec;

                let dups = match self.plan {
                    Some(p) if p.kernel_name == k.name => p.n,
                    _ => 0,
                };
                for _ in 0..dups {
                    // Copies are launched together with the original and run back to back.
                    let exec = self.jitter.latency(k.latency_at(step));
                    self.emit(k, enqueue, submit, self.cursor, exec)?;
                    busy += exec;
                    count += 1;
                    self.cursor += exec;
                }
            }
        }
        self.cursor += self.jitter.apply(script.host_overhead_ns);

        self.session.record_phase(PhaseRecord {
            kind,
            turn,
            token_index: token,
            t_start_ns: TimestampNs(phase_start),
            t_end_ns: TimestampNs(self.cursor),
        })?;
        let wall = self.cursor - phase_start;
        let truth = self.phases.entry(kind).or_default();
        truth.occurrences += 1;
        truth.wall_ns += wall;
        truth.busy_ns += busy;
        truth.kernel_count += count;
        self.windows.push(WindowTruth {
            kind,
            token_index: token,
            start_ns: phase_start,
            end_ns: self.cursor,
            busy_ns: busy,
            idle_fraction: if wall == 0 {
                0.0
            } else {
                (wall - busy) as f64 / wall as f64
            },
        });
        Ok(())
    }

    fn emit(
        &mut self,
        k: &KernelSpec,
        enqueue: u64,
        submit: u64,
        start: u64,
        exec: u64,
    ) -> Result<(), SimError> {
        self.session.record_kernel(
            &k.name,
            k.queue_id,
            TimestampNs(enqueue),
            TimestampNs(enqueue),
            TimestampNs(submit),
            TimestampNs(start),
            TimestampNs(start + exec),
        )?;
        let e = self.kernels.entry(k.name.clone()).or_default();
        e.0 += 1;
        e.1 += exec;
        Ok(())
    }
}

fn expected_kernel_records(spec: &WorkloadSpec, plan: Option<&DuplicationPlan>, output: u32) -> usize {
    let per = |kind: PhaseKind| -> usize {
        spec.script(kind).map_or(0, |s| {
            s.kernels
                .iter()
                .map(|k| {
                    let dup = plan.filter(|p| p.kernel_name == k.name).map_or(0, |p| p.n);
                    k.invocations_per_phase as usize * (1 + dup as usize)
                })
                .sum()
        })
    };
    per(PhaseKind::Embedding)
        + per(PhaseKind::Prefill)
        + output as usize
            * (per(PhaseKind::Decode)
                + per(PhaseKind::Softmax)
                + per(PhaseKind::CopyProbsToCpu)
                + per(PhaseKind::Sampling))
}

fn execute(
    spec: &WorkloadSpec,
    plan: Option<&DuplicationPlan>,
    prompt_tokens: u32,
    output_tokens: u32,
    session: &TraceSession,
) -> Result<(Trace, GroundTruth), SimError> {
    spec.validate()?;
    if prompt_tokens < 1 || output_tokens < 1 {
        return Err(SimError::InvalidTokenCounts);
    }
    session.reserve(
        2 + 4 * output_tokens as usize,
        expected_kernel_records(spec, plan, output_tokens),
    );
    let mut runner = Runner {
        spec,
        plan,
        session,
        jitter: Jitter::new(spec.jitter),
        cursor: 0,
        kernels: BTreeMap::new(),
        phases: BTreeMap::new(),
        windows: Vec::new(),
    };
    runner.phase(PhaseKind::Embedding, 0, None)?;
    runner.phase(PhaseKind::Prefill, 0, None)?;
    for step in 0..output_tokens {
        for kind in [
            PhaseKind::Decode,
            PhaseKind::Softmax,
            PhaseKind::CopyProbsToCpu,
            PhaseKind::Sampling,
        ] {
            runner.phase(kind, 0, Some(step))?;
        }
    }
    let trace = session.seal()?;
    let truth = GroundTruth {
        workload: spec.name.clone(),
        prompt_tokens,
        output_tokens,
        kernels: runner
            .kernels
            .into_iter()
            .map(|(name, (count, total))| {
                (
                    name,
                    KernelTruth {
                        count,
                        total_ns: total,
                        mean_ns: total as f64 / count as f64,
                    },
                )
            })
            .collect(),
        phases: runner.phases,
        windows: runner.windows,
    };
    Ok((trace, truth))
}

/// Plays one generation round into `session` and seals it.
pub fn run(
    spec: &WorkloadSpec,
    prompt_tokens: u32,
    output_tokens: u32,
    session: &TraceSession,
) -> Result<(Trace, GroundTruth), SimError> {
    execute(spec, None, prompt_tokens, output_tokens, session)
}

/// Like [`run`], but every invocation of the plan's kernel is followed by
/// `n` back-to-back copies with independent jitter draws.
pub fn run_with_duplication(
    spec: &WorkloadSpec,
    plan: &DuplicationPlan,
    prompt_tokens: u32,
    output_tokens: u32,
    session: &TraceSession,
) -> Result<(Trace, GroundTruth), SimError> {
    if spec.kernel(&plan.kernel_name).is_none() {
        return Err(SimError::UnknownKernel(plan.kernel_name.clone()));
    }
    if plan.n < 1 {
        return Err(SimError::InvalidSpec("duplication count must be >= 1".into()));
    }
    execute(spec, Some(plan), prompt_tokens, output_tokens, session)
}

/// Session metadata for a simulated run: unified clock, token counts set.
pub fn session_info(spec: &WorkloadSpec, prompt_tokens: u32, output_tokens: u32) -> SessionInfo {
    SessionInfo::new(format!("sim:{}", spec.name))
        .with_clock_offset(0)
        .with_token_counts(prompt_tokens, output_tokens)
}

/// Runs the workload in a fresh session.
pub fn simulate(
    spec: &WorkloadSpec,
    prompt_tokens: u32,
    output_tokens: u32,
    plan: Option<&DuplicationPlan>,
) -> Result<(Trace, GroundTruth), SimError> {
    let session = TraceSession::with_capacity(session_info(spec, prompt_tokens, output_tokens), 0, 0);
    match plan {
        Some(p) => run_with_duplication(spec, p, prompt_tokens, output_tokens, &session),
        None => run(spec, prompt_tokens, output_tokens, &session),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn single_decode_spec(base: u64, slope: u64) -> WorkloadSpec {
        WorkloadSpec {
            name: "toy".into(),
            version: 1,
            jitter: JitterModel::default(),
            phases: vec![
                PhaseScript::host_only(PhaseKind::Embedding, 1_000),
                PhaseScript::new(
                    PhaseKind::Prefill,
                    vec![KernelSpec::new("prefill_k", 50_000).delays(100, 10, 10)],
                ),
                PhaseScript::new(
                    PhaseKind::Decode,
                    vec![KernelSpec::new("decode_k", base).slope(slope).delays(500, 20, 30)],
                ),
                PhaseScript::new(
                    PhaseKind::Softmax,
                    vec![KernelSpec::new("softmax_k", 2_000).delays(100, 10, 10)],
                ),
                PhaseScript::host_only(PhaseKind::CopyProbsToCpu, 3_000),
                PhaseScript::host_only(PhaseKind::Sampling, 4_000),
            ],
        }
    }

    #[test]
    fn preset_parses_and_validates() {
        let p = preset_gemma_decode();
        assert_eq!(p.name, PRESET_GEMMA2_DECODE);
        assert_eq!(p.kernel_names().count(), 22);
        for k in GEMMA2_GEMM_TRIO.iter().chain(&GEMMA2_MICRO_KERNELS) {
            assert_eq!(p.kernel(k).unwrap().0, PhaseKind::Decode);
        }
        assert!(p.kernel(GEMMA2_PAGED_KV).unwrap().1.per_step_slope_ns > 0);
        assert!(matches!(preset("nope"), Err(SimError::UnknownPreset(_))));
        assert_eq!(WorkloadSpec::resolve("preset:gemma2-decode").unwrap(), p);
    }

    #[test]
    fn toml_round_trip() {
        let p = preset_gemma_decode();
        assert_eq!(WorkloadSpec::from_toml_str(&p.to_toml_string()).unwrap(), p);
    }

    #[test]
    fn decode_durations_exact() {
        let spec = single_decode_spec(1_000_000, 0);
        let (trace, truth) = simulate(&spec, 4, 3, None).unwrap();
        let d: Vec<_> = trace
            .kernels()
            .iter()
            .filter(|k| &*k.name == "decode_k")
            .map(|k| k.execution_ns())
            .collect();
        assert_eq!(d, [1_000_000; 3]);
        assert_eq!(truth.kernels["decode_k"].mean_ns, 1_000_000.0);
        assert_eq!(trace.phases().len(), 2 + 4 * 3);
    }

    #[test]
    fn slope_realized_exactly() {
        let spec = single_decode_spec(10_000, 2_000);
        let (trace, _) = simulate(&spec, 1, 20, None).unwrap();
        let d: Vec<_> = trace
            .kernels()
            .iter()
            .filter(|k| &*k.name == "decode_k")
            .map(|k| k.execution_ns())
            .collect();
        for (s1, s2) in [(0usize, 19usize), (3, 4), (5, 17)] {
            assert_eq!(d[s2] - d[s1], 2_000 * (s2 - s1) as u64);
        }
    }

    #[test]
    fn seeded_runs_identical() {
        let mut spec = preset_gemma_decode();
        spec.jitter = JitterModel {
            seed: 42,
            sigma_rel: 0.05,
        };
        let a = simulate(&spec, 8, 4, None).unwrap();
        let b = simulate(&spec, 8, 4, None).unwrap();
        assert_eq!(a, b);
        spec.jitter.seed = 43;
        let c = simulate(&spec, 8, 4, None).unwrap();
        assert_ne!(a.0.kernels(), c.0.kernels());
    }

    #[test]
    fn duplication_adds_exact_time() {
        let spec = single_decode_spec(250_000, 0);
        let (_, base) = simulate(&spec, 1, 2, None).unwrap();
        let plan = DuplicationPlan::new("decode_k", 50);
        let (trace, dup) = simulate(&spec, 1, 2, Some(&plan)).unwrap();
        let t = base.phase(PhaseKind::Decode).wall_ns;
        let t_dup = dup.phase(PhaseKind::Decode).wall_ns;
        assert_eq!(t_dup, t + 50 * 250_000 * 2);
        assert_eq!(base.phase(PhaseKind::Prefill), dup.phase(PhaseKind::Prefill));
        assert_eq!(trace.kernels().iter().filter(|k| &*k.name == "decode_k").count(), 102);
    }

    #[test]
    fn duplication_unknown_kernel() {
        let spec = single_decode_spec(1, 0);
        let plan = DuplicationPlan::new("missing", 50);
        assert!(matches!(
            simulate(&spec, 1, 1, Some(&plan)),
            Err(SimError::UnknownKernel(_))
        ));
    }

    #[test]
    fn duplication_plan_rule() {
        assert_eq!(DuplicationPlan::by_expected_latency("k", 1_360_100).n, 50);
        assert_eq!(DuplicationPlan::by_expected_latency("k", 200_600).n, 1000);
        assert_eq!(DuplicationPlan::by_expected_latency("k", 1_000_000).n, 1000);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = single_decode_spec(1, 0);
        spec.phases.retain(|p| p.kind != PhaseKind::Sampling);
        assert!(matches!(spec.validate(), Err(SimError::InvalidSpec(_))));

        let mut spec = single_decode_spec(1, 0);
        spec.phases[2].kernels.clear();
        assert!(spec.validate().is_err());

        let mut spec = single_decode_spec(1, 0);
        spec.phases[2].kernels[0].base_latency_ns = 0;
        assert!(spec.validate().is_err());

        let mut spec = single_decode_spec(1, 0);
        spec.phases[0].kernels = vec![KernelSpec::new("a", 1), KernelSpec::new("b", 1)];
        assert!(spec.validate().is_err());

        let spec = single_decode_spec(1, 0);
        assert!(matches!(
            simulate(&spec, 0, 1, None),
            Err(SimError::InvalidTokenCounts)
        ));
    }

    #[test]
    fn jitter_keeps_latencies_positive() {
        let mut spec = single_decode_spec(1, 0);
        spec.jitter.sigma_rel = 3.0;
        let (trace, _) = simulate(&spec, 1, 50, None).unwrap();
        assert!(trace.kernels().iter().all(|k| k.execution_ns() >= 1));
    }

    #[test]
    fn parallel_simulations_agree() {
        let spec = preset_gemma_decode();
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..3).map(|_| s.spawn(|| simulate(&spec, 2, 3, None).unwrap())).collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.windows(2).all(|w| w[0] == w[1]));
    }
}
