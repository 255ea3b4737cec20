//! Low-overhead phase and kernel profiling for on-device LLM inference.
//!
//! The [`recorder`] captures host-side phase boundaries and device-side
//! kernel lifecycles into a sealed [`recorder::Trace`]. Analyses live in
//! [`timeline`] (idle time, lifecycle breakdown, per-kernel aggregates),
//! [`metrics`] (accuracy, scaled error, HQ score, duplication estimates),
//! [`predictor`] (per-step latency models) and [`sampler`] (KL-matched
//! prompt subsets). [`sim_engine`] produces deterministic synthetic traces
//! with exact ground truth; [`trace_io`] handles the on-disk formats.

pub mod cli;
pub mod metrics;
pub mod predictor;
pub mod recorder;
pub mod sampler;
pub mod sim;
pub mod timeline;
pub mod trace_io;

/// Alias kept for callers that prefer the longer module name.
pub use sim as sim_engine;
