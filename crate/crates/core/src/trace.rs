//! Per-iteration trace records and shared run-state bookkeeping for the
//! outer solver loops.
//!
//! Traces serialize to JSONL, one record per outer iteration. Records are
//! fully deterministic for a given config and seed: the `wall_ns` field is
//! kept at zero in emitted traces so repeated runs are bit-identical;
//! measured wall time is reported in the run summary instead.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Outcome tag of one outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceEvent {
    /// The candidate step passed the acceptance tests.
    Accept,
    /// No acceptable candidate at the damping cap; the iterate was kept.
    Stall,
    /// The sampled batch had zero residual; a fresh batch was drawn.
    Resample,
    /// A stopping threshold was met; terminal record.
    Converged,
}

/// One outer-iteration record. Field names are the trace schema; `k` is
/// strictly increasing within a run and `f1hat` is always finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub f1hat: f64,
    pub g1hat_batch: f64,
    pub step_norm: f64,
    pub prox_grad_norm: f64,
    #[serde(rename = "L_k")]
    pub l_k: f64,
    pub tau_k: f64,
    pub eta_k: f64,
    #[serde(rename = "n_L_probes")]
    pub n_l_probes: u32,
    pub batch_indices: Vec<usize>,
    pub event: TraceEvent,
    pub wall_ns: u64,
}

impl TraceRecord {
    /// Serializes to a single JSONL line (no trailing newline). All float
    /// fields must be finite; NaN or infinity would not round-trip.
    pub fn to_jsonl(&self) -> crate::error::Result<String> {
        for (name, v) in [
            ("f1hat", self.f1hat),
            ("g1hat_batch", self.g1hat_batch),
            ("step_norm", self.step_norm),
            ("prox_grad_norm", self.prox_grad_norm),
            ("L_k", self.l_k),
            ("tau_k", self.tau_k),
            ("eta_k", self.eta_k),
        ] {
            if !v.is_finite() {
                return Err(crate::error::Error::Domain(format!(
                    "trace field {name} is not finite: {v}"
                )));
            }
        }
        Ok(serde_json::to_string(self)?)
    }
}

/// Which stopping threshold ended a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// Residual norm fell below `f1_tol`.
    ResidualTolerance,
    /// Reference prox-gradient norm fell below `prox_grad_tol`.
    ProxGradientTolerance,
    /// Accepted step length fell below `step_tol`.
    StepTolerance,
}

/// Final state of a solver run plus its complete trace.
#[derive(Clone, Debug)]
pub struct RunState {
    /// Number of completed outer iterations.
    pub k: usize,
    /// Final iterate.
    pub x: DVector<f64>,
    /// Lipschitz estimate in force at termination.
    pub l_k: f64,
    /// Final residual norm.
    pub last_f1: f64,
    pub trace: Vec<TraceRecord>,
    /// Which threshold stopped the run; `None` means the iteration budget
    /// ran out.
    pub stop: Option<StopReason>,
    /// Jacobian Lipschitz estimate used for the damping cap.
    pub l_fhat_est: f64,
    /// Configured floor of the curvature-weight schedule.
    pub l_floor: f64,
    /// Inexactness budget consumed per outer iteration.
    pub eps_history: Vec<f64>,
    /// Full iterate history (`x_0 ... x_k`), kept only when the config asks
    /// for it; certificate evaluation needs the points themselves.
    pub iterates: Option<Vec<DVector<f64>>>,
    /// How many accepted iterations fell back from the 1-D `tau` search to
    /// the residual norm because bracketing failed.
    pub tau_fallbacks: usize,
}

impl RunState {
    pub fn converged(&self) -> bool {
        self.stop.is_some()
    }
}
