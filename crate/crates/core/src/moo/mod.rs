//! Constrained bi-objective search: maximize accuracy `f`, minimize latency `g`, subject to
//! the secure-memory budget `H(a) <= H_limit`.

mod acquisition;
mod gp;
mod pareto;
mod search;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{Configuration, MemoryFootprint};

pub use acquisition::{nehvi_acquisition, nehvi_from_posterior, psd_cholesky, StandardNormals};
pub use gp::{fit_gp, fit_gp_records, GpFitOptions, GpSurrogate, Objective};
pub use pareto::{hypervolume, hypervolume_clipped, pareto_front, score, select_optimal};
pub use search::{
    propose_batch, random_search, run_search, CandidateEvaluator, SearchJournal, SearchLogHeader, SearchOutcome, SearchProblem,
    SearchState, SEARCH_LOG_VERSION,
};

#[derive(Debug, Error)]
pub enum MooError {
    #[error("no feasible evaluated configuration: the Pareto front is empty")]
    EmptyFront,
    #[error("point ({accuracy}, {latency_ms}) does not dominate the reference point")]
    OutsideReference { accuracy: f64, latency_ms: f64 },
    #[error("need at least {needed} observations to fit a surrogate, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("kernel matrix is not positive definite after jitter escalation")]
    NotPositiveDefinite,
    #[error("input has dimension {got}, surrogate expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("no feasible unevaluated candidate found after {draws} draws")]
    Exhausted { draws: usize },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("search paused after {evaluations} evaluations")]
    Paused { evaluations: usize },
    #[error("search journal: {0}")]
    Journal(String),
    #[error(transparent)]
    SearchSpace(#[from] crate::search_space::SearchSpaceError),
    #[error(transparent)]
    Latency(#[from] crate::latency::LatencyError),
}

/// `(f(a), g(a))` of one evaluated configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePoint {
    pub accuracy: f64,
    pub latency_ms: f64,
}

impl ObjectivePoint {
    pub fn new(accuracy: f64, latency_ms: f64) -> Self {
        ObjectivePoint { accuracy, latency_ms }
    }

    /// At least as good in both objectives and strictly better in one.
    pub fn dominates(&self, other: &ObjectivePoint) -> bool {
        self.accuracy >= other.accuracy
            && self.latency_ms <= other.latency_ms
            && (self.accuracy > other.accuracy || self.latency_ms < other.latency_ms)
    }
}

/// Hypervolume reference: every counted point must have `accuracy >= accuracy_floor` and
/// `latency_ms <= latency_ceiling`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub accuracy_floor: f64,
    pub latency_ceiling: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    /// Position in evaluation order.
    pub index: usize,
    pub config: Configuration,
    pub encoded: Vec<f64>,
    /// `None` when infeasible or when the evaluator failed.
    pub objectives: Option<ObjectivePoint>,
    pub memory: MemoryFootprint,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub epoch_seed: u64,
}

impl EvaluationRecord {
    pub fn is_usable(&self) -> bool {
        self.feasible && self.objectives.is_some()
    }
}

fn default_pool() -> usize {
    256
}

fn default_tau() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSettings {
    pub alpha: f64,
    pub h_limit_bytes: u64,
    pub batch_size: usize,
    pub iterations: usize,
    pub init_samples: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// Feasible random candidates scored per acquisition step.
    #[serde(default = "default_pool")]
    pub pool_size: usize,
    /// Global shrinkage scale of the lengthscale sparsity penalty.
    #[serde(default = "default_tau")]
    pub sparsity_tau: f64,
}

impl SearchSettings {
    pub fn check(&self) -> Result<(), MooError> {
        let bad = |m: &str| Err(MooError::InvalidSettings(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.h_limit_bytes == 0 {
            return bad("h_limit_bytes must be positive");
        }
        if self.mc_samples == 0 || self.pool_size == 0 {
            return bad("mc_samples and pool_size must be positive");
        }
        if self.init_samples == 0 {
            return bad("init_samples must be at least 1");
        }
        if !(self.sparsity_tau > 0.0) {
            return bad("sparsity_tau must be positive");
        }
        Ok(())
    }
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            alpha: 0.5,
            h_limit_bytes: 64 * 1024,
            batch_size: 4,
            iterations: 8,
            init_samples: 8,
            mc_samples: 64,
            seed: 0,
            pool_size: default_pool(),
            sparsity_tau: default_tau(),
        }
    }
}

/// Non-dominated feasible records, in evaluation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub records: Vec<EvaluationRecord>,
    pub reference_point: ReferencePoint,
}

impl ParetoFront {
    pub fn points(&self) -> Vec<ObjectivePoint> {
        self.records.iter().filter_map(|r| r.objectives).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
