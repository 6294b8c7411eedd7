//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("policy undefined at history {history:?}")]
    PolicyUndefined { history: Vec<u32> },

    #[error("visitation weight must be finite and nonnegative, got {0}")]
    InvalidWeight(f64),

    #[error("risk envelope invalid or infeasible: {0}")]
    InfeasibleEnvelope(String),

    #[error("linear program is infeasible")]
    LpInfeasible,

    #[error("linear program is unbounded")]
    LpUnbounded,

    #[error("history tree too large: estimated {estimated} nodes exceeds limit {limit}")]
    TreeTooLarge { estimated: u64, limit: u64 },

    #[error("importance weights undefined: target puts mass {target_mass} on model {model} where proposal is zero")]
    SupportViolation { model: usize, target_mass: f64 },

    #[error("no best-response weight recorded at history {history:?} (unvisited policy node)")]
    UnvisitedPolicyNode { history: Vec<u32> },

    #[error("history {history:?} is not in the tree")]
    UnknownHistory { history: Vec<u32> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
