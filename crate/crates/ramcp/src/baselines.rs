//! Comparison planners: exponential-utility reward shaping solved
//! risk-neutrally, and the state-aliased planner whose tree is keyed by
//! `(state, depth)` instead of the full history.

use rand::Rng;

use crate::driver::{search, SearchConfig, SearchOutcome};
use crate::error::{Error, Result};
use crate::problem::BamdpProblem;
use crate::risk::RiskEnvelope;
use crate::tree::{Keying, Mode, ObjectiveTransform};

/// Runs the driver risk-neutrally on the exponential utility
/// `U(J) = -exp(-γ J)` of the trajectory return, applied once at the leaves.
/// Reported evaluation of the resulting policy still uses raw returns.
pub fn exponential_utility_search<R: Rng + ?Sized>(
    problem: &BamdpProblem,
    gamma: f64,
    mode: Mode,
    budget: usize,
    rng: &mut R,
) -> Result<SearchOutcome> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "utility coefficient must be positive and finite, got {gamma}"
        )));
    }
    let envelope = RiskEnvelope::expectation(problem.prior().clone());
    let config = SearchConfig::new(mode, budget)
        .with_transform(ObjectiveTransform::ExponentialUtility { gamma });
    search(problem, &envelope, &config, rng)
}

/// Identical driver, but all histories reaching the same state at the same
/// depth share one node, so the policy is state-and-depth dependent.
pub fn rmcp_search<R: Rng + ?Sized>(
    problem: &BamdpProblem,
    envelope: &RiskEnvelope,
    mode: Mode,
    budget: usize,
    rng: &mut R,
) -> Result<SearchOutcome> {
    let config = SearchConfig::new(mode, budget).with_keying(Keying::StateDepth);
    search(problem, envelope, &config, rng)
}
