//! Polytopic risk envelopes and the adversary's best response.
//!
//! A coherent risk metric over the model index is represented by a polytope
//! of density perturbations `ζ` inside the base set
//! `C = { ζ >= 0 : Σ_i b(i) ζ(i) = 1 }`, where `b` is the base belief. The
//! risk value of a payoff vector is the worst-case reweighted expectation
//! over the envelope, and the minimizing reweighted belief
//! `b_adv(i) = b(i) ζ(i)` is the adversary's best response.
//!
//! The CVaR family uses the closed form (sort payoffs ascending, fill each
//! model up to its mass cap `b(i)/α`); the general polytope goes through the
//! dense LP. The two routes are cross-checked against each other in tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::Belief;
use crate::simplex::{simplex_solve, Constraint};

const LINK_TOL: f64 = 1e-9;

/// Which polytope family the envelope comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvelopeKind {
    /// `ζ == 1`: plain expectation under the base belief (CVaR with α = 1).
    Expectation,
    /// The whole density set `C`: minimum over supported models (α -> 0+).
    WorstCase,
    /// `0 <= ζ(i) <= 1/α`.
    CVaR { alpha: f64 },
    /// Extra linear constraints `A ζ <= c` on top of the density set.
    GeneralPolytope {
        coefficients: Vec<Vec<f64>>,
        bounds: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEnvelope {
    pub kind: EnvelopeKind,
    pub base_belief: Belief,
}

impl RiskEnvelope {
    pub fn expectation(base_belief: Belief) -> Self {
        Self {
            kind: EnvelopeKind::Expectation,
            base_belief,
        }
    }

    pub fn worst_case(base_belief: Belief) -> Self {
        Self {
            kind: EnvelopeKind::WorstCase,
            base_belief,
        }
    }

    /// Requires `alpha` in (0, 1].
    pub fn cvar(base_belief: Belief, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InfeasibleEnvelope(format!(
                "cvar alpha must lie in (0, 1], got {alpha}"
            )));
        }
        Ok(Self {
            kind: EnvelopeKind::CVaR { alpha },
            base_belief,
        })
    }

    pub fn general(
        base_belief: Belief,
        coefficients: Vec<Vec<f64>>,
        bounds: Vec<f64>,
    ) -> Result<Self> {
        let m = base_belief.len();
        if coefficients.len() != bounds.len() {
            return Err(Error::InfeasibleEnvelope(format!(
                "{} constraint rows for {} bounds",
                coefficients.len(),
                bounds.len()
            )));
        }
        if coefficients.iter().any(|row| row.len() != m) {
            return Err(Error::InfeasibleEnvelope(format!(
                "constraint rows must have {m} coefficients"
            )));
        }
        Ok(Self {
            kind: EnvelopeKind::GeneralPolytope {
                coefficients,
                bounds,
            },
            base_belief,
        })
    }

    pub fn num_models(&self) -> usize {
        self.base_belief.len()
    }
}

/// The adversary's minimizer: reweighted belief, the density perturbation
/// achieving it, and the attained objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResponse {
    pub belief: Belief,
    pub zeta: Vec<f64>,
    pub objective_value: f64,
}

/// Minimizes `Σ_i values[i] * b(i) ζ(i)` over the envelope.
///
/// Base-belief entries equal to zero contribute nothing; their `ζ` is fixed
/// at 1 and their adversarial mass at 0.
pub fn adversary_best_response(
    envelope: &RiskEnvelope,
    values: &[f64],
) -> Result<AdversarialResponse> {
    let m = envelope.num_models();
    if values.len() != m {
        return Err(Error::InvalidConfig(format!(
            "{} values for {m} models",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("values must be finite".into()));
    }
    match &envelope.kind {
        EnvelopeKind::Expectation => {
            let base = &envelope.base_belief;
            let zeta = base
                .weights()
                .iter()
                .map(|&b| if b > 0.0 { 1.0 } else { 1.0 })
                .collect();
            Ok(AdversarialResponse {
                belief: base.clone(),
                zeta,
                objective_value: base.dot(values),
            })
        }
        EnvelopeKind::WorstCase => {
            let base = &envelope.base_belief;
            let worst = (0..m)
                .filter(|&i| base[i] > 0.0)
                .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
                .expect("belief has positive mass");
            let mut zeta = vec![0.0; m];
            let mut weights = vec![0.0; m];
            for i in 0..m {
                if base[i] == 0.0 {
                    zeta[i] = 1.0;
                }
            }
            zeta[worst] = 1.0 / base[worst];
            weights[worst] = 1.0;
            Ok(AdversarialResponse {
                belief: Belief::new(weights)?,
                zeta,
                objective_value: values[worst],
            })
        }
        EnvelopeKind::CVaR { alpha } => {
            cvar_best_response(&envelope.base_belief, *alpha, values)
        }
        EnvelopeKind::GeneralPolytope {
            coefficients,
            bounds,
        } => general_best_response(&envelope.base_belief, coefficients, bounds, values),
    }
}

/// Convenience wrapper: the risk value is the best-response objective.
pub fn risk_value(envelope: &RiskEnvelope, values: &[f64]) -> Result<f64> {
    Ok(adversary_best_response(envelope, values)?.objective_value)
}

/// Greedy mass assignment: models sorted by value ascending (ties broken by
/// ascending index), each capped at `b(i)/α`, until total mass 1.
fn cvar_best_response(base: &Belief, alpha: f64, values: &[f64]) -> Result<AdversarialResponse> {
    let m = base.len();
    let mut order: Vec<usize> = (0..m).filter(|&i| base[i] > 0.0).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));

    let mut weights = vec![0.0; m];
    let mut remaining = 1.0;
    for &i in &order {
        if remaining <= 0.0 {
            break;
        }
        let cap = base[i] / alpha;
        let take = cap.min(remaining);
        weights[i] = take;
        remaining -= take;
    }
    // Σ_i b(i)/α >= 1 for α <= 1, so the caps cannot be exhausted beyond
    // floating rounding; fold any residual into the last capped model.
    if remaining > 1e-12 {
        return Err(Error::InfeasibleEnvelope(format!(
            "cvar caps sum below 1 (alpha = {alpha})"
        )));
    }
    let mut zeta = vec![0.0; m];
    for i in 0..m {
        if base[i] > 0.0 {
            zeta[i] = weights[i] / base[i];
        } else {
            zeta[i] = 1.0;
        }
    }
    let objective_value = weights.iter().zip(values).map(|(w, v)| w * v).sum();
    Ok(AdversarialResponse {
        belief: Belief::new(weights)?,
        zeta,
        objective_value,
    })
}

fn general_best_response(
    base: &Belief,
    coefficients: &[Vec<f64>],
    bounds: &[f64],
    values: &[f64],
) -> Result<AdversarialResponse> {
    let m = base.len();
    // min Σ values[i] b(i) ζ(i)  s.t.  Σ b(i) ζ(i) = 1,  A ζ <= c,  ζ >= 0
    let objective: Vec<f64> = (0..m).map(|i| values[i] * base[i]).collect();
    let mut constraints = vec![Constraint::eq(base.weights().to_vec(), 1.0)];
    for (row, &b) in coefficients.iter().zip(bounds) {
        constraints.push(Constraint::less_eq(row.clone(), b));
    }
    let sol = simplex_solve(&objective, &constraints).map_err(|e| match e {
        Error::LpInfeasible => {
            Error::InfeasibleEnvelope("general polytope has no valid density".into())
        }
        other => other,
    })?;
    let mut zeta = sol.x;
    let mut weights: Vec<f64> = (0..m).map(|i| base[i] * zeta[i]).collect();
    for i in 0..m {
        if base[i] == 0.0 {
            zeta[i] = 1.0;
            weights[i] = 0.0;
        }
    }
    // Clean LP rounding before the belief validity check.
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > LINK_TOL {
        return Err(Error::InfeasibleEnvelope(format!(
            "lp density sums to {total}"
        )));
    }
    Ok(AdversarialResponse {
        belief: Belief::new(weights)?,
        zeta,
        objective_value: sol.objective,
    })
}

/// LP route for the CVaR envelope. Independent of the closed form; used as
/// its cross-check oracle.
pub fn cvar_best_response_lp(
    base: &Belief,
    alpha: f64,
    values: &[f64],
) -> Result<AdversarialResponse> {
    let m = base.len();
    let mut coefficients = Vec::with_capacity(m);
    let mut bounds = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = vec![0.0; m];
        row[i] = 1.0;
        coefficients.push(row);
        bounds.push(1.0 / alpha);
    }
    general_best_response(base, &coefficients, &bounds, values)
}

/// Rewrites an optimal CVaR response into the canonical tie ordering: within
/// groups of (numerically) equal values, mass is reassigned greedily by
/// ascending model index under the `b(i)/α` caps. Objective-preserving.
pub fn canonicalize_cvar_belief(
    base: &Belief,
    alpha: f64,
    values: &[f64],
    belief: &Belief,
) -> Vec<f64> {
    let m = base.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut canonical = vec![0.0; m];
    let mut g = 0;
    while g < m {
        let mut end = g + 1;
        while end < m && (values[order[end]] - values[order[g]]).abs() <= 1e-9 {
            end += 1;
        }
        let group = &order[g..end];
        let mut mass: f64 = group.iter().map(|&i| belief[i]).sum();
        for &i in group {
            let cap = base[i] / alpha;
            let take = cap.min(mass);
            canonical[i] = take;
            mass -= take;
        }
        g = end;
    }
    canonical
}
