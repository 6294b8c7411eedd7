//! Exact brute-force ground truth at desk scale.
//!
//! * [`exact_policy_value`]: forward enumeration of the history tree under
//!   one model.
//! * [`bayes_optimal_value`]: backward induction on the belief-augmented
//!   history tree (risk-neutral optimum).
//! * [`exact_nash_value`]: enumerate all deterministic history policies,
//!   build their exact per-model payoff matrix, and solve the maximin over
//!   policy mixtures against the envelope's vertices as a linear program.
//!
//! Everything here guards against blowup with a memoized node-count estimate
//! and reports oversized instances as structured errors.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::problem::{BamdpProblem, Belief, History, HistoryPolicy};
use crate::risk::{EnvelopeKind, RiskEnvelope};
use crate::simplex::{simplex_solve, Constraint};

/// Default cap on reachable-history / enumeration counts.
pub const DEFAULT_NODE_LIMIT: u64 = 2_000_000;

/// A total map from reachable histories to actions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicHistoryPolicy {
    actions: BTreeMap<Vec<u32>, usize>,
}

impl DeterministicHistoryPolicy {
    pub fn new(actions: BTreeMap<Vec<u32>, usize>) -> Self {
        Self { actions }
    }

    pub fn action_at(&self, history: &History) -> Option<usize> {
        self.actions.get(history.as_slice()).copied()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

impl HistoryPolicy for DeterministicHistoryPolicy {
    fn action_probabilities(&self, history: &History) -> Result<Vec<f64>> {
        let action = self.action_at(history).ok_or(Error::PolicyUndefined {
            history: history.as_slice().to_vec(),
        })?;
        let num_actions = self
            .actions
            .values()
            .max()
            .map(|a| a + 1)
            .unwrap_or(1)
            .max(action + 1);
        let mut probs = vec![0.0; num_actions];
        probs[action] = 1.0;
        Ok(probs)
    }
}

/// Successor states with positive probability under any model.
fn union_support(problem: &BamdpProblem, state: usize, action: usize) -> Vec<usize> {
    let mut support = Vec::new();
    for sp in 0..problem.num_states() {
        if (0..problem.num_models())
            .any(|m| problem.models()[m].row(state, action)[sp] > 0.0)
        {
            support.push(sp);
        }
    }
    support
}

fn is_leaf(problem: &BamdpProblem, state: usize, depth: usize) -> bool {
    depth >= problem.horizon() || problem.is_terminal(state)
}

/// Memoized count of history nodes in the full reachable tree.
fn count_histories(problem: &BamdpProblem) -> u64 {
    fn rec(
        problem: &BamdpProblem,
        state: usize,
        depth: usize,
        memo: &mut HashMap<(usize, usize), u64>,
    ) -> u64 {
        if let Some(&c) = memo.get(&(state, depth)) {
            return c;
        }
        let count = if is_leaf(problem, state, depth) {
            1
        } else {
            let mut total = 1u64;
            for a in 0..problem.num_actions() {
                for sp in union_support(problem, state, a) {
                    total = total.saturating_add(rec(problem, sp, depth + 1, memo));
                }
            }
            total
        };
        memo.insert((state, depth), count);
        count
    }
    let mut memo = HashMap::new();
    rec(problem, problem.initial_state(), 0, &mut memo)
}

/// Memoized count of deterministic policies on the reachable tree.
fn count_policies(problem: &BamdpProblem) -> u64 {
    fn rec(
        problem: &BamdpProblem,
        state: usize,
        depth: usize,
        memo: &mut HashMap<(usize, usize), u64>,
    ) -> u64 {
        if let Some(&c) = memo.get(&(state, depth)) {
            return c;
        }
        let count = if is_leaf(problem, state, depth) {
            1
        } else {
            let mut total = 0u64;
            for a in 0..problem.num_actions() {
                let mut product = 1u64;
                for sp in union_support(problem, state, a) {
                    product = product.saturating_mul(rec(problem, sp, depth + 1, memo));
                }
                total = total.saturating_add(product);
            }
            total
        };
        memo.insert((state, depth), count);
        count
    }
    let mut memo = HashMap::new();
    rec(problem, problem.initial_state(), 0, &mut memo)
}

fn guard(estimated: u64, limit: u64) -> Result<()> {
    if estimated > limit {
        return Err(Error::TreeTooLarge { estimated, limit });
    }
    Ok(())
}

/// Exact expected total reward of `policy` on model `model_index`, by forward
/// enumeration of the reachable history tree.
pub fn exact_policy_value(
    problem: &BamdpProblem,
    policy: &dyn HistoryPolicy,
    model_index: usize,
) -> Result<f64> {
    guard(count_histories(problem), DEFAULT_NODE_LIMIT)?;
    let model = problem.model(model_index)?;
    fn rec(
        problem: &BamdpProblem,
        model: &crate::problem::TransitionModel,
        policy: &dyn HistoryPolicy,
        history: &History,
        depth: usize,
    ) -> Result<f64> {
        let state = history.current_state();
        if is_leaf(problem, state, depth) {
            return Ok(0.0);
        }
        let probs = policy.action_probabilities(history)?;
        let mut total = 0.0;
        for (a, &pa) in probs.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (sp, &p) in model.row(state, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let r = problem.reward(state, a, sp);
                let child = history.extended(a, sp);
                total += pa * p * (r + rec(problem, model, policy, &child, depth + 1)?);
            }
        }
        Ok(total)
    }
    rec(
        problem,
        model,
        policy,
        &History::initial(problem.initial_state()),
        0,
    )
}

/// Exact expected exponential utility `E[-exp(-γ J)]` of `policy` on one
/// model, the ground truth for the utility-shaped baseline.
pub fn exact_utility_value(
    problem: &BamdpProblem,
    policy: &dyn HistoryPolicy,
    gamma: f64,
    model_index: usize,
) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "utility coefficient must be positive, got {gamma}"
        )));
    }
    guard(count_histories(problem), DEFAULT_NODE_LIMIT)?;
    let model = problem.model(model_index)?;
    fn rec(
        problem: &BamdpProblem,
        model: &crate::problem::TransitionModel,
        policy: &dyn HistoryPolicy,
        history: &History,
        depth: usize,
        acc: f64,
        gamma: f64,
    ) -> Result<f64> {
        let state = history.current_state();
        if is_leaf(problem, state, depth) {
            return Ok(-(-gamma * acc).exp());
        }
        let probs = policy.action_probabilities(history)?;
        let mut total = 0.0;
        for (a, &pa) in probs.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            for (sp, &p) in model.row(state, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let r = problem.reward(state, a, sp);
                let child = history.extended(a, sp);
                total += pa * p * rec(problem, model, policy, &child, depth + 1, acc + r, gamma)?;
            }
        }
        Ok(total)
    }
    rec(
        problem,
        model,
        policy,
        &History::initial(problem.initial_state()),
        0,
        0.0,
        gamma,
    )
}

/// Exact risk-neutral optimum by backward induction on the belief-augmented
/// history tree: the posterior over models is updated by Bayes' rule along
/// every branch.
pub fn bayes_optimal_value(problem: &BamdpProblem, belief: &Belief) -> Result<f64> {
    if belief.len() != problem.num_models() {
        return Err(Error::InvalidConfig(format!(
            "belief has {} entries for {} models",
            belief.len(),
            problem.num_models()
        )));
    }
    guard(count_histories(problem), DEFAULT_NODE_LIMIT)?;
    fn rec(problem: &BamdpProblem, belief: &[f64], state: usize, depth: usize) -> f64 {
        if is_leaf(problem, state, depth) {
            return 0.0;
        }
        let m = problem.num_models();
        let mut best = f64::NEG_INFINITY;
        for a in 0..problem.num_actions() {
            let mut total = 0.0;
            for sp in 0..problem.num_states() {
                let mut mix = 0.0;
                for i in 0..m {
                    mix += belief[i] * problem.models()[i].row(state, a)[sp];
                }
                if mix <= 0.0 {
                    continue;
                }
                let posterior: Vec<f64> = (0..m)
                    .map(|i| belief[i] * problem.models()[i].row(state, a)[sp] / mix)
                    .collect();
                let r = problem.reward(state, a, sp);
                total += mix * (r + rec(problem, &posterior, sp, depth + 1));
            }
            if total > best {
                best = total;
            }
        }
        best
    }
    Ok(rec(
        problem,
        belief.weights(),
        problem.initial_state(),
        0,
    ))
}

/// All deterministic policies on the reachable history tree.
pub fn enumerate_policies(problem: &BamdpProblem) -> Result<Vec<DeterministicHistoryPolicy>> {
    guard(count_policies(problem), 200_000)?;
    type Fragment = Vec<(Vec<u32>, usize)>;
    fn rec(problem: &BamdpProblem, history: &History, depth: usize) -> Vec<Fragment> {
        let state = history.current_state();
        if is_leaf(problem, state, depth) {
            return vec![Vec::new()];
        }
        let mut out = Vec::new();
        for a in 0..problem.num_actions() {
            let support = union_support(problem, state, a);
            let child_lists: Vec<Vec<Fragment>> = support
                .iter()
                .map(|&sp| rec(problem, &history.extended(a, sp), depth + 1))
                .collect();
            // cartesian product over the successor branches
            let mut combos: Vec<Fragment> = vec![vec![(history.as_slice().to_vec(), a)]];
            for list in &child_lists {
                let mut next = Vec::with_capacity(combos.len() * list.len());
                for c in &combos {
                    for frag in list {
                        let mut merged = c.clone();
                        merged.extend(frag.iter().cloned());
                        next.push(merged);
                    }
                }
                combos = next;
            }
            out.extend(combos);
        }
        out
    }
    let fragments = rec(problem, &History::initial(problem.initial_state()), 0);
    Ok(fragments
        .into_iter()
        .map(|frag| DeterministicHistoryPolicy::new(frag.into_iter().collect()))
        .collect())
}

/// Exact per-model values of every enumerated deterministic policy.
pub struct PayoffMatrix {
    pub policies: Vec<DeterministicHistoryPolicy>,
    /// `values[p][i]` = exact expected reward of policy `p` on model `i`.
    pub values: Vec<Vec<f64>>,
}

impl PayoffMatrix {
    pub fn build(problem: &BamdpProblem) -> Result<Self> {
        let policies = enumerate_policies(problem)?;
        let values = policies
            .iter()
            .map(|p| {
                (0..problem.num_models())
                    .map(|i| exact_policy_value(problem, p, i))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { policies, values })
    }
}

/// Vertices of the envelope in reweighted-belief space.
pub fn envelope_vertices(envelope: &RiskEnvelope) -> Result<Vec<Vec<f64>>> {
    let base = &envelope.base_belief;
    let m = base.len();
    match &envelope.kind {
        EnvelopeKind::Expectation => Ok(vec![base.weights().to_vec()]),
        EnvelopeKind::WorstCase => Ok((0..m)
            .filter(|&i| base[i] > 0.0)
            .map(|i| {
                let mut v = vec![0.0; m];
                v[i] = 1.0;
                v
            })
            .collect()),
        EnvelopeKind::CVaR { alpha } => {
            let support: Vec<usize> = (0..m).filter(|&i| base[i] > 0.0).collect();
            if support.len() > 20 {
                return Err(Error::TreeTooLarge {
                    estimated: 1u64 << support.len().min(63),
                    limit: 1 << 20,
                });
            }
            let caps: Vec<f64> = (0..m).map(|i| base[i] / alpha).collect();
            let mut vertices: Vec<Vec<f64>> = Vec::new();
            let mut push = |v: Vec<f64>, vertices: &mut Vec<Vec<f64>>| {
                if !vertices
                    .iter()
                    .any(|u| u.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12))
                {
                    vertices.push(v);
                }
            };
            for mask in 0u32..(1 << support.len()) {
                let in_set: Vec<usize> = support
                    .iter()
                    .enumerate()
                    .filter(|(bit, _)| mask & (1 << bit) != 0)
                    .map(|(_, &i)| i)
                    .collect();
                let mass: f64 = in_set.iter().map(|&i| caps[i]).sum();
                if mass > 1.0 + 1e-12 {
                    continue;
                }
                if (mass - 1.0).abs() <= 1e-12 {
                    let mut v = vec![0.0; m];
                    for &i in &in_set {
                        v[i] = caps[i];
                    }
                    push(v, &mut vertices);
                    continue;
                }
                let rem = 1.0 - mass;
                for &j in &support {
                    if in_set.contains(&j) || rem > caps[j] + 1e-12 {
                        continue;
                    }
                    let mut v = vec![0.0; m];
                    for &i in &in_set {
                        v[i] = caps[i];
                    }
                    v[j] = rem;
                    push(v, &mut vertices);
                }
            }
            Ok(vertices)
        }
        EnvelopeKind::GeneralPolytope { .. } => Err(Error::InvalidConfig(
            "exact equilibrium supports the expectation, worst-case, and cvar envelopes".into(),
        )),
    }
}

/// The exact equilibrium of the risk-sensitive planning game.
pub struct NashSolution {
    pub value: f64,
    /// Optimal mixture over deterministic policies (weights > 1e-9).
    pub policy_mixture: Vec<(DeterministicHistoryPolicy, f64)>,
    /// The adversary's equilibrium reweighted belief.
    pub adversary_belief: Belief,
}

/// Enumerates deterministic policies, builds the exact payoff matrix, and
/// solves the maximin over policy mixtures with one constraint per envelope
/// vertex. The adversary side comes from the paired minimax program.
pub fn exact_nash_value(problem: &BamdpProblem, envelope: &RiskEnvelope) -> Result<NashSolution> {
    if envelope.num_models() != problem.num_models() {
        return Err(Error::InvalidConfig(format!(
            "envelope covers {} models, problem has {}",
            envelope.num_models(),
            problem.num_models()
        )));
    }
    let matrix = PayoffMatrix::build(problem)?;
    let vertices = envelope_vertices(envelope)?;

    // payoff-equivalent policies collapse to one representative row
    let mut rep_rows: Vec<usize> = Vec::new();
    {
        let mut seen: HashMap<Vec<i64>, ()> = HashMap::new();
        for (p, vals) in matrix.values.iter().enumerate() {
            let key: Vec<i64> = vals.iter().map(|v| (v * 1e12).round() as i64).collect();
            if seen.insert(key, ()).is_none() {
                rep_rows.push(p);
            }
        }
    }
    let payoff: Vec<Vec<f64>> = rep_rows
        .iter()
        .map(|&p| {
            vertices
                .iter()
                .map(|v| v.iter().zip(&matrix.values[p]).map(|(b, x)| b * x).sum())
                .collect()
        })
        .collect();
    let n = payoff.len();
    let k = vertices.len();

    // maximin: vars [x_0..x_{n-1}, v+, v-], maximize v = v+ - v-
    let mut objective = vec![0.0; n + 2];
    objective[n] = -1.0;
    objective[n + 1] = 1.0;
    let mut constraints = Vec::with_capacity(k + 1);
    let mut simplex_row = vec![1.0; n];
    simplex_row.extend([0.0, 0.0]);
    constraints.push(Constraint::eq(simplex_row, 1.0));
    for j in 0..k {
        let mut row = vec![0.0; n + 2];
        for (idx, p) in payoff.iter().enumerate() {
            row[idx] = -p[j];
        }
        row[n] = 1.0;
        row[n + 1] = -1.0;
        constraints.push(Constraint::less_eq(row, 0.0));
    }
    let primal = simplex_solve(&objective, &constraints)?;
    let value = primal.x[n] - primal.x[n + 1];

    // minimax over vertex mixtures: vars [y_0..y_{k-1}, u+, u-], minimize u
    let mut objective = vec![0.0; k + 2];
    objective[k] = 1.0;
    objective[k + 1] = -1.0;
    let mut constraints = Vec::with_capacity(n + 1);
    let mut simplex_row = vec![1.0; k];
    simplex_row.extend([0.0, 0.0]);
    constraints.push(Constraint::eq(simplex_row, 1.0));
    for p in &payoff {
        let mut row = vec![0.0; k + 2];
        row[..k].copy_from_slice(p);
        row[k] = -1.0;
        row[k + 1] = 1.0;
        constraints.push(Constraint::less_eq(row, 0.0));
    }
    let dual = simplex_solve(&objective, &constraints)?;
    let dual_value = dual.x[k] - dual.x[k + 1];
    debug_assert!(
        (value - dual_value).abs() < 1e-6,
        "maximin {value} vs minimax {dual_value}"
    );

    let m = problem.num_models();
    let mut adversary = vec![0.0; m];
    for (j, v) in vertices.iter().enumerate() {
        for i in 0..m {
            adversary[i] += dual.x[j] * v[i];
        }
    }
    let total: f64 = adversary.iter().sum();
    for w in adversary.iter_mut() {
        *w /= total;
    }

    let policy_mixture = rep_rows
        .iter()
        .enumerate()
        .filter(|(idx, _)| primal.x[*idx] > 1e-9)
        .map(|(idx, &p)| (matrix.policies[p].clone(), primal.x[idx]))
        .collect();

    Ok(NashSolution {
        value,
        policy_mixture,
        adversary_belief: Belief::new(adversary)?,
    })
}
