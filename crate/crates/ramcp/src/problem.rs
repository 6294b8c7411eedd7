//! Bayes-adaptive planning problem: a discrete MDP family with a finite prior
//! over transition models, histories, trajectories, and exact rollout
//! semantics.
//!
//! A problem bundles `M` candidate transition models `T_θ` over a shared
//! state/action space with a stage reward `R(s, a, s')`, a horizon `H`, and a
//! prior belief over which model governs the episode. Terminal states absorb:
//! rollouts and tree simulation stop there and collect no further reward.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-12;
const BELIEF_SUM_TOL: f64 = 1e-9;

/// A probability distribution over the `M` candidate models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief(Vec<f64>);

impl Belief {
    /// Validates nonnegativity and normalization (within 1e-9).
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidProblem("belief must be non-empty".into()));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidProblem(format!(
                "belief entries must be finite and nonnegative: {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > BELIEF_SUM_TOL {
            return Err(Error::InvalidProblem(format!(
                "belief sums to {sum}, expected 1 within {BELIEF_SUM_TOL}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    /// Point mass on a single model.
    pub fn delta(index: usize, len: usize) -> Self {
        let mut w = vec![0.0; len];
        w[index] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(b, v)| b * v).sum()
    }
}

impl std::ops::Index<usize> for Belief {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// One candidate dynamics model: `probabilities[(s, a)]` is a distribution
/// over successor states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    num_states: usize,
    num_actions: usize,
    /// Flat row-major `(s, a, s')` probabilities.
    probabilities: Vec<f64>,
}

impl TransitionModel {
    /// `rows[s][a][s']` must each be a distribution (nonnegative, sums to 1
    /// within 1e-12).
    pub fn new(rows: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let num_states = rows.len();
        if num_states == 0 {
            return Err(Error::InvalidProblem("model has no states".into()));
        }
        let num_actions = rows[0].len();
        if num_actions == 0 {
            return Err(Error::InvalidProblem("model has no actions".into()));
        }
        let mut probabilities = Vec::with_capacity(num_states * num_actions * num_states);
        for (s, per_action) in rows.iter().enumerate() {
            if per_action.len() != num_actions {
                return Err(Error::InvalidProblem(format!(
                    "state {s} has {} action rows, expected {num_actions}",
                    per_action.len()
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != num_states {
                    return Err(Error::InvalidProblem(format!(
                        "row (s={s}, a={a}) has {} entries, expected {num_states}",
                        row.len()
                    )));
                }
                if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                    return Err(Error::InvalidProblem(format!(
                        "row (s={s}, a={a}) has a negative or non-finite entry"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidProblem(format!(
                        "row (s={s}, a={a}) sums to {sum}, expected 1 within {ROW_SUM_TOL}"
                    )));
                }
                probabilities.extend_from_slice(row);
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probabilities,
        })
    }

    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        let base = (state * self.num_actions + action) * self.num_states;
        &self.probabilities[base..base + self.num_states]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

/// The planning problem: `M` candidate models over a shared MDP skeleton.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BamdpProblem {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    models: Vec<TransitionModel>,
    /// Flat row-major `(s, a, s')` stage rewards.
    rewards: Vec<f64>,
    prior: Belief,
    terminal_states: BTreeSet<usize>,
    initial_state: usize,
}

impl BamdpProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        models: Vec<TransitionModel>,
        rewards: Vec<f64>,
        prior: Belief,
        terminal_states: BTreeSet<usize>,
        initial_state: usize,
    ) -> Result<Self> {
        if num_actions == 0 {
            return Err(Error::InvalidProblem("num_actions must be >= 1".into()));
        }
        if horizon == 0 {
            return Err(Error::InvalidProblem("horizon must be >= 1".into()));
        }
        if models.is_empty() {
            return Err(Error::InvalidProblem("need at least one model".into()));
        }
        for (i, m) in models.iter().enumerate() {
            if m.num_states() != num_states || m.num_actions() != num_actions {
                return Err(Error::InvalidProblem(format!(
                    "model {i} has shape ({}, {}), expected ({num_states}, {num_actions})",
                    m.num_states(),
                    m.num_actions()
                )));
            }
        }
        if rewards.len() != num_states * num_actions * num_states {
            return Err(Error::InvalidProblem(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                num_states * num_actions * num_states
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidProblem("rewards must be finite".into()));
        }
        if prior.len() != models.len() {
            return Err(Error::InvalidProblem(format!(
                "prior has {} entries for {} models",
                prior.len(),
                models.len()
            )));
        }
        if initial_state >= num_states {
            return Err(Error::IndexOutOfRange {
                what: "initial_state",
                index: initial_state,
                limit: num_states,
            });
        }
        if let Some(&t) = terminal_states.iter().find(|&&t| t >= num_states) {
            return Err(Error::IndexOutOfRange {
                what: "terminal state",
                index: t,
                limit: num_states,
            });
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            models,
            rewards,
            prior,
            terminal_states,
            initial_state,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn prior(&self) -> &Belief {
        &self.prior
    }

    pub fn model(&self, index: usize) -> Result<&TransitionModel> {
        self.models.get(index).ok_or(Error::IndexOutOfRange {
            what: "model",
            index,
            limit: self.models.len(),
        })
    }

    pub fn models(&self) -> &[TransitionModel] {
        &self.models
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal_states.contains(&state)
    }

    pub fn terminal_states(&self) -> &BTreeSet<usize> {
        &self.terminal_states
    }

    pub fn reward(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.rewards[(s * self.num_actions + a) * self.num_states + s_next]
    }

    /// `H * (max stage reward - min stage reward)`, the return range used by
    /// the statistical tests.
    pub fn value_range(&self) -> f64 {
        let max = self.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        self.horizon as f64 * (max - min)
    }

    /// Loads a problem from the JSON document format (see `docs/problem-schema.md`).
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProblemDocument = serde_json::from_str(text)?;
        doc.into_problem()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ProblemDocument::from_problem(self))?)
    }
}

/// On-disk JSON schema for problem definitions.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub schema_version: u32,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial_state: usize,
    pub terminal_states: Vec<usize>,
    pub prior: Vec<f64>,
    /// `models[i][s][a][s']`
    pub models: Vec<Vec<Vec<Vec<f64>>>>,
    /// `rewards[s][a][s']`
    pub rewards: Vec<Vec<Vec<f64>>>,
}

impl ProblemDocument {
    pub fn into_problem(self) -> Result<BamdpProblem> {
        if self.schema_version != 1 {
            return Err(Error::InvalidProblem(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        let models = self
            .models
            .into_iter()
            .map(TransitionModel::new)
            .collect::<Result<Vec<_>>>()?;
        let mut rewards = Vec::with_capacity(self.num_states * self.num_actions * self.num_states);
        for per_state in &self.rewards {
            for per_action in per_state {
                rewards.extend_from_slice(per_action);
            }
        }
        BamdpProblem::new(
            self.num_states,
            self.num_actions,
            self.horizon,
            models,
            rewards,
            Belief::new(self.prior)?,
            self.terminal_states.into_iter().collect(),
            self.initial_state,
        )
    }

    pub fn from_problem(p: &BamdpProblem) -> Self {
        let models = p
            .models
            .iter()
            .map(|m| {
                (0..p.num_states)
                    .map(|s| {
                        (0..p.num_actions)
                            .map(|a| m.row(s, a).to_vec())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..p.num_states)
            .map(|s| {
                (0..p.num_actions)
                    .map(|a| {
                        (0..p.num_states)
                            .map(|sp| p.reward(s, a, sp))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            schema_version: 1,
            num_states: p.num_states,
            num_actions: p.num_actions,
            horizon: p.horizon,
            initial_state: p.initial_state,
            terminal_states: p.terminal_states.iter().copied().collect(),
            prior: p.prior.weights().to_vec(),
            models,
            rewards,
        }
    }
}

/// An alternating state/action sequence `s0, a0, s1, ...` ending in a state.
///
/// The raw sequence doubles as the canonical node key of the search tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct History {
    seq: Vec<u32>,
}

impl History {
    pub fn initial(state: usize) -> Self {
        Self {
            seq: vec![state as u32],
        }
    }

    /// Validates alternation: odd length, starting with a state.
    pub fn from_seq(seq: Vec<u32>) -> Result<Self> {
        if seq.len() % 2 == 0 {
            return Err(Error::InvalidProblem(format!(
                "history must have odd length (s,a,s,...,s), got {}",
                seq.len()
            )));
        }
        Ok(Self { seq })
    }

    /// Number of actions taken so far.
    pub fn depth(&self) -> usize {
        self.seq.len() / 2
    }

    pub fn current_state(&self) -> usize {
        *self.seq.last().expect("history is never empty") as usize
    }

    pub fn push_step(&mut self, action: usize, next_state: usize) {
        self.seq.push(action as u32);
        self.seq.push(next_state as u32);
    }

    pub fn extended(&self, action: usize, next_state: usize) -> Self {
        let mut h = self.clone();
        h.push_step(action, next_state);
        h
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.seq
    }

    /// Action taken at step `t`, if any.
    pub fn action_at(&self, t: usize) -> Option<usize> {
        self.seq.get(2 * t + 1).map(|a| *a as usize)
    }

    pub fn state_at(&self, t: usize) -> Option<usize> {
        self.seq.get(2 * t).map(|s| *s as usize)
    }
}

/// A realized episode: history plus the stage reward collected at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub history: History,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(history: History, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != history.depth() {
            return Err(Error::InvalidProblem(format!(
                "trajectory has {} rewards for {} steps",
                rewards.len(),
                history.depth()
            )));
        }
        Ok(Self { history, rewards })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Total trajectory reward: the sum of the stage rewards.
pub fn trajectory_reward(trajectory: &Trajectory) -> f64 {
    trajectory.rewards.iter().sum()
}

/// A (possibly stochastic) history-dependent policy.
pub trait HistoryPolicy {
    /// Distribution over actions at `history`. Must be a valid distribution
    /// over `num_actions` entries.
    fn action_probabilities(&self, history: &History) -> Result<Vec<f64>>;
}

/// Takes every action uniformly at random. Useful as a baseline and in tests.
pub struct UniformPolicy {
    pub num_actions: usize,
}

impl HistoryPolicy for UniformPolicy {
    fn action_probabilities(&self, _history: &History) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.num_actions as f64; self.num_actions])
    }
}

/// Draws an index from an explicit probability vector.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Fall through on accumulated rounding: last entry with positive mass.
    probs
        .iter()
        .rposition(|p| *p > 0.0)
        .expect("probability vector has positive mass")
}

/// Samples `s' ~ T_θ(s, a)` and returns `(s', R(s, a, s'))`.
pub fn sample_transition<R: Rng + ?Sized>(
    problem: &BamdpProblem,
    model_index: usize,
    state: usize,
    action: usize,
    rng: &mut R,
) -> Result<(usize, f64)> {
    let model = problem.model(model_index)?;
    if state >= problem.num_states() {
        return Err(Error::IndexOutOfRange {
            what: "state",
            index: state,
            limit: problem.num_states(),
        });
    }
    if action >= problem.num_actions() {
        return Err(Error::IndexOutOfRange {
            what: "action",
            index: action,
            limit: problem.num_actions(),
        });
    }
    let next = sample_categorical(model.row(state, action), rng);
    Ok((next, problem.reward(state, action, next)))
}

/// Rolls out `policy` on model `model_index` for up to `H` steps, stopping
/// early at terminal states (which collect no further reward).
pub fn rollout_policy<R: Rng + ?Sized>(
    problem: &BamdpProblem,
    model_index: usize,
    policy: &dyn HistoryPolicy,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut history = History::initial(problem.initial_state());
    let mut rewards = Vec::with_capacity(problem.horizon());
    for _ in 0..problem.horizon() {
        let state = history.current_state();
        if problem.is_terminal(state) {
            break;
        }
        let probs = policy.action_probabilities(&history)?;
        let action = sample_categorical(&probs, rng);
        let (next, r) = sample_transition(problem, model_index, state, action, rng)?;
        history.push_step(action, next);
        rewards.push(r);
    }
    Trajectory::new(history, rewards)
}
