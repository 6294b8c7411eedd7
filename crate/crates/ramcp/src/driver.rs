//! The outer fictitious-play loop.
//!
//! Each iteration simulates the tree once per model with weight
//! `M * b_adv(i)`, keeps a running 1/k average of the observed greedy-path
//! returns in `V̂(i)`, optionally recomputes all tree values (full mode), and
//! then replaces `b_adv` with the adversary's best response to `V̂` over the
//! risk envelope. The returned policy is the averaged mixed strategy stored
//! in the tree's `W_br` weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{
    rollout_policy, trajectory_reward, BamdpProblem, Belief, History, HistoryPolicy,
};
use crate::risk::{adversary_best_response, RiskEnvelope};
use crate::tree::{Keying, Mode, ObjectiveTransform, SearchTree};

/// 90% two-sided normal quantile, for confidence half-widths.
const Z_90: f64 = 1.6448536269514722;

/// Fictitious-play iterate: value estimates and adversarial beliefs.
#[derive(Debug, Clone)]
pub struct GameState {
    /// Completed outer iterations.
    pub k: usize,
    /// Running-average greedy-path return per model.
    pub v_hat: Vec<f64>,
    /// The adversary's current best response.
    pub b_adv: Belief,
    /// Running average of the best responses (the fictitious-play mixture).
    pub b_avg: Belief,
    pub envelope: RiskEnvelope,
}

/// The risk-sensitive game value at the current iterate: the envelope's
/// worst-case reweighted expectation of `V̂`.
pub fn game_value(state: &GameState) -> Result<f64> {
    if state.k == 0 {
        return Err(Error::InvalidConfig(
            "game value needs at least one completed iteration".into(),
        ));
    }
    Ok(adversary_best_response(&state.envelope, &state.v_hat)?.objective_value)
}

/// One recorded iteration of the convergence trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub b_adv: Vec<f64>,
    pub b_avg: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub game_value: f64,
}

/// Per-iteration diagnostics. Records every iteration up to 1000, then every
/// 10th (and always the last).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    fn should_record(k: usize, budget: usize) -> bool {
        k <= 1000 || k % 10 == 0 || k == budget
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// Driver configuration.
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub mode: Mode,
    pub budget: usize,
    pub keying: Keying,
    pub transform: ObjectiveTransform,
    /// Keep the per-iteration `V_br` samples (memory-heavy; test diagnostics).
    pub collect_value_samples: bool,
}

impl SearchConfig {
    pub fn new(mode: Mode, budget: usize) -> Self {
        Self {
            mode,
            budget,
            keying: Keying::History,
            transform: ObjectiveTransform::Identity,
            collect_value_samples: false,
        }
    }

    pub fn with_keying(mut self, keying: Keying) -> Self {
        self.keying = keying;
        self
    }

    pub fn with_transform(mut self, transform: ObjectiveTransform) -> Self {
        self.transform = transform;
        self
    }

    pub fn with_value_samples(mut self) -> Self {
        self.collect_value_samples = true;
        self
    }
}

/// The averaged mixed strategy: action distributions are the tree's `W_br`
/// proportions at each visited node.
pub struct MixedPolicy {
    tree: SearchTree,
}

impl MixedPolicy {
    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }
}

impl HistoryPolicy for MixedPolicy {
    fn action_probabilities(&self, history: &History) -> Result<Vec<f64>> {
        self.tree.action_distribution(history).map_err(|e| match e {
            Error::UnknownHistory { history } => Error::PolicyUndefined { history },
            other => other,
        })
    }
}

pub struct SearchOutcome {
    pub policy: MixedPolicy,
    pub state: GameState,
    pub trace: ConvergenceTrace,
    /// `value_samples[k][i]` = the greedy-path return observed for model `i`
    /// at iteration `k+1`, when collection was requested.
    pub value_samples: Option<Vec<Vec<f64>>>,
}

/// Runs the interleaved fictitious-play / tree-construction loop for
/// `config.budget` iterations from the problem's initial state and prior.
pub fn search<R: Rng + ?Sized>(
    problem: &BamdpProblem,
    envelope: &RiskEnvelope,
    config: &SearchConfig,
    rng: &mut R,
) -> Result<SearchOutcome> {
    if config.budget == 0 {
        return Err(Error::InvalidConfig("budget must be >= 1".into()));
    }
    let m = problem.num_models();
    if envelope.num_models() != m {
        return Err(Error::InvalidConfig(format!(
            "envelope covers {} models, problem has {m}",
            envelope.num_models()
        )));
    }

    let mut tree = SearchTree::new(problem, config.keying, config.mode, config.transform)?;
    let root = tree.root_history();
    let mut v_hat = vec![0.0; m];
    let mut b_adv = envelope.base_belief.clone();
    let mut b_avg = vec![0.0; m];
    let mut trace = ConvergenceTrace::default();
    let mut value_samples = config.collect_value_samples.then(Vec::new);

    for k in 1..=config.budget {
        let mut samples = config.collect_value_samples.then(|| vec![0.0; m]);
        for i in 0..m {
            let w = m as f64 * b_adv[i];
            let v_br = tree.simulate(problem, &root, i, w, rng)?;
            v_hat[i] += (v_br - v_hat[i]) / k as f64;
            if let Some(s) = samples.as_mut() {
                s[i] = v_br;
            }
        }
        if config.mode == Mode::Full {
            tree.compute_q_values(problem, &root)?;
        }
        let response = adversary_best_response(envelope, &v_hat)?;
        b_adv = response.belief;
        for i in 0..m {
            b_avg[i] += (b_adv[i] - b_avg[i]) / k as f64;
        }
        if let Some(all) = value_samples.as_mut() {
            all.push(samples.unwrap());
        }
        if ConvergenceTrace::should_record(k, config.budget) {
            trace.rows.push(TraceRow {
                k,
                b_adv: b_adv.weights().to_vec(),
                b_avg: b_avg.clone(),
                v_hat: v_hat.clone(),
                game_value: response.objective_value,
            });
        }
    }

    let b_avg = Belief::new(b_avg)?;
    Ok(SearchOutcome {
        policy: MixedPolicy { tree },
        state: GameState {
            k: config.budget,
            v_hat,
            b_adv,
            b_avg,
            envelope: envelope.clone(),
        },
        trace,
        value_samples,
    })
}

/// Monte Carlo policy evaluation on one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: f64,
    /// Half-width of the 90% normal-approximation confidence interval.
    pub ci90: f64,
}

/// Estimates the expected total reward of `policy` on model `model_index`
/// over `n_rollouts` episodes.
pub fn evaluate_policy<R: Rng + ?Sized>(
    problem: &BamdpProblem,
    policy: &dyn HistoryPolicy,
    model_index: usize,
    n_rollouts: usize,
    rng: &mut R,
) -> Result<Evaluation> {
    if n_rollouts < 2 {
        return Err(Error::InvalidConfig("need at least two rollouts".into()));
    }
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_rollouts {
        let v = trajectory_reward(&rollout_policy(problem, model_index, policy, rng)?);
        sum += v;
        sumsq += v * v;
    }
    let n = n_rollouts as f64;
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(Evaluation {
        mean,
        ci90: Z_90 * (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::build_bandit;
    use crate::oracle::bayes_optimal_value;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_budget_rejected() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::expectation(bandit.prior().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = search(&bandit, &envelope, &SearchConfig::new(Mode::Full, 0), &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn single_model_reduces_to_plain_tree_evaluation() {
        // M = 1: the adversary is pinned to (1); V̂ approaches the exact
        // optimum of the single MDP.
        let bandit = build_bandit();
        let doc = crate::problem::ProblemDocument::from_problem(&bandit);
        let single = crate::problem::ProblemDocument {
            prior: vec![1.0],
            models: doc.models[..1].to_vec(),
            ..doc
        }
        .into_problem()
        .unwrap();
        let envelope = RiskEnvelope::cvar(single.prior().clone(), 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = search(
            &single,
            &envelope,
            &SearchConfig::new(Mode::Full, 4000),
            &mut rng,
        )
        .unwrap();
        for row in &out.trace.rows {
            assert_eq!(row.b_adv, vec![1.0]);
        }
        // exact optimum: two pulls of a3 under theta1 = 1.2
        let exact = bayes_optimal_value(&single, single.prior()).unwrap();
        assert!((exact - 1.2).abs() < 1e-9);
        assert!(
            (out.state.v_hat[0] - exact).abs() < 0.06,
            "v_hat {} vs exact {exact}",
            out.state.v_hat[0]
        );
    }

    #[test]
    fn v_hat_is_the_arithmetic_mean_of_observed_returns() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::cvar(bandit.prior().clone(), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = search(
            &bandit,
            &envelope,
            &SearchConfig::new(Mode::Full, 500).with_value_samples(),
            &mut rng,
        )
        .unwrap();
        let samples = out.value_samples.unwrap();
        for i in 0..2 {
            let mean: f64 =
                samples.iter().map(|row| row[i]).sum::<f64>() / samples.len() as f64;
            assert!(
                (mean - out.state.v_hat[i]).abs() < 1e-12,
                "model {i}: {mean} vs {}",
                out.state.v_hat[i]
            );
        }
    }

    #[test]
    fn b_avg_averages_the_best_responses() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::cvar(bandit.prior().clone(), 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = search(
            &bandit,
            &envelope,
            &SearchConfig::new(Mode::Full, 800),
            &mut rng,
        )
        .unwrap();
        // trace records every iteration here, so recompute the average directly
        let mut sum = vec![0.0; 2];
        for row in &out.trace.rows {
            for i in 0..2 {
                sum[i] += row.b_adv[i];
            }
        }
        for i in 0..2 {
            assert!((sum[i] / 800.0 - out.state.b_avg[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn game_value_with_constant_values_is_the_constant() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::cvar(bandit.prior().clone(), 0.5).unwrap();
        let state = GameState {
            k: 1,
            v_hat: vec![0.42, 0.42],
            b_adv: bandit.prior().clone(),
            b_avg: bandit.prior().clone(),
            envelope,
        };
        assert!((game_value(&state).unwrap() - 0.42).abs() < 1e-12);
    }

    #[test]
    fn game_value_alpha_one_is_prior_expectation() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::expectation(bandit.prior().clone());
        let state = GameState {
            k: 1,
            v_hat: vec![1.0, -1.0],
            b_adv: bandit.prior().clone(),
            b_avg: bandit.prior().clone(),
            envelope,
        };
        assert!((game_value(&state).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn evaluate_deterministic_policy_has_zero_ci() {
        struct First;
        impl HistoryPolicy for First {
            fn action_probabilities(&self, _h: &History) -> Result<Vec<f64>> {
                Ok(vec![1.0, 0.0, 0.0, 0.0])
            }
        }
        // theta1 + always a1 is fully deterministic
        let bandit = build_bandit();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let eval = evaluate_policy(&bandit, &First, 0, 100, &mut rng).unwrap();
        assert_eq!(eval.ci90, 0.0);
        assert!((eval.mean - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn evaluate_policy_matches_v_hat_self_consistency() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::expectation(bandit.prior().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = search(
            &bandit,
            &envelope,
            &SearchConfig::new(Mode::Full, 10_000),
            &mut rng,
        )
        .unwrap();
        let eval = evaluate_policy(&bandit, &out.policy, 0, 10_000, &mut rng).unwrap();
        // combined tolerance: MC error on both sides plus finite-k drift
        assert!(
            (eval.mean - out.state.v_hat[0]).abs() < 0.05,
            "eval {} vs v_hat {}",
            eval.mean,
            out.state.v_hat[0]
        );
    }

    #[test]
    fn policy_undefined_error_names_history() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::expectation(bandit.prior().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = search(
            &bandit,
            &envelope,
            &SearchConfig::new(Mode::Full, 5),
            &mut rng,
        )
        .unwrap();
        let missing = History::from_seq(vec![0, 0, 6, 0, 0]).unwrap();
        match out.policy.action_probabilities(&missing) {
            Err(Error::PolicyUndefined { history }) => assert_eq!(history, vec![0, 0, 6, 0, 0]),
            other => panic!("expected PolicyUndefined, got {other:?}"),
        }
    }

    #[test]
    fn trace_thinning_keeps_every_tenth_after_1000() {
        let bandit = build_bandit();
        let envelope = RiskEnvelope::expectation(bandit.prior().clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = search(
            &bandit,
            &envelope,
            &SearchConfig::new(Mode::Incremental, 1205),
            &mut rng,
        )
        .unwrap();
        let ks: Vec<usize> = out.trace.rows.iter().map(|r| r.k).collect();
        assert!(ks.contains(&999));
        assert!(ks.contains(&1000));
        assert!(!ks.contains(&1001));
        assert!(ks.contains(&1010));
        assert_eq!(*ks.last().unwrap(), 1205);
    }
}
