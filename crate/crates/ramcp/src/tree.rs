//! The history-keyed statistics tree.
//!
//! Each node records visit counts `N`, cumulative visitation weights `W`,
//! greedy-action weights `W_br`, and value estimates `V`/`Q`. A call to
//! [`SearchTree::simulate`] expands *every* action at every node it reaches,
//! samples one successor per action from the given model, and adds the call's
//! weight to all touched statistics; it returns the return of the visit's
//! greedy-consistent path. [`SearchTree::compute_q_values`] recomputes all
//! `Q`/`V` estimates bottom-up from the empirical transition probabilities
//! `W(has') / W(ha)`. [`SearchTree::avg_action`] samples from the averaged
//! mixed strategy, i.e. proportional to `W_br`.
//!
//! Nodes are keyed by the full history by default. The state-aliased variant
//! keys them by `(state, depth)` instead, collapsing all histories that reach
//! the same state at the same depth; all statistics aggregate across the
//! merged histories.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::problem::{sample_categorical, sample_transition, BamdpProblem, Belief, History};

/// Value-estimate update rule: recompute everything after each outer
/// iteration, or update incrementally inside the simulation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Full,
    Incremental,
}

/// Node identity scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keying {
    History,
    StateDepth,
}

/// What the tree optimizes: raw expected return, or the expected exponential
/// utility `-exp(-γ J)` of the trajectory return, applied once at the leaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObjectiveTransform {
    Identity,
    ExponentialUtility { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildEdge {
    pub node: usize,
    /// Cumulative weight carried through this `(h, a) -> s'` edge.
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ActionStats {
    pub visits: u64,
    pub weight: f64,
    pub br_weight: f64,
    pub q: f64,
    pub children: BTreeMap<usize, ChildEdge>,
}

#[derive(Debug, Clone)]
pub struct NodeStats {
    pub state: usize,
    pub depth: usize,
    /// Raw stage rewards accumulated from the root to this node. Only
    /// meaningful under history keying (merged nodes keep first-arrival).
    pub path_reward: f64,
    pub visits: u64,
    pub weight: f64,
    pub value: f64,
    pub actions: Vec<ActionStats>,
}

pub struct SearchTree {
    mode: Mode,
    keying: Keying,
    transform: ObjectiveTransform,
    nodes: Vec<NodeStats>,
    merged: HashMap<(usize, usize), usize>,
    root: usize,
}

impl SearchTree {
    pub fn new(
        problem: &BamdpProblem,
        keying: Keying,
        mode: Mode,
        transform: ObjectiveTransform,
    ) -> Result<Self> {
        if matches!(transform, ObjectiveTransform::ExponentialUtility { .. })
            && keying == Keying::StateDepth
        {
            return Err(Error::InvalidConfig(
                "exponential utility needs history keying (leaf utility depends on the path)"
                    .into(),
            ));
        }
        if let ObjectiveTransform::ExponentialUtility { gamma } = transform {
            if !(gamma > 0.0) || !gamma.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "utility coefficient must be positive and finite, got {gamma}"
                )));
            }
        }
        let root_state = problem.initial_state();
        let mut tree = Self {
            mode,
            keying,
            transform,
            nodes: Vec::new(),
            merged: HashMap::new(),
            root: 0,
        };
        tree.root = tree.push_node(root_state, 0, 0.0);
        Ok(tree)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn keying(&self) -> Keying {
        self.keying
    }

    pub fn transform(&self) -> ObjectiveTransform {
        self.transform
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root_history(&self) -> History {
        History::initial(self.nodes[self.root].state)
    }

    /// Read access to a node's statistics, if the history is in the tree.
    pub fn node_stats(&self, history: &History) -> Option<&NodeStats> {
        self.resolve(history).map(|i| &self.nodes[i])
    }

    fn push_node(&mut self, state: usize, depth: usize, path_reward: f64) -> usize {
        let id = self.nodes.len();
        self.nodes.push(NodeStats {
            state,
            depth,
            path_reward,
            visits: 0,
            weight: 0.0,
            value: 0.0,
            actions: Vec::new(),
        });
        if self.keying == Keying::StateDepth {
            self.merged.insert((depth, state), id);
        }
        id
    }

    fn resolve(&self, history: &History) -> Option<usize> {
        match self.keying {
            Keying::History => {
                if history.state_at(0)? != self.nodes[self.root].state {
                    return None;
                }
                let mut node = self.root;
                for t in 0..history.depth() {
                    let a = history.action_at(t)?;
                    let sp = history.state_at(t + 1)?;
                    let edge = self.nodes[node].actions.get(a)?.children.get(&sp)?;
                    node = edge.node;
                }
                Some(node)
            }
            Keying::StateDepth => self
                .merged
                .get(&(history.depth(), history.current_state()))
                .copied(),
        }
    }

    fn resolve_or_create(&mut self, problem: &BamdpProblem, history: &History) -> Result<usize> {
        if history.state_at(0) != Some(self.nodes[self.root].state) {
            return Err(Error::UnknownHistory {
                history: history.as_slice().to_vec(),
            });
        }
        let mut node = self.root;
        for t in 0..history.depth() {
            let a = history.action_at(t).unwrap();
            let sp = history.state_at(t + 1).unwrap();
            if a >= problem.num_actions() || sp >= problem.num_states() {
                return Err(Error::UnknownHistory {
                    history: history.as_slice().to_vec(),
                });
            }
            self.ensure_actions(node, problem.num_actions());
            let r = problem.reward(self.nodes[node].state, a, sp);
            node = self.child_node(node, a, sp, r, 0.0);
        }
        Ok(node)
    }

    fn ensure_actions(&mut self, node: usize, num_actions: usize) {
        if self.nodes[node].actions.is_empty() {
            self.nodes[node].actions = vec![ActionStats::default(); num_actions];
        }
    }

    /// Returns the child node for `(node, action, next_state)`, creating it
    /// on first visit, and adds `weight` to the traversed edge.
    fn child_node(
        &mut self,
        node: usize,
        action: usize,
        next_state: usize,
        reward: f64,
        weight: f64,
    ) -> usize {
        if let Some(edge) = self.nodes[node].actions[action].children.get_mut(&next_state) {
            edge.weight += weight;
            return edge.node;
        }
        let depth = self.nodes[node].depth + 1;
        let path_reward = self.nodes[node].path_reward + reward;
        let child = match self.keying {
            Keying::History => self.push_node(next_state, depth, path_reward),
            Keying::StateDepth => match self.merged.get(&(depth, next_state)) {
                Some(&existing) => existing,
                None => self.push_node(next_state, depth, path_reward),
            },
        };
        self.nodes[node].actions[action]
            .children
            .insert(next_state, ChildEdge { node: child, weight });
        child
    }

    fn stage_contribution(&self, reward: f64) -> f64 {
        match self.transform {
            ObjectiveTransform::Identity => reward,
            ObjectiveTransform::ExponentialUtility { .. } => 0.0,
        }
    }

    fn leaf_value(&self, path_reward: f64) -> f64 {
        match self.transform {
            ObjectiveTransform::Identity => 0.0,
            ObjectiveTransform::ExponentialUtility { gamma } => -(-gamma * path_reward).exp(),
        }
    }

    /// One weighted simulation pass from `history` under model
    /// `model_index`. Expands every action at every visited node, increments
    /// `N` by one and `W` by `weight` along the way, and returns the visit's
    /// greedy-path return `V_br`.
    pub fn simulate<R: Rng + ?Sized>(
        &mut self,
        problem: &BamdpProblem,
        history: &History,
        model_index: usize,
        weight: f64,
        rng: &mut R,
    ) -> Result<f64> {
        if !weight.is_finite() || weight < 0.0 {
            return Err(Error::InvalidWeight(weight));
        }
        problem.model(model_index)?;
        if history.depth() > problem.horizon() {
            return Err(Error::UnknownHistory {
                history: history.as_slice().to_vec(),
            });
        }
        let node = self.resolve_or_create(problem, history)?;
        self.simulate_node(problem, node, model_index, weight, rng)
    }

    fn simulate_node<R: Rng + ?Sized>(
        &mut self,
        problem: &BamdpProblem,
        node: usize,
        model_index: usize,
        weight: f64,
        rng: &mut R,
    ) -> Result<f64> {
        let (state, depth) = {
            let n = &mut self.nodes[node];
            n.visits += 1;
            n.weight += weight;
            (n.state, n.depth)
        };
        if depth >= problem.horizon() || problem.is_terminal(state) {
            return Ok(self.leaf_value(self.nodes[node].path_reward));
        }
        let num_actions = problem.num_actions();
        self.ensure_actions(node, num_actions);

        let mut visit_q = vec![0.0; num_actions];
        for a in 0..num_actions {
            {
                let st = &mut self.nodes[node].actions[a];
                st.visits += 1;
                st.weight += weight;
            }
            let (next, r) = sample_transition(problem, model_index, state, a, rng)?;
            let child = self.child_node(node, a, next, r, weight);
            let v_child = self.simulate_node(problem, child, model_index, weight, rng)?;
            visit_q[a] = self.stage_contribution(r) + v_child;
            if self.mode == Mode::Incremental {
                let st = &mut self.nodes[node].actions[a];
                st.q += (weight * visit_q[a] - st.q) / st.visits as f64;
            }
        }

        // Greedy action over the final stored Q values, lowest index on ties.
        let greedy = {
            let actions = &self.nodes[node].actions;
            let mut best = 0;
            for a in 1..num_actions {
                if actions[a].q > actions[best].q {
                    best = a;
                }
            }
            best
        };
        let v_br = visit_q[greedy];
        self.nodes[node].actions[greedy].br_weight += weight;
        if self.mode == Mode::Incremental {
            let n = &mut self.nodes[node];
            n.value += (weight * v_br - n.value) / n.visits as f64;
        }
        Ok(v_br)
    }

    /// Dynamic-programming recomputation of all `Q`/`V` estimates from the
    /// accumulated weights: `Q(h,a) = Σ_{visited s'} (W(has')/W(ha)) (R + V(has'))`,
    /// `V(h) = max_a Q(h,a)`, zero at the leaves. Returns the recomputed
    /// value at `history`. Idempotent between simulation passes.
    pub fn compute_q_values(&mut self, problem: &BamdpProblem, history: &History) -> Result<f64> {
        let target = self.resolve(history).ok_or_else(|| Error::UnknownHistory {
            history: history.as_slice().to_vec(),
        })?;
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_unstable_by_key(|&i| std::cmp::Reverse(self.nodes[i].depth));
        for i in order {
            let leaf = self.nodes[i].depth >= problem.horizon()
                || problem.is_terminal(self.nodes[i].state);
            if leaf {
                self.nodes[i].value = self.leaf_value(self.nodes[i].path_reward);
                continue;
            }
            if self.nodes[i].actions.is_empty() {
                // created on a path but never simulated; nothing to estimate
                self.nodes[i].value = 0.0;
                continue;
            }
            let state = self.nodes[i].state;
            let num_actions = self.nodes[i].actions.len();
            let mut best = f64::NEG_INFINITY;
            for a in 0..num_actions {
                let st = &self.nodes[i].actions[a];
                let q = if st.weight > 0.0 {
                    let mut total = 0.0;
                    for (&sp, edge) in &st.children {
                        let r = problem.reward(state, a, sp);
                        total += edge.weight
                            * (self.stage_contribution(r) + self.nodes[edge.node].value);
                    }
                    total / st.weight
                } else {
                    if st.visits > 0 {
                        log::warn!(
                            "action {a} at node {i} expanded with zero total weight; Q := 0"
                        );
                    }
                    0.0
                };
                self.nodes[i].actions[a].q = q;
                if q > best {
                    best = q;
                }
            }
            self.nodes[i].value = best;
        }
        Ok(self.nodes[target].value)
    }

    /// Samples an action at `history` with probability proportional to the
    /// accumulated greedy-action weights `W_br`.
    pub fn avg_action<R: Rng + ?Sized>(&self, history: &History, rng: &mut R) -> Result<usize> {
        let probs = self.action_distribution(history)?;
        Ok(sample_categorical(&probs, rng))
    }

    /// The averaged mixed strategy at `history`: `W_br` proportions.
    pub fn action_distribution(&self, history: &History) -> Result<Vec<f64>> {
        let node = self.resolve(history).ok_or_else(|| Error::UnknownHistory {
            history: history.as_slice().to_vec(),
        })?;
        let actions = &self.nodes[node].actions;
        let total: f64 = actions.iter().map(|a| a.br_weight).sum();
        if actions.is_empty() || total <= 0.0 {
            return Err(Error::UnvisitedPolicyNode {
                history: history.as_slice().to_vec(),
            });
        }
        Ok(actions.iter().map(|a| a.br_weight / total).collect())
    }

    /// Per-node dump (visits, weights, values, per-action records) for
    /// debugging and golden tests. Nodes appear in deterministic DFS order.
    pub fn dump_json(&self) -> serde_json::Value {
        let mut out = Vec::new();
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![(self.root, vec![self.nodes[self.root].state as u32])];
        while let Some((id, key)) = stack.pop() {
            if seen[id] {
                continue;
            }
            seen[id] = true;
            let n = &self.nodes[id];
            let actions: Vec<_> = n
                .actions
                .iter()
                .map(|a| {
                    json!({
                        "visits": a.visits,
                        "weight": a.weight,
                        "br_weight": a.br_weight,
                        "q": a.q,
                        "children": a.children.iter().map(|(sp, e)| {
                            json!({"state": sp, "edge_weight": e.weight})
                        }).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let node_key = match self.keying {
                Keying::History => json!(key),
                Keying::StateDepth => json!([n.depth, n.state]),
            };
            out.push(json!({
                "key": node_key,
                "state": n.state,
                "depth": n.depth,
                "visits": n.visits,
                "weight": n.weight,
                "value": n.value,
                "actions": actions,
            }));
            // push children in reverse-sorted order so they pop sorted
            for (a_idx, a) in n.actions.iter().enumerate().rev() {
                for (&sp, edge) in a.children.iter().rev() {
                    let mut child_key = key.clone();
                    child_key.push(a_idx as u32);
                    child_key.push(sp as u32);
                    stack.push((edge.node, child_key));
                }
            }
        }
        json!({"keying": match self.keying { Keying::History => "history", Keying::StateDepth => "state_depth" }, "nodes": out})
    }
}

/// One arm of the estimator-consistency diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorRun {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct WeightedEstimatorCheck {
    pub weighted: EstimatorRun,
    pub direct: EstimatorRun,
}

impl WeightedEstimatorCheck {
    pub fn gap(&self) -> f64 {
        (self.weighted.mean - self.direct.mean).abs()
    }

    pub fn pooled_std_error(&self) -> f64 {
        (self.weighted.std_error.powi(2) + self.direct.std_error.powi(2)).sqrt()
    }
}

/// Runs the two root-level value estimators for a designated root action:
/// `n_samples` simulations with models drawn from `proposal` and importance
/// weights `target/proposal`, and `n_samples` with models drawn from
/// `target` and unit weights. Both trees use incremental updates; the
/// reported mean is the tree's running weighted average at `(root, action)`.
pub fn weighted_value_estimator_check<R: Rng + ?Sized>(
    problem: &BamdpProblem,
    target: &Belief,
    proposal: &Belief,
    n_samples: usize,
    action: usize,
    rng: &mut R,
) -> Result<WeightedEstimatorCheck> {
    let m = problem.num_models();
    if target.len() != m || proposal.len() != m {
        return Err(Error::InvalidConfig(format!(
            "beliefs must have {m} entries"
        )));
    }
    if action >= problem.num_actions() {
        return Err(Error::IndexOutOfRange {
            what: "action",
            index: action,
            limit: problem.num_actions(),
        });
    }
    for i in 0..m {
        if target[i] > 0.0 && proposal[i] == 0.0 {
            return Err(Error::SupportViolation {
                model: i,
                target_mass: target[i],
            });
        }
    }

    let mut run = |sampling: &Belief, weighted: bool, rng: &mut R| -> Result<EstimatorRun> {
        let mut tree = SearchTree::new(problem, Keying::History, Mode::Incremental,
            ObjectiveTransform::Identity)?;
        let root = tree.root_history();
        let mut prev_q = 0.0;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for k in 1..=n_samples {
            let theta = sample_categorical(sampling.weights(), rng);
            let w = if weighted { target[theta] / sampling[theta] } else { 1.0 };
            tree.simulate(problem, &root, theta, w, rng)?;
            let q = tree.nodes[tree.root].actions[action].q;
            // invert the running average to recover this pass's sample
            let sample = k as f64 * q - (k as f64 - 1.0) * prev_q;
            prev_q = q;
            let delta = sample - mean;
            mean += delta / k as f64;
            m2 += delta * (sample - mean);
        }
        let var = if n_samples > 1 {
            m2 / (n_samples as f64 - 1.0)
        } else {
            0.0
        };
        Ok(EstimatorRun {
            mean: prev_q,
            std_error: (var / n_samples as f64).sqrt(),
        })
    };

    let weighted = run(proposal, true, rng)?;
    let direct = run(target, false, rng)?;
    Ok(WeightedEstimatorCheck { weighted, direct })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::build_bandit;
    use crate::problem::{Belief, TransitionModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn one_shot(reward: f64) -> BamdpProblem {
        let model = TransitionModel::new(vec![
            vec![vec![0.0, 1.0]],
            vec![vec![0.0, 1.0]],
        ])
        .unwrap();
        let mut rewards = vec![0.0; 4];
        rewards[1] = reward; // (0, 0, 1)
        BamdpProblem::new(
            2, 1, 1,
            vec![model],
            rewards,
            Belief::new(vec![1.0]).unwrap(),
            BTreeSet::new(),
            0,
        )
        .unwrap()
    }

    /// Two models, one decision state, two successor states per action.
    fn split_problem() -> BamdpProblem {
        let to = |t: usize| {
            let mut row = vec![0.0; 3];
            row[t] = 1.0;
            row
        };
        let model_a = TransitionModel::new(vec![
            vec![to(1)],
            vec![to(1)],
            vec![to(2)],
        ])
        .unwrap();
        let model_b = TransitionModel::new(vec![
            vec![to(2)],
            vec![to(1)],
            vec![to(2)],
        ])
        .unwrap();
        let mut rewards = vec![0.0; 9];
        rewards[1] = 1.0; // (0, 0, 1)
        rewards[2] = 5.0; // (0, 0, 2)
        BamdpProblem::new(
            3, 1, 1,
            vec![model_a, model_b],
            rewards,
            Belief::new(vec![0.5, 0.5]).unwrap(),
            BTreeSet::new(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn single_step_simulate_records_weights() {
        let p = one_shot(2.5);
        let mut tree =
            SearchTree::new(&p, Keying::History, Mode::Full, ObjectiveTransform::Identity)
                .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = tree.simulate(&p, &root, 0, 1.0, &mut rng).unwrap();
        assert_eq!(v, 2.5);
        let stats = tree.node_stats(&root).unwrap();
        assert_eq!(stats.visits, 1);
        assert_eq!(stats.weight, 1.0);
        assert_eq!(stats.actions[0].weight, 1.0);
        assert_eq!(stats.actions[0].br_weight, 1.0);
    }

    #[test]
    fn zero_weight_visit_still_counts() {
        let p = one_shot(1.0);
        let mut tree =
            SearchTree::new(&p, Keying::History, Mode::Full, ObjectiveTransform::Identity)
                .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        tree.simulate(&p, &root, 0, 2.0, &mut rng).unwrap();
        tree.simulate(&p, &root, 0, 0.0, &mut rng).unwrap();
        let stats = tree.node_stats(&root).unwrap();
        assert_eq!(stats.visits, 2);
        assert_eq!(stats.weight, 2.0);
    }

    #[test]
    fn negative_weight_rejected() {
        let p = one_shot(1.0);
        let mut tree =
            SearchTree::new(&p, Keying::History, Mode::Full, ObjectiveTransform::Identity)
                .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = tree.simulate(&p, &root, 0, -1.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::InvalidWeight(_)));
        let err = tree
            .simulate(&p, &root, 0, f64::NAN, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::InvalidWeight(_)));
    }

    #[test]
    fn first_bandit_call_returns_lowest_index_path_reward() {
        // fresh tree: all Q are 0, ties break to action 0 everywhere; under
        // theta1 the action-0 path is deterministic: -0.1 + 0 + -0.1
        let bandit = build_bandit();
        for seed in [0u64, 1, 99] {
            let mut tree = SearchTree::new(
                &bandit,
                Keying::History,
                Mode::Full,
                ObjectiveTransform::Identity,
            )
            .unwrap();
            let root = tree.root_history();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = tree.simulate(&bandit, &root, 0, 1.0, &mut rng).unwrap();
            assert!((v - (-0.2)).abs() < 1e-12, "seed {seed}: v = {v}");
        }
    }

    #[test]
    fn exhaustive_expansion_every_action_every_visit() {
        let bandit = build_bandit();
        let mut tree = SearchTree::new(
            &bandit,
            Keying::History,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in 0..25 {
            tree.simulate(&bandit, &root, k % 2, 1.0, &mut rng).unwrap();
        }
        for node in &tree.nodes {
            if node.depth >= bandit.horizon() {
                continue;
            }
            for a in &node.actions {
                assert_eq!(a.visits, node.visits, "N(h,a) must match N(h)");
            }
        }
    }

    #[test]
    fn weight_conservation_invariants() {
        let bandit = build_bandit();
        let mut tree = SearchTree::new(
            &bandit,
            Keying::History,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in 1..=60u64 {
            let w = (k % 5) as f64 * 0.5;
            tree.simulate(&bandit, &root, (k % 2) as usize, w, &mut rng)
                .unwrap();
        }
        for node in &tree.nodes {
            if node.depth >= bandit.horizon() || node.actions.is_empty() {
                continue;
            }
            let w_sum: f64 = node.actions.iter().map(|a| a.weight).sum();
            assert!(
                (w_sum - node.weight * bandit.num_actions() as f64).abs() < 1e-9,
                "every action gets the full visit weight"
            );
            let br_sum: f64 = node.actions.iter().map(|a| a.br_weight).sum();
            assert!((br_sum - node.weight).abs() < 1e-9, "one W_br increment per visit");
            for a in &node.actions {
                let edge_sum: f64 = a.children.values().map(|e| e.weight).sum();
                assert!((edge_sum - a.weight).abs() < 1e-9, "edges conserve W(h,a)");
            }
        }
    }

    #[test]
    fn child_node_weights_match_edges_under_history_keying() {
        let bandit = build_bandit();
        let mut tree = SearchTree::new(
            &bandit,
            Keying::History,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            tree.simulate(&bandit, &root, 0, 1.5, &mut rng).unwrap();
            tree.simulate(&bandit, &root, 1, 0.5, &mut rng).unwrap();
        }
        for node in &tree.nodes {
            for a in &node.actions {
                for edge in a.children.values() {
                    assert!(
                        (edge.weight - tree.nodes[edge.node].weight).abs() < 1e-9,
                        "W(has') equals the child node weight"
                    );
                }
            }
        }
    }

    #[test]
    fn leaf_value_is_zero() {
        let p = one_shot(3.0);
        let mut tree =
            SearchTree::new(&p, Keying::History, Mode::Full, ObjectiveTransform::Identity)
                .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        tree.simulate(&p, &root, 0, 1.0, &mut rng).unwrap();
        let leaf = root.extended(0, 1);
        let v = tree.compute_q_values(&p, &leaf).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn weighted_average_over_two_children() {
        // W = (3, 1) on children with rewards (1, 5): Q = 0.75*1 + 0.25*5 = 2
        let p = split_problem();
        let mut tree =
            SearchTree::new(&p, Keying::History, Mode::Full, ObjectiveTransform::Identity)
                .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            tree.simulate(&p, &root, 0, 1.0, &mut rng).unwrap();
        }
        tree.simulate(&p, &root, 1, 1.0, &mut rng).unwrap();
        let v = tree.compute_q_values(&p, &root).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        let stats = tree.node_stats(&root).unwrap();
        assert!((stats.actions[0].q - 2.0).abs() < 1e-12);
    }

    #[test]
    fn compute_q_values_matches_reference_dp() {
        // independent bottom-up reference over the public stats
        let bandit = build_bandit();
        let mut tree = SearchTree::new(
            &bandit,
            Keying::History,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for k in 0..200u64 {
            tree.simulate(&bandit, &root, (k % 2) as usize, 1.0 + (k % 3) as f64, &mut rng)
                .unwrap();
        }
        let v = tree.compute_q_values(&bandit, &root).unwrap();

        fn reference(tree: &SearchTree, p: &BamdpProblem, h: &History) -> f64 {
            if h.depth() >= p.horizon() || p.is_terminal(h.current_state()) {
                return 0.0;
            }
            let stats = tree.node_stats(h).unwrap();
            let mut best = f64::NEG_INFINITY;
            for (a, st) in stats.actions.iter().enumerate() {
                let mut q = 0.0;
                if st.weight > 0.0 {
                    for (&sp, edge) in &st.children {
                        let r = p.reward(h.current_state(), a, sp);
                        q += edge.weight / st.weight
                            * (r + reference(tree, p, &h.extended(a, sp)));
                    }
                }
                best = best.max(q);
            }
            best
        }
        let expected = reference(&tree, &bandit, &root);
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }

    #[test]
    fn compute_q_values_is_idempotent() {
        let bandit = build_bandit();
        let mut tree = SearchTree::new(
            &bandit,
            Keying::History,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            tree.simulate(&bandit, &root, 0, 1.0, &mut rng).unwrap();
            tree.simulate(&bandit, &root, 1, 1.0, &mut rng).unwrap();
        }
        let v1 = tree.compute_q_values(&bandit, &root).unwrap();
        let snapshot: Vec<f64> = tree.nodes.iter().map(|n| n.value).collect();
        let v2 = tree.compute_q_values(&bandit, &root).unwrap();
        assert_eq!(v1, v2);
        let after: Vec<f64> = tree.nodes.iter().map(|n| n.value).collect();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn avg_action_point_mass() {
        let bandit = build_bandit();
        let mut tree = SearchTree::new(
            &bandit,
            Keying::History,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // fresh tree: greedy is always action 0, so all W_br lands there
        for _ in 0..5 {
            tree.simulate(&bandit, &root, 0, 1.0, &mut rng).unwrap();
        }
        for _ in 0..100 {
            assert_eq!(tree.avg_action(&root, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn avg_action_frequencies() {
        let p = one_shot(1.0);
        let mut tree =
            SearchTree::new(&p, Keying::History, Mode::Full, ObjectiveTransform::Identity)
                .unwrap();
        // craft W_br by hand
        tree.ensure_actions(0, 2);
        tree.nodes[0].actions[0].br_weight = 3.0;
        tree.nodes[0].actions[1].br_weight = 1.0;
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| tree.avg_action(&root, &mut rng).unwrap() == 0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.75).abs() < 0.004, "freq = {freq}");

        tree.nodes[0].actions[0].br_weight = 1.0;
        let hits = (0..n)
            .filter(|_| tree.avg_action(&root, &mut rng).unwrap() == 0)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.005, "freq = {freq}");
    }

    #[test]
    fn avg_action_unvisited_errors() {
        let p = one_shot(1.0);
        let tree =
            SearchTree::new(&p, Keying::History, Mode::Full, ObjectiveTransform::Identity)
                .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = tree.avg_action(&root, &mut rng).unwrap_err();
        assert!(matches!(err, Error::UnvisitedPolicyNode { .. }));
    }

    #[test]
    fn state_depth_keying_merges_histories() {
        let bandit = build_bandit();
        let mut tree = SearchTree::new(
            &bandit,
            Keying::StateDepth,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let root = tree.root_history();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            tree.simulate(&bandit, &root, 0, 1.0, &mut rng).unwrap();
            tree.simulate(&bandit, &root, 1, 1.0, &mut rng).unwrap();
        }
        let mut history_tree = SearchTree::new(
            &bandit,
            Keying::History,
            Mode::Full,
            ObjectiveTransform::Identity,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            history_tree.simulate(&bandit, &root, 0, 1.0, &mut rng).unwrap();
            history_tree.simulate(&bandit, &root, 1, 1.0, &mut rng).unwrap();
        }
        assert!(tree.node_count() < history_tree.node_count());
        // depth-2 decision nodes all collapse onto one (state 0, depth 2) node
        let h = {
            let mut h = root.clone();
            h.push_step(0, 3);
            h.push_step(0, 0);
            h
        };
        let merged = tree.node_stats(&h).unwrap();
        assert_eq!(merged.depth, 2);
        assert_eq!(merged.state, 0);
        // every pass reaches it 16 times: 4 sampled pull-1 branches x 4 return actions
        assert_eq!(merged.visits, 960);
    }

    #[test]
    fn estimator_check_same_distribution_agrees() {
        let bandit = build_bandit();
        let uniform = Belief::uniform(2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let check = weighted_value_estimator_check(
            &bandit, &uniform, &uniform, 20_000, 2, &mut rng,
        )
        .unwrap();
        assert!(
            check.gap() <= 3.0 * check.pooled_std_error(),
            "gap {} vs 3se {}",
            check.gap(),
            3.0 * check.pooled_std_error()
        );
    }

    #[test]
    fn estimator_check_degenerate_target() {
        let bandit = build_bandit();
        let target = Belief::new(vec![1.0, 0.0]).unwrap();
        let proposal = Belief::uniform(2);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let check =
            weighted_value_estimator_check(&bandit, &target, &proposal, 50_000, 2, &mut rng)
                .unwrap();
        assert!(
            check.gap() <= 3.0 * check.pooled_std_error(),
            "gap {} vs 3se {}",
            check.gap(),
            3.0 * check.pooled_std_error()
        );
    }

    #[test]
    fn estimator_check_support_violation() {
        let bandit = build_bandit();
        let target = Belief::uniform(2);
        let proposal = Belief::new(vec![1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = weighted_value_estimator_check(&bandit, &target, &proposal, 10, 0, &mut rng)
            .unwrap_err();
        assert!(matches!(err, Error::SupportViolation { model: 1, .. }));
    }

    #[test]
    fn dump_json_is_deterministic() {
        let bandit = build_bandit();
        let run = || {
            let mut tree = SearchTree::new(
                &bandit,
                Keying::History,
                Mode::Incremental,
                ObjectiveTransform::Identity,
            )
            .unwrap();
            let root = tree.root_history();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            for k in 0..50u64 {
                tree.simulate(&bandit, &root, (k % 2) as usize, 1.0, &mut rng)
                    .unwrap();
            }
            serde_json::to_string(&tree.dump_json()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
