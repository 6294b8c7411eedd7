//! The two shipped benchmark environments.
//!
//! * A 2-model, 4-action, 2-pull bandit. State 0 is the decision state;
//!   states 1..=6 are reward states carrying rewards
//!   `[-1.0, -0.5, -0.1, 0.0, 0.5, 1.0]` on entry, and every action from a
//!   reward state returns deterministically to the decision state with zero
//!   reward. An episode is `H = 3` steps: pull, return, pull.
//! * A seeded patient-treatment generator over health states 0..=19 (0 is
//!   absorbing death), three treatments, and 15 randomly generated response
//!   profiles over health changes in -3..=3.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::problem::{BamdpProblem, Belief, TransitionModel};

/// Rewards carried by the six bandit reward states, in state order 1..=6.
pub const BANDIT_REWARD_VALUES: [f64; 6] = [-1.0, -0.5, -0.1, 0.0, 0.5, 1.0];

/// Fixed constants of the 2-pull bandit benchmark.
#[derive(Debug, Clone)]
pub struct BanditSpec {
    pub rewards: [f64; 6],
    /// `outcome_probs[model][action][reward_index]`
    pub outcome_probs: [[[f64; 6]; 4]; 2],
    pub prior: [f64; 2],
    pub pulls_per_episode: usize,
}

impl Default for BanditSpec {
    fn default() -> Self {
        Self {
            rewards: BANDIT_REWARD_VALUES,
            outcome_probs: [
                [
                    [0.0, 0.0, 1.0, 0.0, 0.0, 0.0], // a1: -0.1 for sure
                    [0.0, 0.0, 0.0, 0.0, 1.0, 0.0], // a2: 0.5 for sure
                    [0.2, 0.0, 0.0, 0.0, 0.0, 0.8], // a3: mostly +1.0
                    [0.8, 0.0, 0.0, 0.0, 0.0, 0.2], // a4: mostly -1.0
                ],
                [
                    [0.0, 0.0, 0.0, 1.0, 0.0, 0.0], // a1: 0.0 for sure
                    [0.0, 1.0, 0.0, 0.0, 0.0, 0.0], // a2: -0.5 for sure
                    [0.8, 0.0, 0.0, 0.0, 0.0, 0.2], // a3: mostly -1.0
                    [0.2, 0.0, 0.0, 0.0, 0.0, 0.8], // a4: mostly +1.0
                ],
            ],
            prior: [0.6, 0.4],
            pulls_per_episode: 2,
        }
    }
}

impl BanditSpec {
    /// Encodes the bandit as a 7-state problem. Horizon is
    /// `2 * pulls - 1` steps: the trailing return transition is dropped.
    pub fn to_problem(&self) -> BamdpProblem {
        let num_states = 7;
        let num_actions = 4;
        let horizon = 2 * self.pulls_per_episode - 1;
        let models = self
            .outcome_probs
            .iter()
            .map(|per_action| {
                let mut rows = Vec::with_capacity(num_states);
                // decision state
                rows.push(
                    per_action
                        .iter()
                        .map(|outcomes| {
                            let mut row = vec![0.0; num_states];
                            for (j, p) in outcomes.iter().enumerate() {
                                row[j + 1] = *p;
                            }
                            row
                        })
                        .collect::<Vec<_>>(),
                );
                // reward states: every action returns to the decision state
                for _ in 0..6 {
                    let mut row = vec![0.0; num_states];
                    row[0] = 1.0;
                    rows.push(vec![row; num_actions]);
                }
                TransitionModel::new(rows).expect("bandit rows are valid distributions")
            })
            .collect();
        let mut rewards = vec![0.0; num_states * num_actions * num_states];
        for a in 0..num_actions {
            for (j, r) in self.rewards.iter().enumerate() {
                rewards[(0 * num_actions + a) * num_states + (j + 1)] = *r;
            }
        }
        BamdpProblem::new(
            num_states,
            num_actions,
            horizon,
            models,
            rewards,
            Belief::new(self.prior.to_vec()).expect("bandit prior"),
            BTreeSet::new(),
            0,
        )
        .expect("bandit problem is well-formed")
    }
}

/// The bandit benchmark with its published constants.
pub fn build_bandit() -> BamdpProblem {
    BanditSpec::default().to_problem()
}

/// Canonical seed for the shipped patient fixture.
pub const PATIENT_DEFAULT_SEED: u64 = 23;

/// Generator parameters for the patient-treatment benchmark.
#[derive(Debug, Clone)]
pub struct PatientSpec {
    pub num_health_states: usize,
    pub start_state: usize,
    pub num_actions: usize,
    pub num_profiles: usize,
    pub noise_std: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl PatientSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            num_health_states: 20,
            start_state: 3,
            num_actions: 3,
            num_profiles: 15,
            noise_std: 0.1,
            horizon: 4,
            seed,
        }
    }

    /// Health-change support is -3..=3 (7 outcomes), clamped into the state
    /// range; state 0 is absorbing death with a -2 penalty on entry.
    pub fn to_problem(&self) -> BamdpProblem {
        let s = self.num_health_states;
        let a = self.num_actions;
        let delta_outcomes = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = Normal::new(0.0, self.noise_std).expect("valid std");

        let mut models = Vec::with_capacity(self.num_profiles);
        for _ in 0..self.num_profiles {
            // one 3x7 outcome matrix per profile: a noisy identity row per action
            let mut outcome_rows = Vec::with_capacity(a);
            for _ in 0..a {
                let pick = rng.random_range(0..delta_outcomes);
                let mut row = vec![0.0; delta_outcomes];
                row[pick] = 1.0;
                for v in row.iter_mut() {
                    *v += noise.sample(&mut rng);
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let sum: f64 = row.iter().sum();
                if sum <= 1e-12 {
                    row = vec![0.0; delta_outcomes];
                    row[pick] = 1.0;
                } else {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                outcome_rows.push(row);
            }

            let mut rows = Vec::with_capacity(s);
            for state in 0..s {
                if state == 0 {
                    // absorbing death
                    let mut row = vec![0.0; s];
                    row[0] = 1.0;
                    rows.push(vec![row; a]);
                    continue;
                }
                let mut per_action = Vec::with_capacity(a);
                for action in 0..a {
                    let mut row = vec![0.0; s];
                    for (j, p) in outcome_rows[action].iter().enumerate() {
                        let delta = j as i64 - 3;
                        let target = (state as i64 + delta).clamp(0, s as i64 - 1) as usize;
                        row[target] += *p;
                    }
                    // exact renormalization guard against clamp accumulation error
                    let sum: f64 = row.iter().sum();
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                    per_action.push(row);
                }
                rows.push(per_action);
            }
            models.push(TransitionModel::new(rows).expect("patient rows are distributions"));
        }

        let mut rewards = vec![0.0; s * a * s];
        for from in 0..s {
            for action in 0..a {
                for to in 0..s {
                    let mut r = to as f64 / 20.0;
                    if to == 0 {
                        r -= 2.0;
                    }
                    rewards[(from * a + action) * s + to] = r;
                }
            }
        }

        let mut prior = vec![0.75 / 14.0; self.num_profiles];
        prior[0] = 0.25;
        let total: f64 = prior.iter().sum();
        for p in prior.iter_mut() {
            *p /= total;
        }
        // pin the sum to exactly 1 after normalization
        let rest: f64 = prior[1..].iter().sum();
        prior[0] = 1.0 - rest;

        BamdpProblem::new(
            s,
            a,
            self.horizon,
            models,
            rewards,
            Belief::new(prior).expect("patient prior"),
            BTreeSet::from([0]),
            self.start_state,
        )
        .expect("patient problem is well-formed")
    }
}

/// The patient-treatment benchmark for a generator seed.
pub fn build_patient(seed: u64) -> BamdpProblem {
    PatientSpec::with_seed(seed).to_problem()
}
