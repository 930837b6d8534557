//! Core MDP abstractions: the exact tabular model, parameter vectors,
//! trajectories, the sampled-environment contract and the search-direction
//! bundle exchanged between engines and optimizers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

/// Dense policy parameter vector.
pub type ParamVector = DVector<f64>;

/// Tolerance used when checking that probability vectors sum to one.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1")]
    RowNotStochastic { state: usize, action: usize, sum: f64 },
    #[error("negative transition probability at (s={state}, a={action}, s'={next}): {value}")]
    NegativeTransition { state: usize, action: usize, next: usize, value: f64 },
    #[error("initial distribution sums to {sum}, expected 1")]
    InitialNotStochastic { sum: f64 },
    #[error("negative initial probability at s={state}: {value}")]
    NegativeInitial { state: usize, value: f64 },
    #[error("negative reward at (s={state}, a={action}): {value}")]
    NegativeReward { state: usize, action: usize, value: f64 },
    #[error("discount {gamma} outside [0, 1)")]
    BadDiscount { gamma: f64 },
    #[error("dimension mismatch: {what}")]
    BadShape { what: String },
    #[error("path count {paths} exceeds enumeration limit {limit}")]
    ExplosionGuard { paths: u128, limit: u64 },
}

/// Report carrying every invariant violation found by [`TabularMdp::validate`].
#[derive(Debug, Clone, Error)]
#[error("invalid MDP: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
pub struct ValidationReport {
    pub violations: Vec<ModelError>,
}

/// Finite state/action MDP with discounted rewards.
///
/// Transitions are stored flat as `[s][a][s']`, rewards as `[s][a]`. Rewards
/// are required to be non-negative; state-action values and discounted
/// occupancies derived from them are then non-negative as well, which the
/// EM machinery relies on for its weights.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub p1: DVector<f64>,
    trans: Vec<f64>,
    reward: Vec<f64>,
    pub gamma: f64,
}

/// JSON wire form of [`TabularMdp`].
#[derive(Debug, Deserialize)]
struct TabularMdpDoc {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    p1: Vec<f64>,
    trans: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
}

impl TabularMdp {
    /// Builds and validates a model. `trans` is indexed `[s][a][s']`,
    /// `reward` is indexed `[s][a]`.
    pub fn new(
        p1: Vec<f64>,
        trans: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self, ValidationReport> {
        let n_states = p1.len();
        let n_actions = if trans.is_empty() { 0 } else { trans[0].len() };
        let mut shape_errors = Vec::new();
        if trans.len() != n_states {
            shape_errors.push(ModelError::BadShape {
                what: format!("trans has {} state rows, p1 has {}", trans.len(), n_states),
            });
        }
        for (s, per_state) in trans.iter().enumerate() {
            if per_state.len() != n_actions {
                shape_errors.push(ModelError::BadShape {
                    what: format!("trans[{s}] has {} actions, expected {n_actions}", per_state.len()),
                });
            }
            for (a, row) in per_state.iter().enumerate() {
                if row.len() != n_states {
                    shape_errors.push(ModelError::BadShape {
                        what: format!("trans[{s}][{a}] has {} entries, expected {n_states}", row.len()),
                    });
                }
            }
        }
        if reward.len() != n_states || reward.iter().any(|r| r.len() != n_actions) {
            shape_errors.push(ModelError::BadShape {
                what: "reward must be indexed [s][a]".to_string(),
            });
        }
        if !shape_errors.is_empty() {
            return Err(ValidationReport { violations: shape_errors });
        }

        let mut flat_trans = Vec::with_capacity(n_states * n_actions * n_states);
        for per_state in &trans {
            for row in per_state {
                flat_trans.extend_from_slice(row);
            }
        }
        let mut flat_reward = Vec::with_capacity(n_states * n_actions);
        for row in &reward {
            flat_reward.extend_from_slice(row);
        }
        let mdp = TabularMdp {
            n_states,
            n_actions,
            p1: DVector::from_vec(p1),
            trans: flat_trans,
            reward: flat_reward,
            gamma,
        };
        mdp.validate().map(|()| mdp)
    }

    /// Loads a model from its JSON document form; validation runs on load.
    pub fn from_json_str(text: &str) -> Result<Self, ValidationReport> {
        let doc: TabularMdpDoc = serde_json::from_str(text).map_err(|e| ValidationReport {
            violations: vec![ModelError::BadShape { what: format!("json: {e}") }],
        })?;
        if doc.p1.len() != doc.n_states {
            return Err(ValidationReport {
                violations: vec![ModelError::BadShape {
                    what: format!("p1 has {} entries, n_states = {}", doc.p1.len(), doc.n_states),
                }],
            });
        }
        if doc.trans.len() != doc.n_states
            || doc.trans.iter().any(|t| t.len() != doc.n_actions)
        {
            return Err(ValidationReport {
                violations: vec![ModelError::BadShape {
                    what: "trans must be indexed [s][a][s']".to_string(),
                }],
            });
        }
        let mdp = Self::new(doc.p1, doc.trans, doc.reward, doc.gamma)?;
        Ok(mdp)
    }

    /// Checks every model invariant, returning the full list of violations.
    pub fn validate(&self) -> Result<(), ValidationReport> {
        let mut violations = Vec::new();
        if !(0.0..1.0).contains(&self.gamma) {
            violations.push(ModelError::BadDiscount { gamma: self.gamma });
        }
        let p1_sum: f64 = self.p1.iter().sum();
        if (p1_sum - 1.0).abs() > STOCHASTIC_TOL {
            violations.push(ModelError::InitialNotStochastic { sum: p1_sum });
        }
        for (s, &p) in self.p1.iter().enumerate() {
            if p < 0.0 {
                violations.push(ModelError::NegativeInitial { state: s, value: p });
            }
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let mut sum = 0.0;
                for next in 0..self.n_states {
                    let p = self.trans(s, a, next);
                    if p < 0.0 {
                        violations.push(ModelError::NegativeTransition { state: s, action: a, next, value: p });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    violations.push(ModelError::RowNotStochastic { state: s, action: a, sum });
                }
                let r = self.reward(s, a);
                if r < 0.0 {
                    violations.push(ModelError::NegativeReward { state: s, action: a, value: r });
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ValidationReport { violations })
        }
    }

    #[inline]
    pub fn trans(&self, s: usize, a: usize, next: usize) -> f64 {
        self.trans[(s * self.n_actions + a) * self.n_states + next]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Number of state-action pairs.
    #[inline]
    pub fn n_z(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn max_reward(&self) -> f64 {
        self.reward.iter().cloned().fold(0.0, f64::max)
    }

    /// Samples an initial state.
    pub fn sample_initial<R: Rng>(&self, rng: &mut R) -> usize {
        sample_categorical(self.p1.as_slice(), rng)
    }

    /// Samples a successor of `(s, a)`.
    pub fn sample_next<R: Rng>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let base = (s * self.n_actions + a) * self.n_states;
        sample_categorical(&self.trans[base..base + self.n_states], rng)
    }
}

/// Draws an index from an (assumed normalized) probability slice.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A sampled state-action-reward sequence.
#[derive(Debug, Clone)]
pub struct Trajectory<S, A> {
    pub states: Vec<S>,
    pub actions: Vec<A>,
    pub rewards: Vec<f64>,
    pub terminal: bool,
}

impl<S, A> Trajectory<S, A> {
    pub fn new(states: Vec<S>, actions: Vec<A>, rewards: Vec<f64>, terminal: bool) -> Self {
        assert!(
            states.len() == actions.len() && actions.len() == rewards.len(),
            "trajectory sequences must have equal length"
        );
        Trajectory { states, actions, rewards, terminal }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Behaviour contract for sampled (simulator-backed) environments.
///
/// Implementations own no RNG: all randomness flows through the caller's
/// generator, so a run is a pure function of `(seed, action sequence)`.
pub trait SampledEnv {
    type State: Clone;
    type Action;

    /// Draws an initial state.
    fn reset<R: Rng>(&self, rng: &mut R) -> Self::State;

    /// Advances the environment one step, returning the next state and the
    /// reward received on the transition.
    fn step<R: Rng>(&self, state: &Self::State, action: &Self::Action, rng: &mut R)
        -> (Self::State, f64);

    /// Whether the environment designates a recurrent state for regenerative
    /// estimation.
    fn has_recurrent_state(&self) -> bool {
        false
    }

    /// True when `state` is the designated recurrent state. Environments
    /// whose recurrence is a property of part of the state (an empty board,
    /// say) implement the predicate over that part.
    fn at_recurrent_state(&self, _state: &Self::State) -> bool {
        false
    }

    /// Episode length for episodic environments, `None` for non-terminating
    /// chains.
    fn horizon(&self) -> Option<usize> {
        None
    }
}

/// Where a bundle's quantities came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Exact,
    Sampled,
}

/// Everything a search-direction rule may need at one parameter point:
/// objective value, gradient, approximate Hessian (full and diagonal) and
/// the Fisher matrix. Fields a producer cannot supply stay `None`.
#[derive(Debug, Clone)]
pub struct SearchDirectionBundle {
    pub value: f64,
    pub grad: DVector<f64>,
    pub h2: Option<DMatrix<f64>>,
    pub d2: Option<DVector<f64>>,
    pub fisher: Option<DMatrix<f64>>,
    pub provenance: Provenance,
}

impl SearchDirectionBundle {
    /// Checks the structural invariants: symmetry of `h2`, `d2` equal to the
    /// diagonal of `h2`, and `fisher` symmetric with spectrum bounded below
    /// by `-1e-10` times its scale.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(h2) = &self.h2 {
            let scale = h2.amax().max(1e-300);
            let asym = (h2 - h2.transpose()).amax();
            if asym > 1e-10 * scale {
                return Err(format!("h2 asymmetry {asym} exceeds 1e-10 relative"));
            }
            if let Some(d2) = &self.d2 {
                for i in 0..h2.nrows() {
                    if d2[i] != h2[(i, i)] {
                        return Err(format!("d2[{i}] differs from diag(h2)"));
                    }
                }
            }
        }
        if let Some(g) = &self.fisher {
            let scale = g.amax().max(1e-300);
            let asym = (g - g.transpose()).amax();
            if asym > 1e-10 * scale {
                return Err(format!("fisher asymmetry {asym} exceeds 1e-10 relative"));
            }
            let eig = g.clone().symmetric_eigen();
            let min = eig.eigenvalues.min();
            let spectral = eig.eigenvalues.amax();
            if min < -1e-10 * spectral.max(1.0) {
                return Err(format!("fisher min eigenvalue {min} below -1e-10 of spectral norm"));
            }
        }
        Ok(())
    }
}
