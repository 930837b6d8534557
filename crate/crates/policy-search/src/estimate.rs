//! Monte Carlo estimation of the search-direction ingredients: the
//! recurrent-state eligibility-trace estimator for the average-reward
//! framework, and a forward-sampling estimator for finite-horizon /
//! discounted objectives.
//!
//! All estimators are bit-deterministic in `(seed, w, n)` regardless of
//! internal parallelism: per-trajectory RNG streams are derived from the
//! seed by stream index and partial results are merged in trajectory order.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::mat_axpy;
use crate::model::{ParamVector, Provenance, SampledEnv, SearchDirectionBundle};
use crate::policy::{PolicyError, PolicyModel};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("environment designates no recurrent state")]
    NoRecurrentState,
    #[error("environment declares no horizon; forward sampling needs an episodic environment")]
    NoHorizon,
    #[error("accumulator became non-finite (divergent features or rewards)")]
    NonFiniteAccumulator,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Eligibility traces and estimate sums of the recurrent-state estimator.
/// Reaching the recurrent state zeroes the traces `phi1`/`phi2`, never the
/// sums `delta1`/`delta2`.
#[derive(Debug, Clone)]
pub struct EstimatorAccumulators {
    pub phi1: DVector<f64>,
    pub phi2: DMatrix<f64>,
    pub delta1: DVector<f64>,
    pub delta2: DMatrix<f64>,
    pub fisher: DMatrix<f64>,
    pub steps: u64,
    pub regenerations: u64,
    pub total_reward: f64,
}

impl EstimatorAccumulators {
    pub fn new(n_w: usize) -> Self {
        EstimatorAccumulators {
            phi1: DVector::zeros(n_w),
            phi2: DMatrix::zeros(n_w, n_w),
            delta1: DVector::zeros(n_w),
            delta2: DMatrix::zeros(n_w, n_w),
            fisher: DMatrix::zeros(n_w, n_w),
            steps: 0,
            regenerations: 0,
            total_reward: 0.0,
        }
    }

    /// One step of the recurrent-state recursion: reset-or-accumulate the
    /// traces depending on whether the current state is the recurrent state,
    /// then fold the reward-weighted traces into the sums.
    fn observe(&mut self, at_recurrent: bool, grad: &DVector<f64>, hess: &DMatrix<f64>, reward: f64) {
        if at_recurrent {
            self.phi1.fill(0.0);
            self.phi2.fill(0.0);
            self.regenerations += 1;
        } else {
            self.phi1 += grad;
            self.phi2 += hess;
        }
        if reward != 0.0 {
            self.delta1.axpy(reward, &self.phi1, 1.0);
            mat_axpy(&mut self.delta2, reward, &self.phi2);
        }
        self.fisher -= hess;
        self.steps += 1;
        self.total_reward += reward;
    }

    fn merge(&mut self, other: &EstimatorAccumulators) {
        self.delta1 += &other.delta1;
        self.delta2 += &other.delta2;
        self.fisher += &other.fisher;
        self.steps += other.steps;
        self.regenerations += other.regenerations;
        self.total_reward += other.total_reward;
    }

    fn check_finite(&self) -> Result<(), EstimateError> {
        if self.delta1.iter().all(|v| v.is_finite())
            && self.delta2.iter().all(|v| v.is_finite())
            && self.fisher.iter().all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(EstimateError::NonFiniteAccumulator)
        }
    }
}

/// Estimates produced by a sampling pass. Directions are meaningful only up
/// to a positive scale unless normalized by the sample counters; the
/// optimizers' step-size machinery absorbs the scale.
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub grad_est: DVector<f64>,
    pub h2_est: DMatrix<f64>,
    pub d2_est: DVector<f64>,
    pub fisher_est: Option<DMatrix<f64>>,
    pub n_samples: u64,
    pub n_regenerations: u64,
    pub seed: u64,
    pub total_reward: f64,
    /// Environment-level score: reward per regeneration cycle (recurrent
    /// estimator) or per trajectory (forward estimator).
    pub mean_score: f64,
}

impl EstimateReport {
    pub fn to_bundle(&self) -> SearchDirectionBundle {
        SearchDirectionBundle {
            value: self.mean_score,
            grad: self.grad_est.clone(),
            h2: Some(self.h2_est.clone()),
            d2: Some(self.d2_est.clone()),
            fisher: self.fisher_est.clone(),
            provenance: Provenance::Sampled,
        }
    }
}

fn finalize(acc: EstimatorAccumulators, seed: u64, score_divisor: f64) -> Result<EstimateReport, EstimateError> {
    acc.check_finite()?;
    let mean_score = if score_divisor > 0.0 { acc.total_reward / score_divisor } else { 0.0 };
    Ok(EstimateReport {
        d2_est: acc.delta2.diagonal(),
        grad_est: acc.delta1,
        h2_est: acc.delta2,
        fisher_est: Some(acc.fisher),
        n_samples: acc.steps,
        n_regenerations: acc.regenerations,
        seed,
        total_reward: acc.total_reward,
        mean_score,
    })
}

/// Recurrent-state estimator: runs the chain for exactly `n_steps` steps,
/// maintaining eligibility traces that reset at the recurrent state, and
/// returns the unnormalized direction estimates.
pub fn recurrent_estimate<E, P>(
    env: &E,
    policy: &P,
    w: &ParamVector,
    n_steps: u64,
    seed: u64,
) -> Result<EstimateReport, EstimateError>
where
    E: SampledEnv,
    P: PolicyModel<State = E::State, Action = E::Action>,
{
    if !env.has_recurrent_state() {
        return Err(EstimateError::NoRecurrentState);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = EstimatorAccumulators::new(w.len());
    let mut state = env.reset(&mut rng);
    for _ in 0..n_steps {
        let step = policy.sample_and_eval(&state, w, &mut rng, true)?;
        let hess = step.hess_log.expect("hessian requested");
        let (next, reward) = env.step(&state, &step.action, &mut rng);
        acc.observe(env.at_recurrent_state(&state), &step.grad_log, &hess, reward);
        state = next;
        if acc.steps % 65_536 == 0 {
            acc.check_finite()?;
        }
    }
    let cycles = acc.regenerations.max(1) as f64;
    finalize(acc, seed, cycles)
}

/// Recurrent-state estimator with an episode budget: runs `n_episodes`
/// regeneration cycles (each from the recurrent state back to it) in
/// parallel and merges them in episode order. Distributionally identical to
/// one long chain split at its regeneration points, because the traces reset
/// there anyway.
pub fn recurrent_estimate_episodes<E, P>(
    env: &E,
    policy: &P,
    w: &ParamVector,
    n_episodes: u64,
    seed: u64,
) -> Result<EstimateReport, EstimateError>
where
    E: SampledEnv + Sync,
    E::State: Send,
    E::Action: Send,
    P: PolicyModel<State = E::State, Action = E::Action> + Sync,
{
    if !env.has_recurrent_state() {
        return Err(EstimateError::NoRecurrentState);
    }
    let partials: Vec<Result<EstimatorAccumulators, EstimateError>> = (0..n_episodes)
        .into_par_iter()
        .map(|episode| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(episode + 1);
            let mut acc = EstimatorAccumulators::new(w.len());
            let mut state = env.reset(&mut rng);
            loop {
                let step = policy.sample_and_eval(&state, w, &mut rng, true)?;
                let hess = step.hess_log.expect("hessian requested");
                let (next, reward) = env.step(&state, &step.action, &mut rng);
                acc.observe(env.at_recurrent_state(&state), &step.grad_log, &hess, reward);
                state = next;
                // Episode complete once the chain regenerates: the next
                // visit to the recurrent state closes the cycle.
                if env.at_recurrent_state(&state) {
                    break;
                }
            }
            acc.check_finite()?;
            Ok(acc)
        })
        .collect();
    let mut acc = EstimatorAccumulators::new(w.len());
    for partial in partials {
        acc.merge(&partial?);
    }
    // Each episode is one regeneration cycle; the per-episode reset at the
    // initial recurrent state accounts for the regeneration count.
    finalize(acc, seed, n_episodes as f64)
}

struct TrajectoryPartial {
    grad: DVector<f64>,
    h2: DMatrix<f64>,
    fisher: DMatrix<f64>,
    total_reward: f64,
}

/// Forward-sampling estimator for episodic environments: assembles the
/// gradient and approximate Hessian with the state-action value replaced by
/// the sampled discounted reward-to-go, and the Fisher matrix from the same
/// trajectories. All estimates are per-trajectory means.
pub fn forward_estimate<E, P>(
    env: &E,
    policy: &P,
    w: &ParamVector,
    n_traj: u64,
    gamma: f64,
    seed: u64,
) -> Result<EstimateReport, EstimateError>
where
    E: SampledEnv + Sync,
    E::State: Send,
    E::Action: Send,
    P: PolicyModel<State = E::State, Action = E::Action> + Sync,
{
    let horizon = env.horizon().ok_or(EstimateError::NoHorizon)?;
    let n_w = w.len();
    let partials: Vec<Result<TrajectoryPartial, EstimateError>> = (0..n_traj)
        .into_par_iter()
        .map(|traj| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(traj + 1);
            let mut state = env.reset(&mut rng);
            let mut grads = Vec::with_capacity(horizon);
            let mut hesses = Vec::with_capacity(horizon);
            let mut rewards = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let step = policy.sample_and_eval(&state, w, &mut rng, true)?;
                let (next, reward) = env.step(&state, &step.action, &mut rng);
                grads.push(step.grad_log);
                hesses.push(step.hess_log.expect("hessian requested"));
                rewards.push(reward);
                state = next;
            }
            // Discounted reward-to-go from each time-point.
            let mut rtg = vec![0.0; horizon];
            let mut acc = 0.0;
            for t in (0..horizon).rev() {
                acc = rewards[t] + gamma * acc;
                rtg[t] = acc;
            }
            let mut grad = DVector::zeros(n_w);
            let mut h2 = DMatrix::zeros(n_w, n_w);
            let mut fisher = DMatrix::zeros(n_w, n_w);
            let mut discount = 1.0;
            for t in 0..horizon {
                let weight = discount * rtg[t];
                if weight != 0.0 {
                    grad.axpy(weight, &grads[t], 1.0);
                    mat_axpy(&mut h2, weight, &hesses[t]);
                }
                mat_axpy(&mut fisher, -discount, &hesses[t]);
                discount *= gamma;
            }
            Ok(TrajectoryPartial {
                grad,
                h2,
                fisher,
                total_reward: rewards.iter().sum(),
            })
        })
        .collect();

    let mut grad = DVector::zeros(n_w);
    let mut h2 = DMatrix::zeros(n_w, n_w);
    let mut fisher = DMatrix::zeros(n_w, n_w);
    let mut total_reward = 0.0;
    for partial in partials {
        let p = partial?;
        grad += &p.grad;
        h2 += &p.h2;
        fisher += &p.fisher;
        total_reward += p.total_reward;
    }
    let scale = 1.0 / n_traj as f64;
    grad *= scale;
    h2 *= scale;
    fisher *= scale;
    if !grad.iter().all(|v| v.is_finite()) || !h2.iter().all(|v| v.is_finite()) {
        return Err(EstimateError::NonFiniteAccumulator);
    }
    Ok(EstimateReport {
        grad_est: grad,
        d2_est: h2.diagonal(),
        h2_est: h2,
        fisher_est: Some(fisher),
        n_samples: n_traj * horizon as u64,
        n_regenerations: n_traj,
        seed,
        total_reward,
        mean_score: total_reward * scale,
    })
}
