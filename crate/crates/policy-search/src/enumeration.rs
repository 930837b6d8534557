//! Brute-force trajectory enumeration over a tabular MDP.
//!
//! Walks every state-action path up to a truncation depth and accumulates the
//! truncated objective together with the trajectory-sum forms of the gradient
//! and of both Hessian terms. None of this shares code with the linear-solve
//! engine, so it serves as the independent oracle for it. Truncation error of
//! the value is bounded by `gamma^cut * R_max / (1 - gamma)`; the gradient
//! and Hessian sums carry an extra factor growing polynomially in `t`, which
//! stays negligible for the small discounts the oracle suites use.

use nalgebra::{DMatrix, DVector};

use crate::linalg::mat_axpy;
use crate::model::{ModelError, ParamVector, TabularMdp};
use crate::policy::{DiscretePolicy, PolicyError};

/// Truncated trajectory sums: the objective, its gradient, and the two terms
/// of the Hessian decomposition (outer-product term `h1`, log-curvature term
/// `h2`).
#[derive(Debug, Clone)]
pub struct PathSums {
    pub value: f64,
    pub grad: DVector<f64>,
    pub h1: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub n_paths: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum EnumerationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

fn guard_path_count(mdp: &TabularMdp, cut: usize, limit: u64) -> Result<(), ModelError> {
    let mut paths: u128 = 1;
    for _ in 0..cut {
        paths = paths.saturating_mul(mdp.n_z() as u128);
        if paths > limit as u128 {
            return Err(ModelError::ExplosionGuard { paths, limit });
        }
    }
    Ok(())
}

struct Tables {
    probs: Vec<f64>,
    grads: Vec<DVector<f64>>,
    hesses: Vec<DMatrix<f64>>,
}

fn policy_tables<P>(mdp: &TabularMdp, policy: &P, w: &ParamVector) -> Result<Tables, PolicyError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let mut probs = Vec::with_capacity(mdp.n_z());
    let mut grads = Vec::with_capacity(mdp.n_z());
    let mut hesses = Vec::with_capacity(mdp.n_z());
    for s in 0..mdp.n_states {
        let p = policy.action_probs(&s, w)?;
        for a in 0..mdp.n_actions {
            probs.push(p[a]);
            grads.push(policy.grad_log(&s, &a, w)?);
            hesses.push(policy.hess_log(&s, &a, w)?);
        }
    }
    Ok(Tables { probs, grads, hesses })
}

/// Truncated objective by exhaustive path enumeration:
/// `sum_{t<=cut} sum_paths gamma^(t-1) R(z_t) p(path)`.
///
/// Fails with [`ModelError::ExplosionGuard`] when the worst-case path count
/// `(n_states * n_actions)^cut` exceeds `limit`.
pub fn enumerate_return<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
    cut: usize,
    limit: u64,
) -> Result<f64, EnumerationError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    assert!(cut >= 1, "horizon cut must be at least 1");
    guard_path_count(mdp, cut, limit)?;
    let tables = policy_tables(mdp, policy, w)?;

    // Depth-first over (state, path probability); summing reward at each
    // visited depth reproduces the per-t trajectory sums.
    let mut total = 0.0;
    let mut stack: Vec<(usize, usize, f64)> = Vec::new();
    for s in 0..mdp.n_states {
        if mdp.p1[s] > 0.0 {
            stack.push((1, s, mdp.p1[s]));
        }
    }
    while let Some((t, s, prob)) = stack.pop() {
        let discount = mdp.gamma.powi(t as i32 - 1);
        for a in 0..mdp.n_actions {
            let pz = prob * tables.probs[s * mdp.n_actions + a];
            if pz == 0.0 {
                continue;
            }
            total += discount * mdp.reward(s, a) * pz;
            if t < cut {
                for next in 0..mdp.n_states {
                    let p = mdp.trans(s, a, next);
                    if p > 0.0 {
                        stack.push((t + 1, next, pz * p));
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Truncated trajectory sums of the objective, gradient and both Hessian
/// terms, by exhaustive recursion carrying the cumulative score
/// `grad log p(z_{1:t})` and curvature `hess log p(z_{1:t})` of each path.
pub fn truncated_path_sums<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
    cut: usize,
    limit: u64,
) -> Result<PathSums, EnumerationError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    assert!(cut >= 1, "horizon cut must be at least 1");
    guard_path_count(mdp, cut, limit)?;
    let tables = policy_tables(mdp, policy, w)?;
    let n_w = w.len();

    struct Walker<'a> {
        mdp: &'a TabularMdp,
        tables: &'a Tables,
        sums: PathSums,
        cut: usize,
        // one scratch score/curvature per depth
        cum_grad: Vec<DVector<f64>>,
        cum_hess: Vec<DMatrix<f64>>,
    }

    impl Walker<'_> {
        fn visit(&mut self, t: usize, s: usize, prob: f64) {
            let n_a = self.mdp.n_actions;
            let discount = self.mdp.gamma.powi(t as i32 - 1);
            for a in 0..n_a {
                let z = s * n_a + a;
                let pz = prob * self.tables.probs[z];
                if pz == 0.0 {
                    continue;
                }
                self.sums.n_paths += 1;
                // grad/hess of log p(z_{1:t}) extend the parent's by the
                // current step's log-policy derivatives.
                if t == 1 {
                    self.cum_grad[t].copy_from(&self.tables.grads[z]);
                    self.cum_hess[t].copy_from(&self.tables.hesses[z]);
                } else {
                    let (parents, current) = self.cum_grad.split_at_mut(t);
                    current[0].copy_from(&parents[t - 1]);
                    current[0] += &self.tables.grads[z];
                    let (parents, current) = self.cum_hess.split_at_mut(t);
                    current[0].copy_from(&parents[t - 1]);
                    current[0] += &self.tables.hesses[z];
                }
                let weight = discount * self.mdp.reward(s, a) * pz;
                if weight != 0.0 {
                    self.sums.value += weight;
                    let g = &self.cum_grad[t];
                    self.sums.grad.axpy(weight, g, 1.0);
                    self.sums.h1.ger(weight, g, g, 1.0);
                    mat_axpy(&mut self.sums.h2, weight, &self.cum_hess[t]);
                }
                if t < self.cut {
                    for next in 0..self.mdp.n_states {
                        let p = self.mdp.trans(s, a, next);
                        if p > 0.0 {
                            self.visit(t + 1, next, pz * p);
                        }
                    }
                }
            }
        }
    }

    let mut walker = Walker {
        mdp,
        tables: &tables,
        sums: PathSums {
            value: 0.0,
            grad: DVector::zeros(n_w),
            h1: DMatrix::zeros(n_w, n_w),
            h2: DMatrix::zeros(n_w, n_w),
            n_paths: 0,
        },
        cut,
        cum_grad: vec![DVector::zeros(n_w); cut + 1],
        cum_hess: vec![DMatrix::zeros(n_w, n_w); cut + 1],
    };
    for s in 0..mdp.n_states {
        if mdp.p1[s] > 0.0 {
            walker.visit(1, s, mdp.p1[s]);
        }
    }
    Ok(walker.sums)
}

/// Truncation error bound for [`enumerate_return`]:
/// `gamma^cut * R_max / (1 - gamma)`.
pub fn truncation_bound(mdp: &TabularMdp, cut: usize) -> f64 {
    mdp.gamma.powi(cut as i32) * mdp.max_reward() / (1.0 - mdp.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{GibbsPolicy, TabularFeatures};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_policy(n_states: usize, n_actions: usize) -> GibbsPolicy<TabularFeatures> {
        GibbsPolicy::new(TabularFeatures::from_fn(n_states, n_actions, 2, |_, _| {
            DVector::zeros(2)
        }))
    }

    #[test]
    fn zero_reward_enumerates_to_zero() {
        let mdp = TabularMdp::new(
            vec![0.5, 0.5],
            vec![
                vec![vec![0.5, 0.5], vec![0.9, 0.1]],
                vec![vec![0.3, 0.7], vec![0.1, 0.9]],
            ],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            0.5,
        )
        .unwrap();
        let policy = uniform_policy(2, 2);
        let w = DVector::zeros(2);
        assert_eq!(enumerate_return(&mdp, &policy, &w, 8, 10_000_000).unwrap(), 0.0);
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = TabularMdp::new(vec![1.0], vec![vec![vec![1.0]]], vec![vec![1.0]], 0.5).unwrap();
        let policy = uniform_policy(1, 1);
        let w = DVector::zeros(2);
        let got = enumerate_return(&mdp, &policy, &w, 20, 1_000_000).unwrap();
        let expected: f64 = (0..20).map(|t| 0.5f64.powi(t)).sum();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert_relative_eq!(got, 1.999998, epsilon = 1e-6);
    }

    #[test]
    fn explosion_guard_fires() {
        let mdp = TabularMdp::new(
            vec![0.5, 0.5],
            vec![
                vec![vec![0.5, 0.5], vec![0.9, 0.1]],
                vec![vec![0.3, 0.7], vec![0.1, 0.9]],
            ],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            0.5,
        )
        .unwrap();
        let policy = uniform_policy(2, 2);
        let w = DVector::zeros(2);
        let err = enumerate_return(&mdp, &policy, &w, 30, 1000).unwrap_err();
        assert!(matches!(err, EnumerationError::Model(ModelError::ExplosionGuard { .. })));
    }

    #[test]
    fn monotone_in_cut_and_bounded_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mdp = crate::fixtures::random_mdp(&mut rng, 3, 2, 0.3);
        let feats = crate::fixtures::random_features(&mut rng, 3, 2, 3);
        let policy = GibbsPolicy::new(feats);
        let w = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let mut prev = 0.0;
        for cut in 1..=7 {
            let v = enumerate_return(&mdp, &policy, &w, cut, 10_000_000).unwrap();
            assert!(v >= prev - 1e-15, "not monotone at cut {cut}");
            prev = v;
        }
        let v7 = prev;
        let v9 = enumerate_return(&mdp, &policy, &w, 9, 20_000_000).unwrap();
        assert!((v9 - v7).abs() <= truncation_bound(&mdp, 7) + 1e-15);
    }

    #[test]
    fn path_sums_value_agrees_with_enumerate_return() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = crate::fixtures::random_mdp(&mut rng, 3, 2, 0.2);
        let feats = crate::fixtures::random_features(&mut rng, 3, 2, 3);
        let policy = GibbsPolicy::new(feats);
        let w = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
        let sums = truncated_path_sums(&mdp, &policy, &w, 6, 10_000_000).unwrap();
        let value = enumerate_return(&mdp, &policy, &w, 6, 10_000_000).unwrap();
        assert_relative_eq!(sums.value, value, epsilon = 1e-12);
        assert!((&sums.h1 - &sums.h1.transpose()).amax() < 1e-12);
        assert!((&sums.h2 - &sums.h2.transpose()).amax() < 1e-12);
    }
}
