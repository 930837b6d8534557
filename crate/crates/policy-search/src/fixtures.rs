//! Seeded random problem instances shared by the verification suite, the
//! test suites and the acceptance harness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::linear::LinearMdp;
use crate::model::TabularMdp;
use crate::policy::TabularFeatures;

/// Random Dirichlet-ish stochastic row: independent uniforms, normalized.
fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Random tabular MDP with rewards in `[0, 1]` and every transition
/// probability bounded away from zero (keeps the chain ergodic).
pub fn random_mdp<R: Rng>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let p1 = random_simplex(rng, n_states);
    let mut trans = Vec::with_capacity(n_states);
    let mut reward = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut per_state = Vec::with_capacity(n_actions);
        let mut rew_row = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            per_state.push(random_simplex(rng, n_states));
            rew_row.push(rng.random_range(0.0..1.0));
        }
        trans.push(per_state);
        reward.push(rew_row);
    }
    TabularMdp::new(p1, trans, reward, gamma).expect("random MDP must validate")
}

/// Random dense feature table for a Gibbs policy.
pub fn random_features<R: Rng>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    n_features: usize,
) -> TabularFeatures {
    TabularFeatures::from_fn(n_states, n_actions, n_features, |_, _| {
        DVector::from_fn(n_features, |_, _| rng.random_range(-1.0..1.0))
    })
}

/// Random parameter vector with entries in `[-scale, scale]`.
pub fn random_params<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Random well-conditioned transform: `Q D` with `Q` a product of Givens
/// rotations and `D` diagonal in `[0.5, 2]`. Deliberately non-orthogonal so
/// steepest-ascent traces do not accidentally stay equivariant under it.
pub fn random_transform<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let mut q: DMatrix<f64> = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut g: DMatrix<f64> = DMatrix::identity(n, n);
            g[(i, i)] = theta.cos();
            g[(j, j)] = theta.cos();
            g[(i, j)] = -theta.sin();
            g[(j, i)] = theta.sin();
            q = q * g;
        }
    }
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0)));
    q * d
}

/// Random linear-in-action MDP (continuous actions) with a validity margin:
/// transition rows stay inside `[0, 1]` for mean actions of norm up to ~10.
pub fn random_linear_mdp<R: Rng>(
    rng: &mut R,
    n_states: usize,
    action_dim: usize,
    gamma: f64,
) -> LinearMdp {
    let p1 = DVector::from_vec(random_simplex(rng, n_states));
    let mut base = DMatrix::zeros(n_states, n_states);
    for s in 0..n_states {
        let row = random_simplex(rng, n_states);
        for (next, p) in row.into_iter().enumerate() {
            base[(s, next)] = 0.2 / n_states as f64 + 0.8 * p;
        }
        let total: f64 = base.row(s).iter().sum();
        for next in 0..n_states {
            base[(s, next)] /= total;
        }
    }
    // Action coefficients sum to zero across successors and are small enough
    // to keep rows valid over the parameter ranges the tests explore.
    let mut lin = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut m = DMatrix::from_fn(n_states, action_dim, |_, _| rng.random_range(-0.003..0.003));
        for j in 0..action_dim {
            let mean = m.column(j).sum() / n_states as f64;
            for i in 0..n_states {
                m[(i, j)] -= mean;
            }
        }
        lin.push(m);
    }
    let r0 = DVector::from_fn(n_states, |_, _| rng.random_range(0.5..1.5));
    let r1 = DMatrix::from_fn(n_states, action_dim, |_, _| rng.random_range(-0.05..0.05));
    LinearMdp::new(p1, base, lin, r0, r1, gamma).expect("random linear MDP must validate")
}
