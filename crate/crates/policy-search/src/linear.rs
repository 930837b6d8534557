//! Exact engine for finite-state MDPs whose continuous actions enter the
//! transition probabilities and rewards linearly, controlled by a Gaussian
//! policy with parameter-linear mean. In this setting every expectation the
//! engine needs is a low-order Gaussian moment with a closed form, the
//! log-policy is exactly quadratic in the parameters, and the EM M-step is a
//! weighted least-squares solve — the setting in which the EM update and the
//! approximate Newton step coincide exactly.
//!
//! Transition rows are affine in the action: `p(s'|s, a) = base[s, s'] +
//! lin[s][s', :] . a`. Rows sum to one for every action by construction
//! (the action coefficients sum to zero across successors); entries are only
//! guaranteed to stay in `[0, 1]` while the policy mean remains inside the
//! model's validity margin, which [`check_kernel_validity`] verifies.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exact::{solve_normal_equations, EngineError};
use crate::model::{ParamVector, Provenance, SearchDirectionBundle};
use crate::policy::LinearGaussianStructure;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearMdpError {
    #[error("base transition row {state} sums to {sum}, expected 1")]
    RowNotStochastic { state: usize, sum: f64 },
    #[error("negative base transition at ({state}, {next}): {value}")]
    NegativeTransition { state: usize, next: usize, value: f64 },
    #[error("action coefficients of state {state}, action dim {dim} sum to {sum}, expected 0")]
    UnbalancedActionCoefficients { state: usize, dim: usize, sum: f64 },
    #[error("initial distribution sums to {sum}, expected 1")]
    InitialNotStochastic { sum: f64 },
    #[error("negative base reward at state {state}: {value}")]
    NegativeReward { state: usize, value: f64 },
    #[error("discount {gamma} outside [0, 1)")]
    BadDiscount { gamma: f64 },
    #[error("shape mismatch: {what}")]
    BadShape { what: String },
}

/// Finite-state MDP with continuous actions entering linearly.
#[derive(Debug, Clone)]
pub struct LinearMdp {
    pub n_states: usize,
    pub action_dim: usize,
    pub p1: DVector<f64>,
    /// Action-independent part of the kernel, rows stochastic.
    pub base: DMatrix<f64>,
    /// Per-state `n_states x action_dim` coefficients; columns sum to zero.
    pub lin: Vec<DMatrix<f64>>,
    /// Action-independent reward per state, non-negative.
    pub r0: DVector<f64>,
    /// Linear reward coefficients per state.
    pub r1: DMatrix<f64>,
    pub gamma: f64,
}

impl LinearMdp {
    pub fn new(
        p1: DVector<f64>,
        base: DMatrix<f64>,
        lin: Vec<DMatrix<f64>>,
        r0: DVector<f64>,
        r1: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self, LinearMdpError> {
        let n_states = p1.len();
        let action_dim = r1.ncols();
        if base.nrows() != n_states || base.ncols() != n_states {
            return Err(LinearMdpError::BadShape { what: "base must be n_states x n_states".into() });
        }
        if lin.len() != n_states
            || lin.iter().any(|m| m.nrows() != n_states || m.ncols() != action_dim)
        {
            return Err(LinearMdpError::BadShape {
                what: "lin must hold one n_states x action_dim block per state".into(),
            });
        }
        if r0.len() != n_states || r1.nrows() != n_states {
            return Err(LinearMdpError::BadShape { what: "rewards must be indexed by state".into() });
        }
        let mdp = LinearMdp { n_states, action_dim, p1, base, lin, r0, r1, gamma };
        mdp.validate().map(|()| mdp)
    }

    pub fn validate(&self) -> Result<(), LinearMdpError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(LinearMdpError::BadDiscount { gamma: self.gamma });
        }
        let p1_sum: f64 = self.p1.iter().sum();
        if (p1_sum - 1.0).abs() > 1e-12 {
            return Err(LinearMdpError::InitialNotStochastic { sum: p1_sum });
        }
        for s in 0..self.n_states {
            let sum: f64 = self.base.row(s).iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(LinearMdpError::RowNotStochastic { state: s, sum });
            }
            for next in 0..self.n_states {
                if self.base[(s, next)] < 0.0 {
                    return Err(LinearMdpError::NegativeTransition {
                        state: s,
                        next,
                        value: self.base[(s, next)],
                    });
                }
            }
            for dim in 0..self.action_dim {
                let colsum: f64 = self.lin[s].column(dim).iter().sum();
                if colsum.abs() > 1e-12 {
                    return Err(LinearMdpError::UnbalancedActionCoefficients { state: s, dim, sum: colsum });
                }
            }
            if self.r0[s] < 0.0 {
                return Err(LinearMdpError::NegativeReward { state: s, value: self.r0[s] });
            }
        }
        Ok(())
    }
}

/// Everything the ops below share at one parameter point.
struct Eval {
    /// Policy means per state.
    means: Vec<DVector<f64>>,
    /// Marginalized state kernel `K[s, s'] = E_a p(s'|s, a)`.
    kernel: DMatrix<f64>,
    /// State values `V(s) = E_pi[Q(s, .)]`.
    v: DVector<f64>,
    /// Linear coefficient of `Q(s, a)` in `a`.
    q1: Vec<DVector<f64>>,
    /// Discounted state occupancy.
    p_gamma: DVector<f64>,
    /// Objective.
    u: f64,
}

fn evaluate<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<Eval, EngineError> {
    let n = mdp.n_states;
    let means: Vec<DVector<f64>> = (0..n).map(|s| policy.design(s) * w).collect();
    let mut kernel = mdp.base.clone();
    for s in 0..n {
        let shift = &mdp.lin[s] * &means[s];
        for next in 0..n {
            kernel[(s, next)] += shift[next];
        }
    }
    let mean_reward = DVector::from_fn(n, |s, _| mdp.r0[s] + mdp.r1.row(s).transpose().dot(&means[s]));
    let eye = DMatrix::identity(n, n);
    let v = (&eye - &kernel * mdp.gamma)
        .lu()
        .solve(&mean_reward)
        .ok_or(EngineError::SingularSystem)?;
    let q1: Vec<DVector<f64>> = (0..n)
        .map(|s| mdp.r1.row(s).transpose() + mdp.lin[s].transpose() * &v * mdp.gamma)
        .collect();
    let p_gamma = (&eye - kernel.transpose() * mdp.gamma)
        .lu()
        .solve(&mdp.p1)
        .ok_or(EngineError::SingularSystem)?;
    let u = mdp.p1.dot(&v);
    Ok(Eval { means, kernel, v, q1, p_gamma, u })
}

/// Objective value `U(w)`.
pub fn value<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<f64, EngineError> {
    Ok(evaluate(mdp, policy, w)?.u)
}

/// Asserts the marginalized kernel stays a stochastic matrix at `w`: the
/// model only represents an MDP while the policy mean is inside the margin.
pub fn check_kernel_validity<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<(), String> {
    let eval = evaluate(mdp, policy, w).map_err(|e| e.to_string())?;
    for s in 0..mdp.n_states {
        let sum: f64 = eval.kernel.row(s).iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("kernel row {s} sums to {sum}"));
        }
        for next in 0..mdp.n_states {
            let p = eval.kernel[(s, next)];
            if !(-1e-12..=1.0 + 1e-12).contains(&p) {
                return Err(format!("kernel entry ({s}, {next}) = {p} outside [0, 1]"));
            }
        }
    }
    Ok(())
}

/// Gradient `sum_s p_gamma(s) A(s)^T q1(s)`: the Gaussian integral of
/// `Q(s, a) grad_log pi(a|s; w)` collapses to the covariance term.
pub fn gradient<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<DVector<f64>, EngineError> {
    let eval = evaluate(mdp, policy, w)?;
    let mut g = DVector::zeros(w.len());
    for s in 0..mdp.n_states {
        g += policy.design(s).transpose() * &eval.q1[s] * eval.p_gamma[s];
    }
    Ok(g)
}

/// `H2 = -sum_s p_gamma(s) V(s) A(s)^T Sigma^-1 A(s)` and its diagonal.
pub fn approx_hessian<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<(DMatrix<f64>, DVector<f64>), EngineError> {
    let eval = evaluate(mdp, policy, w)?;
    let mut h2 = DMatrix::zeros(w.len(), w.len());
    for s in 0..mdp.n_states {
        let a = policy.design(s);
        h2 += a.transpose() * policy.noise_cov_inv() * a * (-eval.p_gamma[s] * eval.v[s]);
    }
    let h2 = (&h2 + h2.transpose()) * 0.5;
    let d2 = h2.diagonal();
    Ok((h2, d2))
}

/// Fisher matrix `G = sum_s p_gamma(s) A(s)^T Sigma^-1 A(s)`.
pub fn fisher<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<DMatrix<f64>, EngineError> {
    let eval = evaluate(mdp, policy, w)?;
    let mut g = DMatrix::zeros(w.len(), w.len());
    for s in 0..mdp.n_states {
        let a = policy.design(s);
        g += a.transpose() * policy.noise_cov_inv() * a * eval.p_gamma[s];
    }
    Ok((&g + g.transpose()) * 0.5)
}

/// EM energy `Q(w, w_k)` via third-order Gaussian moment identities; exactly
/// quadratic in `w`.
pub fn em_energy<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
    w_k: &ParamVector,
) -> Result<f64, EngineError> {
    let eval_k = evaluate(mdp, policy, w_k)?;
    let m = mdp.action_dim as f64;
    let sigma_inv = policy.noise_cov_inv();
    let chol = policy
        .noise_cov()
        .clone()
        .cholesky()
        .ok_or(EngineError::SingularSystem)?;
    let log_norm = -0.5 * (m * (2.0 * std::f64::consts::PI).ln() + chol.determinant().ln());
    let mut energy = 0.0;
    for s in 0..mdp.n_states {
        let mu_w = policy.design(s) * w;
        let d = &eval_k.means[s] - &mu_w;
        let quad = (d.transpose() * sigma_inv * &d)[(0, 0)];
        energy += eval_k.p_gamma[s]
            * (-0.5 * (eval_k.v[s] * (quad + m) + 2.0 * eval_k.q1[s].dot(&d))
                + eval_k.v[s] * log_norm);
    }
    Ok(energy)
}

/// Closed-form M-step: assembles the weighted least-squares normal equations
/// with weights `p_gamma * Q` and solves them (ridge `1e-10 * trace` when
/// singular). For this engine's policies the log-policy is always quadratic.
pub fn em_update<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w_k: &ParamVector,
) -> Result<ParamVector, EngineError> {
    if !policy.is_log_quadratic() {
        return Err(EngineError::NotClosedForm);
    }
    let eval_k = evaluate(mdp, policy, w_k)?;
    let sigma_inv = policy.noise_cov_inv();
    let n_w = w_k.len();
    let mut normal = DMatrix::zeros(n_w, n_w);
    let mut rhs = DVector::zeros(n_w);
    for s in 0..mdp.n_states {
        let a = policy.design(s);
        let weight = eval_k.p_gamma[s];
        if weight == 0.0 {
            continue;
        }
        normal += a.transpose() * sigma_inv * &a * (weight * eval_k.v[s]);
        rhs += a.transpose() * (sigma_inv * &eval_k.means[s] * eval_k.v[s] + &eval_k.q1[s]) * weight;
    }
    solve_normal_equations(normal, rhs)
}

/// Value, gradient, H2/D2 and Fisher in one pass.
pub fn search_bundle<P: LinearGaussianStructure>(
    mdp: &LinearMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<SearchDirectionBundle, EngineError> {
    let eval = evaluate(mdp, policy, w)?;
    let n_w = w.len();
    let mut grad = DVector::zeros(n_w);
    let mut h2 = DMatrix::zeros(n_w, n_w);
    let mut fisher_m = DMatrix::zeros(n_w, n_w);
    for s in 0..mdp.n_states {
        let a = policy.design(s);
        let weight = eval.p_gamma[s];
        grad += a.transpose() * &eval.q1[s] * weight;
        let info = a.transpose() * policy.noise_cov_inv() * &a;
        h2 += &info * (-weight * eval.v[s]);
        fisher_m += info * weight;
    }
    let h2 = (&h2 + h2.transpose()) * 0.5;
    let fisher_m = (&fisher_m + fisher_m.transpose()) * 0.5;
    Ok(SearchDirectionBundle {
        value: eval.u,
        grad,
        d2: Some(h2.diagonal()),
        h2: Some(h2),
        fisher: Some(fisher_m),
        provenance: Provenance::Exact,
    })
}
