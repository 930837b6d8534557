//! Closed-form evaluation over a tabular MDP of the discounted occupancy,
//! state-action values, objective, gradient, approximate Hessian, Fisher
//! matrix, full Hessian (finite-difference oracle), EM energy and the
//! closed-form EM update.
//!
//! Everything here reduces to dense linear solves of size
//! `n_states * n_actions`; the systems are nonsingular for any discount
//! below one with stochastic kernels.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::mat_axpy;
use crate::model::{ParamVector, Provenance, SearchDirectionBundle, TabularMdp};
use crate::policy::{fd_jacobian, DiscretePolicy, PolicyError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("linear system is singular; the model is malformed")]
    SingularSystem,
    #[error("policy has no closed-form M-step (log-policy is not quadratic)")]
    NotClosedForm,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Discounted state-action occupancy `p_gamma`, state-action values `Q` and
/// the objective `U` at one parameter point.
#[derive(Debug, Clone)]
pub struct OccupancyAndValue {
    /// Indexed `z = s * n_actions + a`; sums to `1 / (1 - gamma)`.
    pub p_gamma: DVector<f64>,
    pub q: DVector<f64>,
    pub u: f64,
}

/// Per-(s, a) policy evaluations reused across the engine's sums.
struct PolicyTables {
    probs: Vec<f64>,
    grads: Vec<DVector<f64>>,
    hesses: Vec<DMatrix<f64>>,
}

fn tables<P>(mdp: &TabularMdp, policy: &P, w: &ParamVector) -> Result<PolicyTables, PolicyError>
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
    Ok(PolicyTables { probs, grads, hesses })
}

/// State-action transition kernel `M[z, z'] = p(s'|z) pi(a'|s'; w)`.
fn kernel(mdp: &TabularMdp, probs: &[f64]) -> DMatrix<f64> {
    let n_z = mdp.n_z();
    let n_a = mdp.n_actions;
    let mut m = DMatrix::zeros(n_z, n_z);
    for s in 0..mdp.n_states {
        for a in 0..n_a {
            let z = s * n_a + a;
            for next in 0..mdp.n_states {
                let p = mdp.trans(s, a, next);
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..n_a {
                    m[(z, next * n_a + a2)] = p * probs[next * n_a + a2];
                }
            }
        }
    }
    m
}

fn occupancy_from_tables(
    mdp: &TabularMdp,
    tabs: &PolicyTables,
) -> Result<OccupancyAndValue, EngineError> {
    let n_z = mdp.n_z();
    let m = kernel(mdp, &tabs.probs);
    let eye = DMatrix::identity(n_z, n_z);

    let rewards = DVector::from_fn(n_z, |z, _| mdp.reward(z / mdp.n_actions, z % mdp.n_actions));
    let q = (&eye - &m * mdp.gamma)
        .lu()
        .solve(&rewards)
        .ok_or(EngineError::SingularSystem)?;

    let seed = DVector::from_fn(n_z, |z, _| mdp.p1[z / mdp.n_actions] * tabs.probs[z]);
    let p_gamma = (&eye - m.transpose() * mdp.gamma)
        .lu()
        .solve(&seed)
        .ok_or(EngineError::SingularSystem)?;

    let u = seed.dot(&q);
    Ok(OccupancyAndValue { p_gamma, q, u })
}

/// Solves the Bellman system for `Q` and the transposed flow system for
/// `p_gamma`, and evaluates the objective.
pub fn occupancy_and_value<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<OccupancyAndValue, EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let tabs = tables(mdp, policy, w)?;
    occupancy_from_tables(mdp, &tabs)
}

/// Structural checks on an occupancy/value solution: occupancy mass,
/// Bellman residual, and agreement of the two objective expressions.
pub fn check_occupancy_invariants<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
    occ: &OccupancyAndValue,
) -> Result<(), String>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let tabs = tables(mdp, policy, w).map_err(|e| e.to_string())?;
    let mass: f64 = occ.p_gamma.iter().sum();
    let expected_mass = 1.0 / (1.0 - mdp.gamma);
    if ((mass - expected_mass) / expected_mass).abs() > 1e-10 {
        return Err(format!("occupancy mass {mass}, expected {expected_mass}"));
    }
    let m = kernel(mdp, &tabs.probs);
    let rewards = DVector::from_fn(mdp.n_z(), |z, _| mdp.reward(z / mdp.n_actions, z % mdp.n_actions));
    let residual = (&occ.q - rewards - &m * &occ.q * mdp.gamma).amax();
    let tol = 1e-10 * occ.q.amax().max(1.0);
    if residual > tol {
        return Err(format!("Bellman residual {residual} exceeds {tol}"));
    }
    let u_via_occupancy = occ
        .p_gamma
        .iter()
        .enumerate()
        .map(|(z, p)| p * mdp.reward(z / mdp.n_actions, z % mdp.n_actions))
        .sum::<f64>();
    let scale = occ.u.abs().max(1e-12);
    if ((u_via_occupancy - occ.u) / scale).abs() > 1e-10 {
        return Err(format!("u mismatch: {} vs {}", occ.u, u_via_occupancy));
    }
    Ok(())
}

/// Exact gradient: `sum_z p_gamma(z) Q(z) grad_log pi(a|s; w)`.
pub fn gradient<P>(mdp: &TabularMdp, policy: &P, w: &ParamVector) -> Result<DVector<f64>, EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let tabs = tables(mdp, policy, w)?;
    let occ = occupancy_from_tables(mdp, &tabs)?;
    let mut g = DVector::zeros(w.len());
    for z in 0..mdp.n_z() {
        let c = occ.p_gamma[z] * occ.q[z];
        if c != 0.0 {
            g.axpy(c, &tabs.grads[z], 1.0);
        }
    }
    Ok(g)
}

/// Approximate Hessian `H2 = sum_z p_gamma(z) Q(z) hess_log pi(a|s; w)` and
/// its diagonal `D2`. Symmetrized before returning.
pub fn approx_hessian<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<(DMatrix<f64>, DVector<f64>), EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let tabs = tables(mdp, policy, w)?;
    let occ = occupancy_from_tables(mdp, &tabs)?;
    let mut h2 = DMatrix::zeros(w.len(), w.len());
    for z in 0..mdp.n_z() {
        let c = occ.p_gamma[z] * occ.q[z];
        if c != 0.0 {
            mat_axpy(&mut h2, c, &tabs.hesses[z]);
        }
    }
    let h2 = (&h2 + h2.transpose()) * 0.5;
    let d2 = h2.diagonal();
    Ok((h2, d2))
}

/// Fisher information of the trajectory distribution:
/// `G = -sum_z p_gamma(z) hess_log pi(a|s; w)`.
pub fn fisher<P>(mdp: &TabularMdp, policy: &P, w: &ParamVector) -> Result<DMatrix<f64>, EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let tabs = tables(mdp, policy, w)?;
    let occ = occupancy_from_tables(mdp, &tabs)?;
    let mut g = DMatrix::zeros(w.len(), w.len());
    for z in 0..mdp.n_z() {
        let c = occ.p_gamma[z];
        if c != 0.0 {
            mat_axpy(&mut g, -c, &tabs.hesses[z]);
        }
    }
    Ok((&g + g.transpose()) * 0.5)
}

/// Full Hessian by central finite differences of the analytic gradient
/// (step `1e-5 * max(1, |w|_inf)`, symmetrized), together with
/// `H1 = H - H2`. This is the verification oracle for the decomposition;
/// the optimizers never invert `H` itself.
pub fn full_hessian<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<(DMatrix<f64>, DMatrix<f64>), EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let h = 1e-5 * w.amax().max(1.0);
    let raw = fd_jacobian(|w| gradient(mdp, policy, w), w, h)?;
    let sym = (&raw + raw.transpose()) * 0.5;
    let (h2, _) = approx_hessian(mdp, policy, w)?;
    let h1 = &sym - &h2;
    Ok((sym, h1))
}

/// EM energy `Q(w, w_k) = sum_z p_gamma(z; w_k) Q(z; w_k) log pi(a|s; w)`.
pub fn em_energy<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
    w_k: &ParamVector,
) -> Result<f64, EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let tabs_k = tables(mdp, policy, w_k)?;
    let occ = occupancy_from_tables(mdp, &tabs_k)?;
    let mut energy = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let z = s * mdp.n_actions + a;
            let c = occ.p_gamma[z] * occ.q[z];
            if c != 0.0 {
                energy += c * policy.log_prob(&s, &a, w)?;
            }
        }
    }
    Ok(energy)
}

/// Closed-form M-step for log-quadratic policies: maximizes the energy by
/// assembling and solving the weighted least-squares normal equations with
/// weights `p_gamma * Q`. Singular normal matrices fall back to a ridge of
/// `1e-10 * trace`.
pub fn em_update<P>(mdp: &TabularMdp, policy: &P, w_k: &ParamVector) -> Result<ParamVector, EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    if !policy.is_log_quadratic() {
        return Err(EngineError::NotClosedForm);
    }
    let tabs_k = tables(mdp, policy, w_k)?;
    let occ = occupancy_from_tables(mdp, &tabs_k)?;
    let n_w = w_k.len();
    let zero = DVector::zeros(n_w);
    let mut normal = DMatrix::zeros(n_w, n_w);
    let mut rhs = DVector::zeros(n_w);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let z = s * mdp.n_actions + a;
            let c = occ.p_gamma[z] * occ.q[z];
            if c == 0.0 {
                continue;
            }
            // For a quadratic log-policy the Hessian is parameter-free and
            // grad_log at w = 0 is the linear coefficient.
            mat_axpy(&mut normal, -c, &tabs_k.hesses[z]);
            rhs.axpy(c, &policy.grad_log(&s, &a, &zero)?, 1.0);
        }
    }
    solve_normal_equations(normal, rhs)
}

/// Solves `N x = r` for PSD `N`, applying the documented ridge fallback.
pub(crate) fn solve_normal_equations(
    mut normal: DMatrix<f64>,
    rhs: DVector<f64>,
) -> Result<ParamVector, EngineError> {
    let n = normal.nrows();
    normal = (&normal + normal.transpose()) * 0.5;
    let trace: f64 = normal.diagonal().sum();
    if trace == 0.0 {
        // Zero weights everywhere: every parameter maximizes; minimum norm.
        return Ok(DVector::zeros(n));
    }
    if let Some(chol) = normal.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    let mut ridge = 1e-10 * trace.abs();
    for _ in 0..60 {
        let attempt = &normal + DMatrix::identity(n, n) * ridge;
        if let Some(chol) = attempt.cholesky() {
            return Ok(chol.solve(&rhs));
        }
        ridge *= 2.0;
    }
    Err(EngineError::SingularSystem)
}

/// Evaluates value, gradient, H2/D2 and Fisher in one pass.
pub fn search_bundle<P>(
    mdp: &TabularMdp,
    policy: &P,
    w: &ParamVector,
) -> Result<SearchDirectionBundle, EngineError>
where
    P: DiscretePolicy<State = usize, Action = usize>,
{
    let tabs = tables(mdp, policy, w)?;
    let occ = occupancy_from_tables(mdp, &tabs)?;
    let n_w = w.len();
    let mut grad = DVector::zeros(n_w);
    let mut h2 = DMatrix::zeros(n_w, n_w);
    let mut fisher_m = DMatrix::zeros(n_w, n_w);
    for z in 0..mdp.n_z() {
        let occ_w = occ.p_gamma[z];
        if occ_w == 0.0 {
            continue;
        }
        let c = occ_w * occ.q[z];
        grad.axpy(c, &tabs.grads[z], 1.0);
        mat_axpy(&mut h2, c, &tabs.hesses[z]);
        mat_axpy(&mut fisher_m, -occ_w, &tabs.hesses[z]);
    }
    let h2 = (&h2 + h2.transpose()) * 0.5;
    let fisher_m = (&fisher_m + fisher_m.transpose()) * 0.5;
    Ok(SearchDirectionBundle {
        value: occ.u,
        grad,
        d2: Some(h2.diagonal()),
        h2: Some(h2),
        fisher: Some(fisher_m),
        provenance: Provenance::Exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration::{enumerate_return, truncated_path_sums, truncation_bound};
    use crate::fixtures::{random_features, random_mdp, random_params};
    use crate::policy::{fd_gradient, GibbsPolicy, PolicyModel, TabularFeatures};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_reward_mdp() -> TabularMdp {
        TabularMdp::new(
            vec![0.6, 0.4],
            vec![
                vec![vec![0.5, 0.5], vec![0.9, 0.1]],
                vec![vec![0.3, 0.7], vec![0.1, 0.9]],
            ],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            0.8,
        )
        .unwrap()
    }

    #[test]
    fn zero_reward_has_zero_values() {
        let mdp = zero_reward_mdp();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = GibbsPolicy::new(random_features(&mut rng, 2, 2, 3));
        let w = random_params(&mut rng, 3, 1.0);
        let occ = occupancy_and_value(&mdp, &policy, &w).unwrap();
        assert_eq!(occ.q.amax(), 0.0);
        assert_eq!(occ.u, 0.0);
        assert_relative_eq!(occ.p_gamma.sum(), 1.0 / (1.0 - 0.8), max_relative = 1e-10);
        assert_eq!(gradient(&mdp, &policy, &w).unwrap().amax(), 0.0);
        let (h2, d2) = approx_hessian(&mdp, &policy, &w).unwrap();
        assert_eq!(h2.amax(), 0.0);
        assert_eq!(d2.amax(), 0.0);
        let (h, h1) = full_hessian(&mdp, &policy, &w).unwrap();
        assert_eq!(h.amax(), 0.0);
        assert_eq!(h1.amax(), 0.0);
        assert_eq!(em_energy(&mdp, &policy, &w, &w).unwrap(), 0.0);
    }

    #[test]
    fn single_state_geometric_value() {
        let mdp = TabularMdp::new(vec![1.0], vec![vec![vec![1.0]]], vec![vec![1.0]], 0.9).unwrap();
        let policy = GibbsPolicy::new(TabularFeatures::from_fn(1, 1, 1, |_, _| DVector::zeros(1)));
        let w = DVector::zeros(1);
        let occ = occupancy_and_value(&mdp, &policy, &w).unwrap();
        assert_relative_eq!(occ.q[0], 10.0, max_relative = 1e-12);
        assert_relative_eq!(occ.u, 10.0, max_relative = 1e-12);
    }

    #[test]
    fn value_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mdp = random_mdp(&mut rng, 3, 2, 0.05);
        let policy = GibbsPolicy::new(random_features(&mut rng, 3, 2, 4));
        let w = random_params(&mut rng, 4, 1.0);
        // gamma^7 * R_max / (1 - gamma) < 1e-8 at gamma = 0.05
        let cut = 7;
        assert!(truncation_bound(&mdp, cut) < 1e-8);
        let occ = occupancy_and_value(&mdp, &policy, &w).unwrap();
        let enumerated = enumerate_return(&mdp, &policy, &w, cut, 10_000_000).unwrap();
        assert!((occ.u - enumerated).abs() < 1e-8, "{} vs {}", occ.u, enumerated);
        check_occupancy_invariants(&mdp, &policy, &w, &occ).unwrap();
    }

    #[test]
    fn degenerate_policy_has_zero_gradient() {
        // One legal action per state: grad_log is identically zero.
        let mdp = TabularMdp::new(
            vec![1.0, 0.0],
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![vec![1.0], vec![0.5]],
            0.9,
        )
        .unwrap();
        let policy = GibbsPolicy::new(TabularFeatures::from_fn(2, 1, 2, |s, _| {
            DVector::from_vec(vec![s as f64, 1.0])
        }));
        let w = DVector::from_vec(vec![0.7, -0.2]);
        assert_eq!(gradient(&mdp, &policy, &w).unwrap().amax(), 0.0);
        assert_eq!(fisher(&mdp, &policy, &w).unwrap().amax(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mdp = random_mdp(&mut rng, 4, 3, 0.85);
            let policy = GibbsPolicy::new(random_features(&mut rng, 4, 3, 5));
            let w = random_params(&mut rng, 5, 1.0);
            let grad = gradient(&mdp, &policy, &w).unwrap();
            let fd = fd_gradient(
                |w| occupancy_and_value(&mdp, &policy, w).map(|o| o.u),
                &w,
                1e-5,
            )
            .unwrap();
            let denom = grad.amax().max(1.0);
            assert!(
                (&grad - &fd).amax() / denom < 1e-6,
                "seed {seed}: rel err {}",
                (&grad - &fd).amax() / denom
            );
        }
    }

    #[test]
    fn gradient_matches_truncated_path_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = random_mdp(&mut rng, 3, 2, 0.04);
        let policy = GibbsPolicy::new(random_features(&mut rng, 3, 2, 3));
        let w = random_params(&mut rng, 3, 0.8);
        let sums = truncated_path_sums(&mdp, &policy, &w, 6, 10_000_000).unwrap();
        let grad = gradient(&mdp, &policy, &w).unwrap();
        assert!((&grad - &sums.grad).amax() < 1e-7);
    }

    #[test]
    fn h2_negative_semidefinite_and_matches_trajectory_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = random_mdp(&mut rng, 3, 2, 0.04);
        let policy = GibbsPolicy::new(random_features(&mut rng, 3, 2, 3));
        let w = random_params(&mut rng, 3, 0.8);
        let (h2, d2) = approx_hessian(&mdp, &policy, &w).unwrap();
        assert!(h2.clone().symmetric_eigen().eigenvalues.max() <= 1e-10);
        assert_eq!(d2, h2.diagonal());
        let sums = truncated_path_sums(&mdp, &policy, &w, 6, 10_000_000).unwrap();
        assert!((&h2 - &sums.h2).amax() < 1e-7, "gap {}", (&h2 - &sums.h2).amax());
    }

    #[test]
    fn hessian_decomposition_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mdp = random_mdp(&mut rng, 3, 2, 0.04);
        let policy = GibbsPolicy::new(random_features(&mut rng, 3, 2, 3));
        let w = random_params(&mut rng, 3, 0.8);
        let (h, h1) = full_hessian(&mdp, &policy, &w).unwrap();
        assert!((&h - &h.transpose()).amax() < 1e-12);
        let sums = truncated_path_sums(&mdp, &policy, &w, 6, 10_000_000).unwrap();
        let scale = h.amax().max(1.0);
        assert!((&h1 - &sums.h1).amax() / scale < 1e-5, "h1 gap {}", (&h1 - &sums.h1).amax());
        let (h2, _) = approx_hessian(&mdp, &policy, &w).unwrap();
        assert!(((&sums.h1 + &h2) - &h).amax() / scale < 1e-5);
    }

    #[test]
    fn fisher_psd_and_weight_swap_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mdp = random_mdp(&mut rng, 4, 2, 0.9);
        let policy = GibbsPolicy::new(random_features(&mut rng, 4, 2, 4));
        let w = random_params(&mut rng, 4, 1.5);
        let g = fisher(&mdp, &policy, &w).unwrap();
        assert!(g.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        // Swapping the q-weight for 1 in the H2 sum and negating gives G.
        let occ = occupancy_and_value(&mdp, &policy, &w).unwrap();
        let mut swapped = DMatrix::zeros(4, 4);
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let z = s * mdp.n_actions + a;
                crate::linalg::mat_axpy(&mut swapped, occ.p_gamma[z], &policy.hess_log(&s, &a, &w).unwrap());
            }
        }
        assert!((&g + &swapped).amax() < 1e-12);
    }

    #[test]
    fn em_energy_gradient_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mdp = random_mdp(&mut rng, 3, 2, 0.9);
        let policy = GibbsPolicy::new(random_features(&mut rng, 3, 2, 3));
        let w_k = random_params(&mut rng, 3, 1.0);
        let grad_u = gradient(&mdp, &policy, &w_k).unwrap();
        let fd = fd_gradient(|w| em_energy(&mdp, &policy, w, &w_k), &w_k, 1e-6).unwrap();
        let denom = grad_u.amax().max(1.0);
        assert!((grad_u - fd).amax() / denom < 1e-5);
    }

    #[test]
    fn em_update_requires_log_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mdp = random_mdp(&mut rng, 2, 2, 0.9);
        let policy = GibbsPolicy::new(random_features(&mut rng, 2, 2, 2));
        let w = DVector::zeros(2);
        assert!(matches!(
            em_update(&mdp, &policy, &w),
            Err(EngineError::NotClosedForm)
        ));
    }

    #[test]
    fn bundle_passes_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mdp = random_mdp(&mut rng, 3, 3, 0.8);
        let policy = GibbsPolicy::new(random_features(&mut rng, 3, 3, 4));
        let w = random_params(&mut rng, 4, 1.0);
        let bundle = search_bundle(&mdp, &policy, &w).unwrap();
        bundle.check_invariants().unwrap();
        let grad = gradient(&mdp, &policy, &w).unwrap();
        assert!((&bundle.grad - &grad).amax() < 1e-14);
    }
}
