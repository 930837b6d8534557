//! Differentiable parametric policies: the Gibbs (softmax-over-features)
//! family, Gaussian-linear controllers, a parameter-noise linear controller,
//! and linear reparametrization of any policy.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::model::ParamVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("action not legal in this state")]
    ActionNotLegal,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("transform is singular or near-singular (estimated condition {cond:.3e})")]
    SingularTransform { cond: f64 },
}

/// One sampled action together with the log-policy derivatives at it.
#[derive(Debug, Clone)]
pub struct SampledStep<A> {
    pub action: A,
    pub grad_log: DVector<f64>,
    /// Present only when requested; for many policies the Hessian does not
    /// depend on the action.
    pub hess_log: Option<DMatrix<f64>>,
}

/// Differentiable parametric policy contract.
///
/// `grad_log` and `hess_log` are the first and second derivatives of
/// `log_prob` with respect to the parameters; `hess_log` must be exactly
/// symmetric. Policies are immutable and all evaluations are pure; sampling
/// draws from a caller-owned RNG.
pub trait PolicyModel {
    type State;
    type Action;

    fn n_params(&self) -> usize;

    fn log_prob(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<f64, PolicyError>;

    fn grad_log(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<DVector<f64>, PolicyError>;

    fn hess_log(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<DMatrix<f64>, PolicyError>;

    fn sample<R: Rng>(&self, state: &Self::State, w: &ParamVector, rng: &mut R)
        -> Result<Self::Action, PolicyError>;

    /// Log-concave in `w`: guarantees `hess_log` is negative semidefinite
    /// everywhere, hence H2 and -G are as well.
    fn is_log_concave(&self) -> bool;

    /// Log-probability exactly quadratic in `w`: the EM M-step has a closed
    /// form and the relation to the approximate Newton step is exact.
    fn is_log_quadratic(&self) -> bool;

    /// Samples an action and evaluates the derivatives in one call. The
    /// default composes the individual operations; policies with shared
    /// per-state work override it.
    fn sample_and_eval<R: Rng>(
        &self,
        state: &Self::State,
        w: &ParamVector,
        rng: &mut R,
        want_hess: bool,
    ) -> Result<SampledStep<Self::Action>, PolicyError> {
        let action = self.sample(state, w, rng)?;
        let grad_log = self.grad_log(state, &action, w)?;
        let hess_log = if want_hess {
            Some(self.hess_log(state, &action, w)?)
        } else {
            None
        };
        Ok(SampledStep { action, grad_log, hess_log })
    }
}

/// Policies over finite per-state action sets, exposing the full action
/// distribution. The exact engine requires this view.
pub trait DiscretePolicy: PolicyModel {
    fn actions(&self, state: &Self::State) -> Vec<Self::Action>;

    /// Probabilities aligned with `actions(state)`.
    fn action_probs(&self, state: &Self::State, w: &ParamVector)
        -> Result<Vec<f64>, PolicyError>;
}

/// Feature provider for Gibbs policies: enumerates the legal actions of a
/// state and evaluates the feature vector of each `(state, action)` pair.
pub trait ActionFeatures {
    type State;
    type Action: Clone + PartialEq;

    fn n_features(&self) -> usize;

    fn actions(&self, state: &Self::State) -> Vec<Self::Action>;

    /// Writes the features of every legal action into the rows of `out`
    /// (`n_actions x n_features`) and returns the action list.
    fn features_into(&self, state: &Self::State, out: &mut DMatrix<f64>) -> Vec<Self::Action>;

    fn features(&self, state: &Self::State, action: &Self::Action) -> DVector<f64>;
}

/// Gibbs (softmax) policy: `pi(a|s; w) ~ exp(w . phi(a, s))` over the legal
/// action set of each state. Log-concave in `w` for any feature map.
#[derive(Debug, Clone)]
pub struct GibbsPolicy<F: ActionFeatures> {
    features: F,
}

impl<F: ActionFeatures> GibbsPolicy<F> {
    pub fn new(features: F) -> Self {
        GibbsPolicy { features }
    }

    pub fn feature_map(&self) -> &F {
        &self.features
    }

    fn check_dim(&self, w: &ParamVector) -> Result<(), PolicyError> {
        if w.len() != self.features.n_features() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.features.n_features(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Feature matrix (rows = actions), logits and normalized probabilities
    /// at `state`. logsumexp uses max-subtraction.
    fn evaluate(
        &self,
        state: &F::State,
        w: &ParamVector,
    ) -> Result<(Vec<F::Action>, DMatrix<f64>, DVector<f64>), PolicyError> {
        self.check_dim(w)?;
        let n_feat = self.features.n_features();
        let mut feats = DMatrix::zeros(0, 0);
        // features_into resizes through us: preallocate with the action count.
        let actions = self.features.actions(state);
        feats.resize_mut(actions.len(), n_feat, 0.0);
        let actions = self.features.features_into(state, &mut feats);
        let logits = &feats * w;
        let max = logits.max();
        let mut probs = logits.map(|l| (l - max).exp());
        let norm: f64 = probs.iter().sum();
        probs /= norm;
        Ok((actions, feats, probs))
    }

    fn action_index(actions: &[F::Action], action: &F::Action) -> Result<usize, PolicyError> {
        actions
            .iter()
            .position(|a| a == action)
            .ok_or(PolicyError::ActionNotLegal)
    }

    /// The per-state score covariance `Cov[phi]`; `hess_log` is its negation
    /// for every action, which makes the policy log-concave.
    fn feature_covariance(feats: &DMatrix<f64>, probs: &DVector<f64>) -> DMatrix<f64> {
        let n_feat = feats.ncols();
        let mean = feats.transpose() * probs;
        let mut second = DMatrix::zeros(n_feat, n_feat);
        for (k, row) in feats.row_iter().enumerate() {
            let p = probs[k];
            if p == 0.0 {
                continue;
            }
            for i in 0..n_feat {
                let fi = row[i] * p;
                for j in i..n_feat {
                    second[(i, j)] += fi * row[j];
                }
            }
        }
        for i in 0..n_feat {
            for j in i..n_feat {
                let c = second[(i, j)] - mean[i] * mean[j];
                second[(i, j)] = c;
                second[(j, i)] = c;
            }
        }
        second
    }
}

impl<F: ActionFeatures> PolicyModel for GibbsPolicy<F> {
    type State = F::State;
    type Action = F::Action;

    fn n_params(&self) -> usize {
        self.features.n_features()
    }

    fn log_prob(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<f64, PolicyError>
    {
        let (actions, _, probs) = self.evaluate(state, w)?;
        let idx = Self::action_index(&actions, action)?;
        Ok(probs[idx].ln())
    }

    fn grad_log(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<DVector<f64>, PolicyError>
    {
        let (actions, feats, probs) = self.evaluate(state, w)?;
        let idx = Self::action_index(&actions, action)?;
        let mean = feats.transpose() * &probs;
        Ok(feats.row(idx).transpose() - mean)
    }

    fn hess_log(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<DMatrix<f64>, PolicyError>
    {
        let (actions, feats, probs) = self.evaluate(state, w)?;
        Self::action_index(&actions, action)?;
        Ok(-Self::feature_covariance(&feats, &probs))
    }

    fn sample<R: Rng>(&self, state: &Self::State, w: &ParamVector, rng: &mut R)
        -> Result<Self::Action, PolicyError>
    {
        let (actions, _, probs) = self.evaluate(state, w)?;
        let idx = crate::model::sample_categorical(probs.as_slice(), rng);
        Ok(actions[idx].clone())
    }

    fn is_log_concave(&self) -> bool {
        true
    }

    fn is_log_quadratic(&self) -> bool {
        false
    }

    fn sample_and_eval<R: Rng>(
        &self,
        state: &Self::State,
        w: &ParamVector,
        rng: &mut R,
        want_hess: bool,
    ) -> Result<SampledStep<Self::Action>, PolicyError> {
        let (actions, feats, probs) = self.evaluate(state, w)?;
        let idx = crate::model::sample_categorical(probs.as_slice(), rng);
        let mean = feats.transpose() * &probs;
        let grad_log = feats.row(idx).transpose() - &mean;
        let hess_log = want_hess.then(|| -Self::feature_covariance(&feats, &probs));
        Ok(SampledStep { action: actions[idx].clone(), grad_log, hess_log })
    }
}

impl<F: ActionFeatures> DiscretePolicy for GibbsPolicy<F> {
    fn actions(&self, state: &Self::State) -> Vec<Self::Action> {
        self.features.actions(state)
    }

    fn action_probs(&self, state: &Self::State, w: &ParamVector)
        -> Result<Vec<f64>, PolicyError>
    {
        let (_, _, probs) = self.evaluate(state, w)?;
        Ok(probs.iter().cloned().collect())
    }
}

/// Tabular feature map: a dense feature table indexed by `(state, action)`
/// with the same action count in every state. Action ids are `0..n_actions`.
#[derive(Debug, Clone)]
pub struct TabularFeatures {
    n_states: usize,
    n_actions: usize,
    n_features: usize,
    table: Vec<DVector<f64>>,
}

impl TabularFeatures {
    pub fn new(n_states: usize, n_actions: usize, table: Vec<DVector<f64>>) -> Self {
        assert_eq!(table.len(), n_states * n_actions, "feature table size");
        let n_features = table.first().map_or(0, |v| v.len());
        assert!(table.iter().all(|v| v.len() == n_features), "ragged feature table");
        TabularFeatures { n_states, n_actions, n_features, table }
    }

    /// Builds a table from a closure over `(state, action)`.
    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        n_features: usize,
        mut f: impl FnMut(usize, usize) -> DVector<f64>,
    ) -> Self {
        let mut table = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                let v = f(s, a);
                assert_eq!(v.len(), n_features);
                table.push(v);
            }
        }
        TabularFeatures { n_states, n_actions, n_features, table }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

impl ActionFeatures for TabularFeatures {
    type State = usize;
    type Action = usize;

    fn n_features(&self) -> usize {
        self.n_features
    }

    fn actions(&self, _state: &usize) -> Vec<usize> {
        (0..self.n_actions).collect()
    }

    fn features_into(&self, state: &usize, out: &mut DMatrix<f64>) -> Vec<usize> {
        out.resize_mut(self.n_actions, self.n_features, 0.0);
        for a in 0..self.n_actions {
            let v = &self.table[state * self.n_actions + a];
            for j in 0..self.n_features {
                out[(a, j)] = v[j];
            }
        }
        (0..self.n_actions).collect()
    }

    fn features(&self, state: &usize, action: &usize) -> DVector<f64> {
        self.table[state * self.n_actions + action].clone()
    }
}

/// Gaussian-linear controller over a finite state set: `a ~ N(K psi(s) + m, Sigma)`
/// with `w = (K row-major, m)` and `Sigma` fixed (not optimized). The
/// log-policy is exactly quadratic in `w`, so the EM M-step is closed form.
#[derive(Debug, Clone)]
pub struct GaussianLinearPolicy {
    state_features: Vec<DVector<f64>>,
    action_dim: usize,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    sigma_chol: DMatrix<f64>,
    log_norm: f64,
    designs: Vec<DMatrix<f64>>,
}

impl GaussianLinearPolicy {
    pub fn new(state_features: Vec<DVector<f64>>, action_dim: usize, sigma: DMatrix<f64>) -> Self {
        assert_eq!(sigma.nrows(), action_dim);
        assert_eq!(sigma.ncols(), action_dim);
        let chol = sigma.clone().cholesky().expect("Sigma must be positive-definite");
        let sigma_inv = chol.inverse();
        let det = chol.determinant();
        let log_norm = -0.5 * (action_dim as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln());
        let feat_dim = state_features.first().map_or(0, |v| v.len());
        let n_params = action_dim * feat_dim + action_dim;
        let designs = state_features
            .iter()
            .map(|psi| {
                // mu_i = sum_j K[i][j] psi_j + m_i; rows of A give mu = A w.
                let mut a = DMatrix::zeros(action_dim, n_params);
                for i in 0..action_dim {
                    for j in 0..feat_dim {
                        a[(i, i * feat_dim + j)] = psi[j];
                    }
                    a[(i, action_dim * feat_dim + i)] = 1.0;
                }
                a
            })
            .collect();
        GaussianLinearPolicy {
            state_features,
            action_dim,
            sigma,
            sigma_inv,
            sigma_chol: chol.l(),
            log_norm,
            designs,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn mean(&self, state: usize, w: &ParamVector) -> DVector<f64> {
        &self.designs[state] * w
    }

    fn check_dims(&self, state: usize, w: &ParamVector) -> Result<(), PolicyError> {
        if state >= self.state_features.len() {
            return Err(PolicyError::ActionNotLegal);
        }
        if w.len() != self.n_params() {
            return Err(PolicyError::DimensionMismatch { expected: self.n_params(), got: w.len() });
        }
        Ok(())
    }
}

/// Structural view a closed-form Gaussian engine needs: the per-state design
/// matrix `A(s)` with `mu(s; w) = A(s) w`, and the (fixed) noise covariance.
pub trait LinearGaussianStructure: PolicyModel<State = usize, Action = DVector<f64>> {
    fn design(&self, state: usize) -> DMatrix<f64>;
    fn noise_cov(&self) -> &DMatrix<f64>;
    fn noise_cov_inv(&self) -> &DMatrix<f64>;
}

impl PolicyModel for GaussianLinearPolicy {
    type State = usize;
    type Action = DVector<f64>;

    fn n_params(&self) -> usize {
        self.designs.first().map_or(0, |a| a.ncols())
    }

    fn log_prob(&self, state: &usize, action: &DVector<f64>, w: &ParamVector)
        -> Result<f64, PolicyError>
    {
        self.check_dims(*state, w)?;
        if action.len() != self.action_dim {
            return Err(PolicyError::DimensionMismatch { expected: self.action_dim, got: action.len() });
        }
        let resid = action - self.mean(*state, w);
        Ok(self.log_norm - 0.5 * (&resid.transpose() * &self.sigma_inv * &resid)[(0, 0)])
    }

    fn grad_log(&self, state: &usize, action: &DVector<f64>, w: &ParamVector)
        -> Result<DVector<f64>, PolicyError>
    {
        self.check_dims(*state, w)?;
        let resid = action - self.mean(*state, w);
        Ok(self.designs[*state].transpose() * (&self.sigma_inv * resid))
    }

    fn hess_log(&self, state: &usize, _action: &DVector<f64>, w: &ParamVector)
        -> Result<DMatrix<f64>, PolicyError>
    {
        self.check_dims(*state, w)?;
        let a = &self.designs[*state];
        Ok(-(a.transpose() * &self.sigma_inv * a))
    }

    fn sample<R: Rng>(&self, state: &usize, w: &ParamVector, rng: &mut R)
        -> Result<DVector<f64>, PolicyError>
    {
        self.check_dims(*state, w)?;
        let noise: DVector<f64> =
            DVector::from_fn(self.action_dim, |_, _| rng.sample(StandardNormal));
        Ok(self.mean(*state, w) + &self.sigma_chol * noise)
    }

    fn is_log_concave(&self) -> bool {
        true
    }

    fn is_log_quadratic(&self) -> bool {
        true
    }
}

impl LinearGaussianStructure for GaussianLinearPolicy {
    fn design(&self, state: usize) -> DMatrix<f64> {
        self.designs[state].clone()
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    fn noise_cov_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }
}

/// Linear controller with parameter-space exploration noise:
/// `a = (w + eps)^T s` with `eps ~ N(0, sigma_eps^2 I)`, hence
/// `a | s ~ N(w^T s, sigma_eps^2 |s|^2)`. Log-quadratic in `w`.
#[derive(Debug, Clone)]
pub struct ParamNoiseLinearPolicy {
    n_dims: usize,
    sigma_eps: f64,
}

impl ParamNoiseLinearPolicy {
    /// Variance floor guarding against an exactly-zero state.
    const VAR_FLOOR: f64 = 1e-12;

    pub fn new(n_dims: usize, sigma_eps: f64) -> Self {
        assert!(sigma_eps > 0.0);
        ParamNoiseLinearPolicy { n_dims, sigma_eps }
    }

    fn variance(&self, state: &DVector<f64>) -> f64 {
        self.sigma_eps * self.sigma_eps * state.norm_squared().max(Self::VAR_FLOOR)
    }

    fn check_dims(&self, state: &DVector<f64>, w: &ParamVector) -> Result<(), PolicyError> {
        if state.len() != self.n_dims {
            return Err(PolicyError::DimensionMismatch { expected: self.n_dims, got: state.len() });
        }
        if w.len() != self.n_dims {
            return Err(PolicyError::DimensionMismatch { expected: self.n_dims, got: w.len() });
        }
        Ok(())
    }
}

impl PolicyModel for ParamNoiseLinearPolicy {
    type State = DVector<f64>;
    type Action = f64;

    fn n_params(&self) -> usize {
        self.n_dims
    }

    fn log_prob(&self, state: &DVector<f64>, action: &f64, w: &ParamVector)
        -> Result<f64, PolicyError>
    {
        self.check_dims(state, w)?;
        let var = self.variance(state);
        let resid = action - w.dot(state);
        Ok(-0.5 * (resid * resid / var + (2.0 * std::f64::consts::PI * var).ln()))
    }

    fn grad_log(&self, state: &DVector<f64>, action: &f64, w: &ParamVector)
        -> Result<DVector<f64>, PolicyError>
    {
        self.check_dims(state, w)?;
        let var = self.variance(state);
        Ok(state * ((action - w.dot(state)) / var))
    }

    fn hess_log(&self, state: &DVector<f64>, _action: &f64, w: &ParamVector)
        -> Result<DMatrix<f64>, PolicyError>
    {
        self.check_dims(state, w)?;
        let var = self.variance(state);
        Ok(state * state.transpose() * (-1.0 / var))
    }

    fn sample<R: Rng>(&self, state: &DVector<f64>, w: &ParamVector, rng: &mut R)
        -> Result<f64, PolicyError>
    {
        self.check_dims(state, w)?;
        let xi: f64 = rng.sample(StandardNormal);
        Ok(w.dot(state) + self.variance(state).sqrt() * xi)
    }

    fn is_log_concave(&self) -> bool {
        true
    }

    fn is_log_quadratic(&self) -> bool {
        true
    }
}

/// Policy composed with a linear change of parameters:
/// `pi~(a|s; w) = pi(a|s; T w)`. Gradients and Hessians pick up `T^T (.)`
/// and `T^T (.) T`; log-concavity and log-quadraticity are preserved.
#[derive(Debug, Clone)]
pub struct Reparametrized<P: PolicyModel> {
    inner: P,
    t: DMatrix<f64>,
}

/// Wraps `policy` with the invertible map `t`, rejecting near-singular maps
/// (estimated condition number above 1e12).
pub fn reparametrize<P: PolicyModel>(policy: P, t: DMatrix<f64>) -> Result<Reparametrized<P>, PolicyError> {
    assert_eq!(t.nrows(), t.ncols(), "transform must be square");
    assert_eq!(t.nrows(), policy.n_params(), "transform must match parameter count");
    let svd = t.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(PolicyError::SingularTransform { cond });
    }
    Ok(Reparametrized { inner: policy, t })
}

impl<P: PolicyModel> Reparametrized<P> {
    pub fn transform(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn map(&self, w: &ParamVector) -> ParamVector {
        &self.t * w
    }
}

impl<P: PolicyModel> PolicyModel for Reparametrized<P> {
    type State = P::State;
    type Action = P::Action;

    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn log_prob(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<f64, PolicyError>
    {
        self.inner.log_prob(state, action, &self.map(w))
    }

    fn grad_log(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<DVector<f64>, PolicyError>
    {
        Ok(self.t.transpose() * self.inner.grad_log(state, action, &self.map(w))?)
    }

    fn hess_log(&self, state: &Self::State, action: &Self::Action, w: &ParamVector)
        -> Result<DMatrix<f64>, PolicyError>
    {
        Ok(self.t.transpose() * self.inner.hess_log(state, action, &self.map(w))? * &self.t)
    }

    fn sample<R: Rng>(&self, state: &Self::State, w: &ParamVector, rng: &mut R)
        -> Result<Self::Action, PolicyError>
    {
        self.inner.sample(state, &self.map(w), rng)
    }

    fn is_log_concave(&self) -> bool {
        self.inner.is_log_concave()
    }

    fn is_log_quadratic(&self) -> bool {
        self.inner.is_log_quadratic()
    }

    fn sample_and_eval<R: Rng>(
        &self,
        state: &Self::State,
        w: &ParamVector,
        rng: &mut R,
        want_hess: bool,
    ) -> Result<SampledStep<Self::Action>, PolicyError> {
        let step = self.inner.sample_and_eval(state, &self.map(w), rng, want_hess)?;
        Ok(SampledStep {
            action: step.action,
            grad_log: self.t.transpose() * step.grad_log,
            hess_log: step.hess_log.map(|h| self.t.transpose() * h * &self.t),
        })
    }
}

impl<P: DiscretePolicy> DiscretePolicy for Reparametrized<P> {
    fn actions(&self, state: &Self::State) -> Vec<Self::Action> {
        self.inner.actions(state)
    }

    fn action_probs(&self, state: &Self::State, w: &ParamVector)
        -> Result<Vec<f64>, PolicyError>
    {
        self.inner.action_probs(state, &self.map(w))
    }
}

impl<P> LinearGaussianStructure for Reparametrized<P>
where
    P: LinearGaussianStructure,
{
    fn design(&self, state: usize) -> DMatrix<f64> {
        self.inner.design(state) * &self.t
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        self.inner.noise_cov()
    }

    fn noise_cov_inv(&self) -> &DMatrix<f64> {
        self.inner.noise_cov_inv()
    }
}

/// Central finite difference of a scalar function of the parameters.
pub fn fd_gradient<E>(f: impl Fn(&ParamVector) -> Result<f64, E>, w: &ParamVector, h: f64)
    -> Result<DVector<f64>, E>
{
    let mut g = DVector::zeros(w.len());
    let mut wp = w.clone();
    for i in 0..w.len() {
        wp[i] = w[i] + h;
        let up = f(&wp)?;
        wp[i] = w[i] - h;
        let um = f(&wp)?;
        wp[i] = w[i];
        g[i] = (up - um) / (2.0 * h);
    }
    Ok(g)
}

/// Central finite difference of a vector function of the parameters; rows of
/// the result are `d f / d w_i`.
pub fn fd_jacobian<E>(
    f: impl Fn(&ParamVector) -> Result<DVector<f64>, E>,
    w: &ParamVector,
    h: f64,
) -> Result<DMatrix<f64>, E> {
    let dim_out = f(w)?.len();
    let mut jac = DMatrix::zeros(w.len(), dim_out);
    let mut wp = w.clone();
    for i in 0..w.len() {
        wp[i] = w[i] + h;
        let fp = f(&wp)?;
        wp[i] = w[i] - h;
        let fm = f(&wp)?;
        wp[i] = w[i];
        for j in 0..dim_out {
            jac[(i, j)] = (fp[j] - fm[j]) / (2.0 * h);
        }
    }
    Ok(jac)
}
