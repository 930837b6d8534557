//! Policy-search optimization toolkit for Markov decision processes.
//!
//! The crate provides, over a shared search-direction abstraction:
//!
//! - an exact tabular engine for the discounted objective, its gradient,
//!   approximate Hessian (H2/D2), Fisher matrix, full Hessian oracle and the
//!   EM energy/update ([`exact`]), plus a closed-form Gaussian engine for
//!   linear-in-action models where the EM step is exact ([`linear`]);
//! - brute-force trajectory enumeration as an independent oracle
//!   ([`enumeration`]);
//! - Monte Carlo estimators: the recurrent-state eligibility-trace
//!   estimator and forward sampling ([`estimate`]);
//! - steepest/natural gradient ascent, full and diagonal approximate Newton
//!   and EM update rules with step-size schedules and a seeded line search
//!   ([`optim`]);
//! - the benchmark environments ([`env`]) and a seeded, reproducible
//!   experiment harness ([`experiment`]).

pub mod enumeration;
pub mod env;
pub mod estimate;
pub mod exact;
pub mod experiment;
pub mod fixtures;
pub(crate) mod linalg;
pub mod linear;
pub mod model;
pub mod optim;
pub mod policy;
pub mod verify;

pub use model::{ParamVector, SampledEnv, SearchDirectionBundle, TabularMdp, Trajectory};
pub use optim::{Method, StepSchedule};
pub use policy::{GaussianLinearPolicy, GibbsPolicy, ParamNoiseLinearPolicy, PolicyModel};
