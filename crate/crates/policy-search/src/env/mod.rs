//! Experiment environments: tabular adapters, the two-state trace problem,
//! the Tetris simulator and the synthetic nonlinear system.

mod nonlinear;
mod tetris;
mod two_state;

pub use nonlinear::{NonlinearSystem, NONLINEAR_HORIZON};
pub use tetris::{
    tetris_features, Piece, Placement, TetrisActionSpace, TetrisSim, TetrisState, N_PIECES,
};
pub use two_state::two_state_factory;

use rand::Rng;

use crate::model::{SampledEnv, TabularMdp};

/// A tabular MDP exposed through the sampled-environment contract, with an
/// optional designated recurrent state and an optional episode horizon.
#[derive(Debug, Clone)]
pub struct TabularEnv<'a> {
    mdp: &'a TabularMdp,
    recurrent: Option<usize>,
    horizon: Option<usize>,
}

impl<'a> TabularEnv<'a> {
    pub fn new(mdp: &'a TabularMdp) -> Self {
        TabularEnv { mdp, recurrent: None, horizon: None }
    }

    /// Designates `state` as the recurrent state for regenerative
    /// estimation; the caller is responsible for it being reachable with
    /// probability one under the policies in play (ergodic chains).
    pub fn with_recurrent_state(mut self, state: usize) -> Self {
        self.recurrent = Some(state);
        self
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = Some(horizon);
        self
    }

    pub fn mdp(&self) -> &TabularMdp {
        self.mdp
    }
}

impl SampledEnv for TabularEnv<'_> {
    type State = usize;
    type Action = usize;

    fn reset<R: Rng>(&self, rng: &mut R) -> usize {
        self.mdp.sample_initial(rng)
    }

    fn step<R: Rng>(&self, state: &usize, action: &usize, rng: &mut R) -> (usize, f64) {
        let next = self.mdp.sample_next(*state, *action, rng);
        (next, self.mdp.reward(*state, *action))
    }

    fn has_recurrent_state(&self) -> bool {
        self.recurrent.is_some()
    }

    fn at_recurrent_state(&self, state: &usize) -> bool {
        self.recurrent == Some(*state)
    }

    fn horizon(&self) -> Option<usize> {
        self.horizon
    }
}
