//! The two-state, two-parameter trace environment.
//!
//! States `{0, 1}`, actions `{stay, switch}`: the chosen move succeeds with
//! probability 0.9. Only state 1 is rewarded. The Gibbs policy has one
//! parameter per state, attached to the `switch` action, so the policy
//! trace lives in the plane and reparametrization effects are visible
//! directly.

use nalgebra::DVector;

use crate::model::TabularMdp;
use crate::policy::{GibbsPolicy, TabularFeatures};

const SUCCESS: f64 = 0.9;
const GAMMA: f64 = 0.95;

/// Builds the canonical instance. Deterministic: no randomness is involved.
pub fn two_state_factory() -> (TabularMdp, GibbsPolicy<TabularFeatures>) {
    let flip = |s: usize| 1 - s;
    let mut trans = vec![vec![vec![0.0; 2]; 2]; 2];
    for s in 0..2usize {
        // action 0: stay, action 1: switch
        trans[s][0][s] = SUCCESS;
        trans[s][0][flip(s)] = 1.0 - SUCCESS;
        trans[s][1][flip(s)] = SUCCESS;
        trans[s][1][s] = 1.0 - SUCCESS;
    }
    let reward = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let mdp = TabularMdp::new(vec![0.5, 0.5], trans, reward, GAMMA)
        .expect("two-state instance must validate");

    // phi(a, s) = e_s * [a = switch]: two parameters, one logistic per state.
    let feats = TabularFeatures::from_fn(2, 2, 2, |s, a| {
        let mut v = DVector::zeros(2);
        if a == 1 {
            v[s] = 1.0;
        }
        v
    });
    (mdp, GibbsPolicy::new(feats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enumeration::{enumerate_return, truncation_bound};
    use crate::exact::occupancy_and_value;
    use crate::policy::DiscretePolicy;

    #[test]
    fn factory_is_deterministic_and_valid() {
        let (a, _) = two_state_factory();
        let (b, _) = two_state_factory();
        a.validate().unwrap();
        for s in 0..2 {
            for act in 0..2 {
                for n in 0..2 {
                    assert_eq!(a.trans(s, act, n), b.trans(s, act, n));
                }
                assert_eq!(a.reward(s, act), b.reward(s, act));
            }
        }
    }

    #[test]
    fn policy_has_two_parameters_and_interior_probabilities() {
        let (_, policy) = two_state_factory();
        assert_eq!(crate::policy::PolicyModel::n_params(&policy), 2);
        let w = DVector::from_vec(vec![0.7, -1.2]);
        for s in 0..2usize {
            let probs = policy.action_probs(&s, &w).unwrap();
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn exact_value_matches_enumeration_at_origin() {
        // The acceptance-scale identity uses a low-discount rebuild of the
        // same kernel so that path enumeration reaches oracle accuracy.
        let (mdp, policy) = two_state_factory();
        let small_gamma = {
            let trans = (0..2)
                .map(|s| {
                    (0..2)
                        .map(|a| (0..2).map(|n| mdp.trans(s, a, n)).collect())
                        .collect()
                })
                .collect();
            let reward = (0..2).map(|s| (0..2).map(|a| mdp.reward(s, a)).collect()).collect();
            TabularMdp::new(vec![0.5, 0.5], trans, reward, 0.04).unwrap()
        };
        let w = DVector::zeros(2);
        let cut = 7;
        assert!(truncation_bound(&small_gamma, cut) < 1e-8);
        let occ = occupancy_and_value(&small_gamma, &policy, &w).unwrap();
        let byenum = enumerate_return(&small_gamma, &policy, &w, cut, 10_000_000).unwrap();
        assert!((occ.u - byenum).abs() < 1e-8);
    }
}
