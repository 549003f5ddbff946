//! Decentralized access policies: the trained actor, fixed baselines, and the
//! randomized exploration policy used while collecting learning data.

use rand::{Rng, RngCore};

use crate::env::{JointAction, SystemState};
use crate::nn::{policy_forward, PolicyParams};

/// A joint policy made of per-device decisions. Every implementation honors
/// the buffer mask: a device with an empty buffer never transmits.
pub trait AccessPolicy {
    /// Per-device transmit probabilities for slot `t`. Policies with a random
    /// per-slot parameter draw it from `rng`.
    fn transmit_probabilities(&self, state: &SystemState, t: usize, rng: &mut dyn RngCore) -> Vec<f64>;

    /// `pi(a | s)`, marginalized over any per-slot randomization.
    fn action_probability(&self, state: &SystemState, t: usize, action: &JointAction) -> f64;

    fn sample_action(&self, state: &SystemState, t: usize, rng: &mut dyn RngCore) -> (JointAction, Vec<f64>) {
        let probs = self.transmit_probabilities(state, t, rng);
        let action = probs
            .iter()
            .zip(state.devices())
            .map(|(&p, obs)| obs.q > 0 && rng.random::<f64>() < p)
            .collect();
        (JointAction(action), probs)
    }
}

fn independent_probability(probs: &[f64], action: &JointAction) -> f64 {
    probs
        .iter()
        .zip(&action.0)
        .map(|(&p, &a)| if a { p } else { 1.0 - p })
        .product()
}

impl AccessPolicy for PolicyParams {
    fn transmit_probabilities(&self, state: &SystemState, t: usize, _rng: &mut dyn RngCore) -> Vec<f64> {
        (0..state.len())
            .map(|k| policy_forward(self, &state[k], t % self.encoding.period, k)[1])
            .collect()
    }

    fn action_probability(&self, state: &SystemState, t: usize, action: &JointAction) -> f64 {
        let probs: Vec<f64> = (0..state.len())
            .map(|k| policy_forward(self, &state[k], t % self.encoding.period, k)[1])
            .collect();
        independent_probability(&probs, action)
    }
}

/// Every non-empty device transmits with a fixed probability `p`; `p = 0` is
/// the always-idle policy and `p = 1` transmits whenever the buffer holds a
/// packet.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersistentPolicy {
    pub p: f64,
}

impl PersistentPolicy {
    fn probabilities(&self, state: &SystemState) -> Vec<f64> {
        state
            .devices()
            .iter()
            .map(|o| if o.q > 0 { self.p } else { 0.0 })
            .collect()
    }
}

impl AccessPolicy for PersistentPolicy {
    fn transmit_probabilities(&self, state: &SystemState, _t: usize, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.probabilities(state)
    }

    fn action_probability(&self, state: &SystemState, _t: usize, action: &JointAction) -> f64 {
        independent_probability(&self.probabilities(state), action)
    }
}

/// Exploration policy: at every slot a transmit probability `q_t` is drawn
/// uniformly from `[0, 1]` and used by every non-empty device. With
/// `shared = false` each device draws its own probability instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExplorationPolicy {
    pub shared: bool,
}

impl Default for ExplorationPolicy {
    fn default() -> Self {
        Self { shared: true }
    }
}

impl ExplorationPolicy {
    /// The per-slot parameters: one shared `q_t`, or one per device.
    pub fn draw_parameters(&self, num_devices: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        if self.shared {
            vec![rng.random::<f64>(); num_devices]
        } else {
            (0..num_devices).map(|_| rng.random::<f64>()).collect()
        }
    }
}

impl AccessPolicy for ExplorationPolicy {
    fn transmit_probabilities(&self, state: &SystemState, _t: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        self.draw_parameters(state.len(), rng)
            .into_iter()
            .zip(state.devices())
            .map(|(q, o)| if o.q > 0 { q } else { 0.0 })
            .collect()
    }

    fn action_probability(&self, state: &SystemState, _t: usize, action: &JointAction) -> f64 {
        let mut eligible = 0u32;
        let mut sending = 0u32;
        for (obs, &a) in state.devices().iter().zip(&action.0) {
            if a && obs.q == 0 {
                return 0.0;
            }
            if obs.q > 0 {
                eligible += 1;
                sending += u32::from(a);
            }
        }
        if self.shared {
            // integral of q^n (1 - q)^(m - n) over [0, 1] = n! (m - n)! / (m + 1)!
            let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
            fact(sending) * fact(eligible - sending) / fact(eligible + 1)
        } else {
            0.5f64.powi(eligible as i32)
        }
    }
}
