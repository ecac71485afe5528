//! Cart-pole balancing with the classic Euler-integrated dynamics.

use alloc::vec::Vec;

use rand::Rng as _;

use super::{Action, ActionSpace, EnvDescriptor, EnvError, Environment, StepOutcome};
use crate::math;
use crate::rng;

const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
const HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
const FORCE_MAG: f64 = 10.0;
const TAU: f64 = 0.02;
const X_LIMIT: f64 = 2.4;
const THETA_LIMIT: f64 = 12.0 * 2.0 * core::f64::consts::PI / 360.0;
pub const HORIZON: usize = 500;

#[derive(Debug, Clone)]
pub struct CartPole {
    desc: EnvDescriptor,
    state: [f64; 4],
    steps: usize,
    done: bool,
}

impl CartPole {
    pub fn descriptor() -> EnvDescriptor {
        EnvDescriptor {
            id: "cartpole",
            state_dim: 4,
            actions: ActionSpace::Discrete(2),
            horizon: HORIZON,
            r_min: 0.0,
            r_max: HORIZON as f64,
        }
    }

    pub fn new() -> Self {
        CartPole { desc: Self::descriptor(), state: [0.0; 4], steps: 0, done: true }
    }

    /// Sets the raw physical state `[x, x_dot, theta, theta_dot]`.
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for CartPole {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng::rng_from(&[seed, 0xCA27]);
        for x in &mut self.state {
            *x = r.random_range(-0.05..0.05);
        }
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        let push = match action {
            Action::Discrete(0) => -FORCE_MAG,
            Action::Discrete(1) => FORCE_MAG,
            _ => return Err(EnvError::InvalidAction),
        };
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let [x, x_dot, theta, theta_dot] = self.state;
        let (sin, cos) = (math::sin(theta), math::cos(theta));
        let temp = (push + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        self.state = [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ];
        self.steps += 1;
        let terminated = self.state[0].abs() > X_LIMIT || self.state[2].abs() > THETA_LIMIT;
        let truncated = !terminated && self.steps >= HORIZON;
        self.done = terminated || truncated;
        Ok(StepOutcome { state: self.state.to_vec(), reward: 1.0, terminated, truncated })
    }
}
