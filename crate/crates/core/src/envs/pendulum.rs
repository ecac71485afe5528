//! Torque-limited pendulum swing-up.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;

use super::{Action, ActionSpace, EnvDescriptor, EnvError, Environment, StepOutcome};
use crate::math;
use crate::rng;

const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;
const DT: f64 = 0.05;
const G: f64 = 10.0;
const MASS: f64 = 1.0;
const LENGTH: f64 = 1.0;
pub const HORIZON: usize = 200;

/// Largest possible per-step cost: angle `pi`, full speed, full torque.
pub const MAX_STEP_COST: f64 = PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE;

#[derive(Debug, Clone)]
pub struct Pendulum {
    desc: EnvDescriptor,
    theta: f64,
    theta_dot: f64,
    steps: usize,
    done: bool,
}

/// Per-step reward for wrapped angle `theta`, velocity and torque.
pub fn reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
    let th = math::wrap_angle(theta);
    -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
}

impl Pendulum {
    pub fn descriptor() -> EnvDescriptor {
        EnvDescriptor {
            id: "pendulum",
            state_dim: 3,
            actions: ActionSpace::Continuous { low: vec![-MAX_TORQUE], high: vec![MAX_TORQUE] },
            horizon: HORIZON,
            r_min: -MAX_STEP_COST * HORIZON as f64,
            r_max: 0.0,
        }
    }

    pub fn new() -> Self {
        Pendulum { desc: Self::descriptor(), theta: 0.0, theta_dot: 0.0, steps: 0, done: true }
    }

    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.steps = 0;
        self.done = false;
    }

    fn observe(&self) -> Vec<f64> {
        vec![math::cos(self.theta), math::sin(self.theta), self.theta_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Pendulum {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng::rng_from(&[seed, 0x9E4D]);
        self.theta = r.random_range(-PI..PI);
        self.theta_dot = r.random_range(-1.0..1.0);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        let u = match action {
            Action::Continuous(a) if a.len() == 1 && a[0].is_finite() && a[0].abs() <= MAX_TORQUE => a[0],
            _ => return Err(EnvError::InvalidAction),
        };
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let r = reward(self.theta, self.theta_dot, u);
        let acc = 3.0 * G / (2.0 * LENGTH) * math::sin(self.theta) + 3.0 / (MASS * LENGTH * LENGTH) * u;
        self.theta_dot = (self.theta_dot + acc * DT).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * DT;
        self.steps += 1;
        let truncated = self.steps >= HORIZON;
        self.done = truncated;
        Ok(StepOutcome { state: self.observe(), reward: r, terminated: false, truncated })
    }
}
