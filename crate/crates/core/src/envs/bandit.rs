//! One-step bandits used as the hurdle environment.

use alloc::vec;
use alloc::vec::Vec;

use super::{Action, ActionSpace, EnvDescriptor, EnvError, Environment, StepOutcome};

/// A deterministic one-step bandit with a constant state. The discrete
/// variant has two arms paying 0 and 1; the continuous variant takes an
/// action in `[-1, 1]` and pays `(a + 1) / 2`.
#[derive(Debug, Clone)]
pub struct Bandit {
    desc: EnvDescriptor,
    done: bool,
}

impl Bandit {
    pub fn discrete_descriptor() -> EnvDescriptor {
        EnvDescriptor {
            id: "bandit",
            state_dim: 1,
            actions: ActionSpace::Discrete(2),
            horizon: 1,
            r_min: 0.0,
            r_max: 1.0,
        }
    }

    pub fn continuous_descriptor() -> EnvDescriptor {
        EnvDescriptor {
            id: "bandit-continuous",
            state_dim: 1,
            actions: ActionSpace::Continuous { low: vec![-1.0], high: vec![1.0] },
            horizon: 1,
            r_min: 0.0,
            r_max: 1.0,
        }
    }

    pub fn discrete() -> Self {
        Bandit { desc: Self::discrete_descriptor(), done: true }
    }

    pub fn continuous() -> Self {
        Bandit { desc: Self::continuous_descriptor(), done: true }
    }
}

impl Environment for Bandit {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.done = false;
        vec![1.0]
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError> {
        let reward = match (&self.desc.actions, action) {
            (ActionSpace::Discrete(_), Action::Discrete(0)) => 0.0,
            (ActionSpace::Discrete(_), Action::Discrete(1)) => 1.0,
            (ActionSpace::Continuous { .. }, Action::Continuous(a))
                if a.len() == 1 && a[0].is_finite() && a[0].abs() <= 1.0 =>
            {
                (a[0] + 1.0) / 2.0
            }
            _ => return Err(EnvError::InvalidAction),
        };
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        self.done = true;
        Ok(StepOutcome { state: vec![1.0], reward, terminated: true, truncated: false })
    }
}
