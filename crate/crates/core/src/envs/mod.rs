//! Desk-scale environments, transition storage and the normalized score.

mod bandit;
mod buffer;
mod cartpole;
mod pendulum;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub use bandit::Bandit;
pub use buffer::{collect_trajectory, BatchMode, Episode, ReplayBuffer, Rollout, Transition, TransitionBatch};
pub use cartpole::CartPole;
pub use pendulum::{Pendulum, MAX_STEP_COST as PENDULUM_MAX_STEP_COST};

use crate::graph::ActionKind;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error("action does not conform to the action space")]
    InvalidAction,
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error("unknown environment `{0}`")]
    UnknownEnv(String),
    #[error("no episode returns to score")]
    EmptyReturns,
    #[error("invalid return bounds")]
    InvalidBounds,
    #[error("buffer holds {have} transitions, {want} requested")]
    BufferTooSmall { have: usize, want: usize },
    #[error("transition does not match the buffer layout")]
    LayoutMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn kind(&self) -> ActionKind {
        match self {
            ActionSpace::Discrete(_) => ActionKind::Discrete,
            ActionSpace::Continuous { .. } => ActionKind::Continuous,
        }
    }

    /// Floats per stored action: 1 for a discrete index, the dimension
    /// otherwise.
    pub fn width(&self) -> usize {
        match self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous { low, .. } => low.len(),
        }
    }

    pub fn to_action(&self, row: &[f64]) -> Action {
        match self {
            ActionSpace::Discrete(_) => Action::Discrete(row[0] as usize),
            ActionSpace::Continuous { .. } => Action::Continuous(row.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// The action as a stored row.
    pub fn to_row(&self) -> Vec<f64> {
        match self {
            Action::Discrete(i) => alloc::vec![*i as f64],
            Action::Continuous(a) => a.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvDescriptor {
    pub id: &'static str,
    pub state_dim: usize,
    pub actions: ActionSpace,
    pub horizon: usize,
    pub r_min: f64,
    pub r_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    /// The episode reached a terminal state.
    pub terminated: bool,
    /// The episode hit the horizon.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send {
    fn descriptor(&self) -> &EnvDescriptor;
    /// Starts a new episode; the initial state depends only on `seed`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome, EnvError>;
}

/// Identifiers accepted by [`make_env`].
pub const ENV_IDS: [&str; 4] = ["cartpole", "pendulum", "bandit", "bandit-continuous"];

pub fn make_env(id: &str) -> Result<Box<dyn Environment>, EnvError> {
    Ok(match id {
        "cartpole" => Box::new(CartPole::new()),
        "pendulum" => Box::new(Pendulum::new()),
        "bandit" => Box::new(Bandit::discrete()),
        "bandit-continuous" => Box::new(Bandit::continuous()),
        other => return Err(EnvError::UnknownEnv(other.into())),
    })
}

pub fn descriptor(id: &str) -> Result<EnvDescriptor, EnvError> {
    make_env(id).map(|e| e.descriptor().clone())
}

/// The hurdle bandit matching an action kind.
pub fn hurdle_env(kind: ActionKind) -> EnvDescriptor {
    match kind {
        ActionKind::Discrete => Bandit::discrete_descriptor(),
        ActionKind::Continuous => Bandit::continuous_descriptor(),
    }
}

/// Mean per-episode normalized return, each term clamped to `[0, 1]`.
pub fn eval_score(returns: &[f64], r_min: f64, r_max: f64) -> Result<f64, EnvError> {
    if returns.is_empty() {
        return Err(EnvError::EmptyReturns);
    }
    if !r_min.is_finite() || !r_max.is_finite() || r_min >= r_max {
        return Err(EnvError::InvalidBounds);
    }
    let span = r_max - r_min;
    let total: f64 = returns
        .iter()
        .map(|&r| if r.is_nan() { 0.0 } else { ((r - r_min) / span).clamp(0.0, 1.0) })
        .sum();
    Ok(total / returns.len() as f64)
}
