//! Replay storage and on-policy trajectory collection.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::Rng as _;

use super::{Action, EnvError, Environment};
use crate::rng::{self, Rng};

/// One environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    /// The next state is terminal.
    pub terminated: bool,
    /// The episode ended here, by termination or by the horizon.
    pub end: bool,
    pub s_next: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BatchMode {
    IidReplay,
    ConsecutiveTrajectory,
}

/// Column-major view of `B` transitions.
///
/// `d_t` is 1 on terminal transitions. `ends` additionally marks horizon
/// truncations and, in trajectory mode, the last row of the batch, so it is
/// the segmentation signal for discounted sums.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub state_dim: usize,
    pub action_width: usize,
    pub s_t: Vec<f64>,
    pub a_t: Vec<f64>,
    pub r_t: Vec<f64>,
    pub d_t: Vec<f64>,
    pub ends: Vec<f64>,
    pub s_tp1: Vec<f64>,
    pub mode: BatchMode,
}

impl TransitionBatch {
    pub fn new(state_dim: usize, action_width: usize, mode: BatchMode) -> Self {
        TransitionBatch {
            state_dim,
            action_width,
            s_t: Vec::new(),
            a_t: Vec::new(),
            r_t: Vec::new(),
            d_t: Vec::new(),
            ends: Vec::new(),
            s_tp1: Vec::new(),
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.r_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_t.is_empty()
    }

    pub fn push(&mut self, t: &Transition) -> Result<(), EnvError> {
        if t.s.len() != self.state_dim || t.s_next.len() != self.state_dim || t.a.len() != self.action_width {
            return Err(EnvError::LayoutMismatch);
        }
        self.s_t.extend_from_slice(&t.s);
        self.a_t.extend_from_slice(&t.a);
        self.r_t.push(t.r);
        self.d_t.push(if t.terminated { 1.0 } else { 0.0 });
        self.ends.push(if t.end || t.terminated { 1.0 } else { 0.0 });
        self.s_tp1.extend_from_slice(&t.s_next);
        Ok(())
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.s_t[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.s_tp1[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.a_t[i * self.action_width..(i + 1) * self.action_width]
    }

    /// Checks the trajectory chaining invariant `s_tp1[i] == s_t[i + 1]`
    /// for every row that does not end an episode.
    pub fn is_chained(&self) -> bool {
        (0..self.len().saturating_sub(1)).all(|i| self.ends[i] != 0.0 || self.next_state(i) == self.state(i + 1))
    }
}

/// Fixed-capacity ring buffer with uniform sampling with replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 100_000;

    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), data: Vec::new(), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    pub fn sample(&self, b: usize, rng: &mut Rng) -> Result<TransitionBatch, EnvError> {
        if b == 0 || self.data.len() < b {
            return Err(EnvError::BufferTooSmall { have: self.data.len(), want: b });
        }
        let first = &self.data[0];
        let mut batch = TransitionBatch::new(first.s.len(), first.a.len(), super::BatchMode::IidReplay);
        for _ in 0..b {
            let i = rng.random_range(0..self.data.len());
            batch.push(&self.data[i])?;
        }
        Ok(batch)
    }
}

/// An environment driven across episodes, remembering where the current
/// episode stands between calls.
pub struct Rollout {
    env: Box<dyn Environment>,
    seed: u64,
    episodes: u64,
    state: Vec<f64>,
    ep_return: f64,
    ep_len: usize,
}

/// A finished episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Episode {
    pub ret: f64,
    pub steps: usize,
}

impl Rollout {
    pub fn new(mut env: Box<dyn Environment>, seed: u64) -> Self {
        let state = env.reset(rng::derive_seed(&[seed, 0]));
        Rollout { env, seed, episodes: 0, state, ep_return: 0.0, ep_len: 0 }
    }

    pub fn env(&self) -> &dyn Environment {
        &*self.env
    }

    /// Return and length of the episode in progress.
    pub fn partial(&self) -> Episode {
        Episode { ret: self.ep_return, steps: self.ep_len }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    /// Takes one step with `action`, starting a new episode if this one
    /// ends.
    pub fn step(&mut self, action: &Action) -> Result<(Transition, Option<Episode>), EnvError> {
        let out = self.env.step(action)?;
        self.ep_return += out.reward;
        self.ep_len += 1;
        let end = out.done();
        let t = Transition {
            s: core::mem::take(&mut self.state),
            a: action.to_row(),
            r: out.reward,
            terminated: out.terminated,
            end,
            s_next: out.state,
        };
        let finished = if end {
            let ep = Episode { ret: self.ep_return, steps: self.ep_len };
            self.episodes += 1;
            self.state = self.env.reset(rng::derive_seed(&[self.seed, self.episodes]));
            self.ep_return = 0.0;
            self.ep_len = 0;
            Some(ep)
        } else {
            self.state = t.s_next.clone();
            None
        };
        Ok((t, finished))
    }

    /// Collects `steps` consecutive transitions. The last row is marked as
    /// a segment end; the episode itself continues on the next call.
    pub fn collect(
        &mut self,
        steps: usize,
        policy: &mut dyn FnMut(&[f64]) -> Action,
    ) -> Result<(TransitionBatch, Vec<Episode>), EnvError> {
        let d = self.env.descriptor();
        let mut batch = TransitionBatch::new(d.state_dim, d.actions.width(), super::BatchMode::ConsecutiveTrajectory);
        let mut episodes = Vec::new();
        for _ in 0..steps {
            let action = policy(&self.state);
            let (t, ep) = self.step(&action)?;
            batch.push(&t)?;
            episodes.extend(ep);
        }
        if let Some(last) = batch.ends.last_mut() {
            *last = 1.0;
        }
        Ok((batch, episodes))
    }
}

/// Runs `policy` from a fresh episode for `horizon` steps.
pub fn collect_trajectory(
    env: Box<dyn Environment>,
    policy: &mut dyn FnMut(&[f64]) -> Action,
    horizon: usize,
    seed: u64,
) -> Result<TransitionBatch, EnvError> {
    Rollout::new(env, seed).collect(horizon, policy).map(|(b, _)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::make_env;
    use alloc::vec;

    fn tr(x: f64) -> Transition {
        Transition { s: vec![x], a: vec![0.0], r: x, terminated: false, end: false, s_next: vec![x + 1.0] }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut b = ReplayBuffer::new(4);
        for i in 0..5 {
            b.push(tr(i as f64));
        }
        assert_eq!(b.len(), 4);
        let rs: Vec<f64> = b.iter().map(|t| t.r).collect();
        assert!(!rs.contains(&0.0));
        assert!(rs.contains(&4.0));
    }

    #[test]
    fn sample_shapes_and_errors() {
        let mut b = ReplayBuffer::new(10);
        let mut r = rng::rng_from(&[1]);
        assert!(matches!(b.sample(1, &mut r), Err(EnvError::BufferTooSmall { .. })));
        for i in 0..3 {
            b.push(tr(i as f64));
        }
        let batch = b.sample(8, &mut r).unwrap_err();
        assert_eq!(batch, EnvError::BufferTooSmall { have: 3, want: 8 });
        let batch = b.sample(3, &mut r).unwrap();
        assert_eq!(batch.len(), 3);
        assert_eq!(batch.s_t.len(), 3);
        assert_eq!(batch.s_tp1.len(), 3);
        assert_eq!(batch.a_t.len(), 3);
        assert_eq!(batch.d_t.len(), 3);
        assert_eq!(batch.mode, BatchMode::IidReplay);
        // every sampled row is a stored transition
        for i in 0..3 {
            assert!(b.iter().any(|t| t.r == batch.r_t[i] && t.s == batch.state(i)));
        }
    }

    #[test]
    fn trajectories_chain() {
        let env = make_env("cartpole").unwrap();
        let mut flip = 0;
        let mut policy = |_: &[f64]| {
            flip ^= 1;
            Action::Discrete(flip)
        };
        let traj = collect_trajectory(env, &mut policy, 300, 7).unwrap();
        assert_eq!(traj.len(), 300);
        assert_eq!(traj.mode, BatchMode::ConsecutiveTrajectory);
        assert!(traj.is_chained());
        assert_eq!(*traj.ends.last().unwrap(), 1.0);
    }

    #[test]
    fn rollouts_replay_bitwise() {
        let run = || {
            let mut ro = Rollout::new(make_env("pendulum").unwrap(), 11);
            let mut policy = |s: &[f64]| Action::Continuous(vec![(s[2] * 0.3).clamp(-2.0, 2.0)]);
            ro.collect(450, &mut policy).unwrap()
        };
        assert_eq!(run(), run());
    }
}
