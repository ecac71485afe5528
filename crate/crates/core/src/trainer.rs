//! Training loop shared by every loss graph, GAE, and the per-environment
//! evaluation score.
//!
//! An [`AlgorithmSpec`] says which graphs to descend, on what data and at
//! what cadence. The trainer owns the parameter store, the behaviour policy,
//! and target and snapshot bookkeeping; the graphs only see bound batches.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{self, AutodiffError, Bindings, NoiseContext};
use crate::envs::{self, Action, ActionSpace, EnvError, Rollout, ReplayBuffer, TransitionBatch};
use crate::graph::Signature;
use crate::hyper::HyperParams;
use crate::math;
use crate::nn::{self, NnError, ParameterStore};
use crate::reference::{AlgorithmSpec, Behavior, DataMode, TargetRule};
use crate::rng::{self, Rng};
use crate::value::Value;
use crate::DType;

/// Global gradient-norm clip applied before every SGD step.
pub const GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("GAE needs a consecutive trajectory batch, got i.i.d. replay")]
    ModeMismatch,
    #[error("{what} has {have} entries, batch has {want}")]
    LengthMismatch { what: &'static str, have: usize, want: usize },
    #[error("`{algorithm}` needs {want} actions, `{env}` has {have}")]
    IncompatibleActionSpace { algorithm: String, env: String, want: &'static str, have: &'static str },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("loss `{graph}`: {source}")]
    Loss { graph: String, source: AutodiffError },
}

/// GAE output for one trajectory batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub adv: Vec<f64>,
    /// Discounted reward-to-go, bootstrapped with `V(s_{t+1})` where a
    /// segment ends without termination.
    pub rtg: Vec<f64>,
}

/// Generalized advantage estimation over a consecutive batch.
///
/// `values[t] = V(s_t)` and `next_values[t] = V(s_{t+1})`. Sums restart at
/// every row with `ends = 1`; `d_t = 1` zeroes the bootstrap.
pub fn compute_gae(
    batch: &TransitionBatch,
    values: &[f64],
    next_values: &[f64],
    hp: &HyperParams,
) -> Result<AdvantageEstimate, TrainError> {
    if batch.mode != envs::BatchMode::ConsecutiveTrajectory || !batch.is_chained() {
        return Err(TrainError::ModeMismatch);
    }
    let n = batch.len();
    for (what, have) in [("values", values.len()), ("next_values", next_values.len())] {
        if have != n {
            return Err(TrainError::LengthMismatch { what, have, want: n });
        }
    }
    let (g, gl) = (hp.gamma, hp.gamma * hp.lambda);
    let mut adv = vec![0.0; n];
    let mut rtg = vec![0.0; n];
    let (mut a_acc, mut r_acc) = (0.0, 0.0);
    for t in (0..n).rev() {
        let live = 1.0 - batch.d_t[t];
        let boot = live * next_values[t];
        if batch.ends[t] != 0.0 {
            a_acc = 0.0;
            r_acc = boot;
        }
        let delta = batch.r_t[t] + g * boot - values[t];
        a_acc = delta + gl * a_acc;
        r_acc = batch.r_t[t] + g * r_acc;
        adv[t] = a_acc;
        rtg[t] = r_acc;
    }
    Ok(AdvantageEstimate { adv, rtg })
}

/// Scales `xs` to zero mean and unit variance in place. Left alone when the
/// spread is degenerate.
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = math::sqrt(var);
    if std > 1e-8 {
        for x in xs {
            *x = (*x - mean) / std;
        }
    }
}

/// Step counts and cadences for one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainBudget {
    pub total_steps: usize,
    /// Replay minibatch size.
    pub batch_size: usize,
    /// Replay steps before the first update. Non-greedy behaviours act
    /// uniformly at random until then.
    pub warmup: usize,
    /// Replay mode: env steps between update ticks.
    pub update_every: usize,
    /// Trajectory mode: env steps per collected batch.
    pub rollout_steps: usize,
    /// Episodes averaged by the evaluation score.
    pub eval_episodes: usize,
    pub replay_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of `total_steps` over which epsilon decays linearly.
    pub epsilon_fraction: f64,
}

impl Default for TrainBudget {
    fn default() -> Self {
        TrainBudget {
            total_steps: 50_000,
            batch_size: 64,
            warmup: 1000,
            update_every: 1,
            rollout_steps: 2048,
            eval_episodes: 20,
            replay_capacity: ReplayBuffer::DEFAULT_CAPACITY,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_fraction: 0.1,
        }
    }
}

impl TrainBudget {
    pub fn with_steps(total_steps: usize) -> Self {
        TrainBudget { total_steps, ..Self::default() }
    }

    /// Short budget for the hurdle environment.
    pub fn hurdle() -> Self {
        TrainBudget {
            total_steps: 500,
            batch_size: 32,
            warmup: 32,
            rollout_steps: 100,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidBudget(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.batch_size == 0 || self.update_every == 0 || self.rollout_steps == 0 {
            return bad("batch_size, update_every and rollout_steps must be positive");
        }
        if self.replay_capacity < self.batch_size {
            return bad("replay_capacity is smaller than batch_size");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn epsilon(&self, step: usize) -> f64 {
        let span = self.epsilon_fraction * self.total_steps as f64;
        if span <= 0.0 {
            return self.epsilon_end;
        }
        let f = step as f64 / span;
        if f >= 1.0 {
            return self.epsilon_end;
        }
        self.epsilon_start + f * (self.epsilon_end - self.epsilon_start)
    }
}

/// Progress events emitted while training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric<'a> {
    Episode { step: usize, episode: usize, ret: f64, length: usize },
    Loss { step: usize, loss: &'a str, value: f64, grad_norm: f64 },
}

/// Outcome of [`train_agent`]. A run that hits a non-finite loss or an
/// autodiff failure stops early and keeps what it has.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Returns of completed episodes, in order.
    pub returns: Vec<f64>,
    /// The episode in progress when training stopped.
    pub unfinished: Option<f64>,
    pub steps: usize,
    pub failure: Option<TrainError>,
    pub store: ParameterStore,
}

impl TrainReport {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Returns of the last `m` episodes. The unfinished episode stands in
    /// when nothing completed.
    pub fn last_returns(&self, m: usize) -> Vec<f64> {
        if self.returns.is_empty() {
            return self.unfinished.into_iter().collect();
        }
        let k = self.returns.len().saturating_sub(m);
        self.returns[k..].to_vec()
    }
}

/// Seeds initial networks for every store in `spec`. Targets and
/// snapshots start as copies of their online store.
pub fn init_store(spec: &AlgorithmSpec, state_dim: usize, actions: &ActionSpace, seed: u64) -> Result<ParameterStore, TrainError> {
    let linked: Vec<&(String, String)> = spec.target_pairs.iter().chain(&spec.snapshots).collect();
    let mut store = ParameterStore::new();
    for (key, sig) in spec.store_signatures() {
        if linked.iter().any(|(_, t)| *t == key) {
            continue;
        }
        store.insert(key.clone(), nn::mlp_init(rng::derive_seed(&[seed, rng::hash_str(&key)]), sig, state_dim, actions)?);
    }
    for (online, target) in linked {
        if store.contains(online) {
            store.link_target(target, online)?;
        }
    }
    Ok(store)
}

/// Actions as the networks see them: SAC works on `[-1, 1]` and maps to the
/// environment bounds only when acting.
fn network_actions(spec: &AlgorithmSpec, env: &ActionSpace) -> ActionSpace {
    match (spec.behavior, env) {
        (Behavior::Squashed, ActionSpace::Continuous { low, .. }) => {
            ActionSpace::Continuous { low: vec![-1.0; low.len()], high: vec![1.0; low.len()] }
        }
        _ => env.clone(),
    }
}

fn argmax_random_ties(q: &[f64], r: &mut Rng) -> usize {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..q.len()).filter(|&i| q[i] == best).collect();
    if ties.is_empty() {
        return r.random_range(0..q.len());
    }
    ties[r.random_range(0..ties.len())]
}

fn uniform_action(space: &ActionSpace, r: &mut Rng) -> Action {
    match space {
        ActionSpace::Discrete(n) => Action::Discrete(r.random_range(0..*n)),
        ActionSpace::Continuous { low, high } => {
            Action::Continuous(low.iter().zip(high).map(|(l, h)| l + r.random::<f64>() * (h - l)).collect())
        }
    }
}

fn normal(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn clip_to(space: &ActionSpace, a: Vec<f64>) -> Action {
    match space {
        ActionSpace::Continuous { low, high } => Action::Continuous(
            a.iter()
                .zip(low.iter().zip(high))
                .map(|(x, (l, h))| if x.is_finite() { x.clamp(*l, *h) } else { 0.5 * (l + h) })
                .collect(),
        ),
        ActionSpace::Discrete(_) => unreachable!("continuous head on a discrete space"),
    }
}

/// Picks the behaviour action. For squashed policies the second element is
/// the normalized action to store in the replay buffer.
fn act(
    spec: &AlgorithmSpec,
    store: &ParameterStore,
    space: &ActionSpace,
    state: &[f64],
    epsilon: f64,
    r: &mut Rng,
) -> Result<(Action, Option<Vec<f64>>), TrainError> {
    let net = store.get(&spec.actor).ok_or_else(|| NnError::MissingStore(spec.actor.clone()))?;
    let out = net.predict(state, None)?;
    let action = match (spec.behavior, space) {
        (Behavior::EpsilonGreedy, ActionSpace::Discrete(n)) => {
            if r.random::<f64>() < epsilon {
                Action::Discrete(r.random_range(0..*n))
            } else {
                Action::Discrete(argmax_random_ties(&out, r))
            }
        }
        (Behavior::Stochastic, ActionSpace::Discrete(n)) => {
            let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = out.iter().map(|x| math::exp(x - m)).collect();
            let total: f64 = w.iter().sum();
            if !total.is_finite() || total <= 0.0 {
                Action::Discrete(r.random_range(0..*n))
            } else {
                let mut u = r.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, wi) in w.iter().enumerate() {
                    if u < *wi {
                        pick = i;
                        break;
                    }
                    u -= wi;
                }
                Action::Discrete(pick)
            }
        }
        (Behavior::Stochastic, ActionSpace::Continuous { .. }) => {
            let d = space.width();
            let a = (0..d).map(|j| out[j] + math::exp(out[d + j]) * normal(r)).collect();
            clip_to(space, a)
        }
        (Behavior::Deterministic { noise }, ActionSpace::Continuous { low, high }) => {
            let a = out.iter().enumerate().map(|(j, x)| x + noise * (high[j] - low[j]) * normal(r)).collect();
            clip_to(space, a)
        }
        (Behavior::Squashed, ActionSpace::Continuous { low, high }) => {
            let d = space.width();
            let unit: Vec<f64> = (0..d)
                .map(|j| {
                    let u = out[j] + math::exp(out[d + j]) * normal(r);
                    if u.is_finite() { math::tanh(u) } else { 0.0 }
                })
                .collect();
            let a = unit.iter().enumerate().map(|(j, x)| low[j] + (x + 1.0) * 0.5 * (high[j] - low[j])).collect();
            return Ok((clip_to(space, a), Some(unit)));
        }
        _ => {
            return Err(TrainError::IncompatibleActionSpace {
                algorithm: spec.name.clone(),
                env: String::new(),
                want: spec.actions.as_str(),
                have: space.kind().as_str(),
            })
        }
    };
    Ok((action, None))
}

/// Maps an environment action back to `[-1, 1]`.
fn normalize_action(space: &ActionSpace, a: &[f64]) -> Vec<f64> {
    match space {
        ActionSpace::Continuous { low, high } => {
            a.iter().enumerate().map(|(j, x)| 2.0 * (x - low[j]) / (high[j] - low[j]) - 1.0).collect()
        }
        ActionSpace::Discrete(_) => a.to_vec(),
    }
}

struct Run<'o> {
    spec: &'o AlgorithmSpec,
    hp: HyperParams,
    net_actions: ActionSpace,
    store: ParameterStore,
    noise_seed: u64,
    ticks: u64,
    observer: &'o mut dyn FnMut(Metric<'_>),
}

impl Run<'_> {
    /// One gradient step on loss `i`.
    fn descend(&mut self, i: usize, bindings: &Bindings, step: usize) -> Result<(), TrainError> {
        let spec = self.spec;
        let graph = &spec.losses[i].graph;
        let noise = NoiseContext::new(self.noise_seed, i as u64, self.ticks);
        let (loss, mut grads) =
            autodiff::loss_and_grads(graph, &self.store, bindings, &self.hp, &self.net_actions, Some(&noise))
                .map_err(|source| TrainError::Loss { graph: graph.name.clone(), source })?;
        let norm = nn::clip_global_norm(&mut grads, GRAD_CLIP);
        if !norm.is_finite() {
            return Err(TrainError::Loss {
                graph: graph.name.clone(),
                source: AutodiffError::NonFiniteLoss(norm),
            });
        }
        nn::sgd_step(&mut self.store, &grads, self.hp.lr)?;
        (self.observer)(Metric::Loss { step, loss: &graph.name, value: loss, grad_norm: norm });
        Ok(())
    }
}

/// Trains `spec` on `env_id` for `budget.total_steps` environment steps.
///
/// Only precondition failures (unknown env, mismatched action space, bad
/// budget) are errors; training failures end up in [`TrainReport::failure`].
pub fn train_agent(
    spec: &AlgorithmSpec,
    env_id: &str,
    budget: &TrainBudget,
    hp: &HyperParams,
    seed: u64,
    observer: &mut dyn FnMut(Metric<'_>),
) -> Result<TrainReport, TrainError> {
    budget.check()?;
    let env = envs::make_env(env_id)?;
    let desc = env.descriptor().clone();
    if desc.actions.kind() != spec.actions {
        return Err(TrainError::IncompatibleActionSpace {
            algorithm: spec.name.clone(),
            env: env_id.to_string(),
            want: spec.actions.as_str(),
            have: desc.actions.kind().as_str(),
        });
    }
    let env_stream = rng::hash_str(env_id);
    let net_actions = network_actions(spec, &desc.actions);
    let store = init_store(spec, desc.state_dim, &net_actions, rng::derive_seed(&[seed, env_stream, 1]))?;
    let mut rollout = Rollout::new(env, rng::derive_seed(&[seed, env_stream, 2]));
    let mut r = rng::rng_from(&[seed, env_stream, 3]);
    let mut run = Run {
        spec,
        hp: *hp,
        net_actions,
        store,
        noise_seed: rng::derive_seed(&[seed, env_stream, 4]),
        ticks: 0,
        observer,
    };
    let mut returns = Vec::new();
    let (steps, failure) = match spec.data_mode {
        DataMode::Replay => replay_loop(&mut run, &mut rollout, &desc.actions, budget, &mut r, &mut returns),
        DataMode::Trajectory => trajectory_loop(&mut run, &mut rollout, &desc.actions, budget, &mut r, &mut returns),
    };
    let partial = rollout.partial();
    Ok(TrainReport {
        returns,
        unfinished: (partial.steps > 0).then_some(partial.ret),
        steps,
        failure,
        store: run.store,
    })
}

fn record_episode(run: &mut Run<'_>, returns: &mut Vec<f64>, step: usize, ep: envs::Episode) {
    returns.push(ep.ret);
    (run.observer)(Metric::Episode { step, episode: returns.len(), ret: ep.ret, length: ep.steps });
}

fn replay_loop(
    run: &mut Run<'_>,
    rollout: &mut Rollout,
    space: &ActionSpace,
    budget: &TrainBudget,
    r: &mut Rng,
    returns: &mut Vec<f64>,
) -> (usize, Option<TrainError>) {
    let spec = run.spec;
    let mut buffer = ReplayBuffer::new(budget.replay_capacity);
    let greedy = spec.behavior == Behavior::EpsilonGreedy;
    for t in 0..budget.total_steps {
        let warm = t < budget.warmup;
        let (action, unit) = if warm && !greedy {
            let a = uniform_action(space, r);
            let unit = (spec.behavior == Behavior::Squashed).then(|| normalize_action(space, &a.to_row()));
            (a, unit)
        } else {
            match act(spec, &run.store, space, rollout.state(), budget.epsilon(t), r) {
                Ok(x) => x,
                Err(e) => return (t, Some(e)),
            }
        };
        let (mut tr, ep) = match rollout.step(&action) {
            Ok(x) => x,
            Err(e) => return (t, Some(e.into())),
        };
        if let Some(unit) = unit {
            tr.a = unit;
        }
        buffer.push(tr);
        if let Some(ep) = ep {
            record_episode(run, returns, t + 1, ep);
        }
        if warm || (t + 1) % budget.update_every != 0 || buffer.len() < budget.batch_size {
            continue;
        }
        run.ticks += 1;
        let batch = match buffer.sample(budget.batch_size, r) {
            Ok(b) => b,
            Err(e) => return (t + 1, Some(e.into())),
        };
        let mut bindings = Bindings::from_batch(&batch, &run.hp);
        let gamma: Vec<f64> = batch.d_t.iter().map(|d| run.hp.gamma * (1.0 - d)).collect();
        bindings.set("gamma", Value::scalars(gamma));
        for i in 0..spec.losses.len() {
            if run.ticks % spec.losses[i].every.max(1) as u64 != 0 {
                continue;
            }
            if let Err(e) = run.descend(i, &bindings, t + 1) {
                return (t + 1, Some(e));
            }
        }
        let result = match spec.target_rule {
            TargetRule::None => Ok(()),
            TargetRule::HardCopy { every } => {
                if (t + 1) % every.max(1) == 0 {
                    spec.target_pairs.iter().try_for_each(|(o, g)| nn::hard_copy(&mut run.store, o, g))
                } else {
                    Ok(())
                }
            }
            TargetRule::Polyak { every } => {
                if run.ticks % every.max(1) as u64 == 0 {
                    let tau = run.hp.tau;
                    spec.target_pairs.iter().try_for_each(|(o, g)| nn::polyak_update(&mut run.store, o, g, tau))
                } else {
                    Ok(())
                }
            }
        };
        if let Err(e) = result {
            return (t + 1, Some(e.into()));
        }
    }
    (budget.total_steps, None)
}

/// `V(s)` for every row of `states` from the first `S -> R` store, or zeros
/// when the spec has none.
fn state_values(store: &ParameterStore, spec: &AlgorithmSpec, states: &[f64], dim: usize) -> Result<Vec<f64>, TrainError> {
    let rows = states.len() / dim.max(1);
    let critic = spec
        .store_signatures()
        .into_iter()
        .find(|(_, s)| *s == Signature::StateToScalar)
        .and_then(|(k, _)| store.get(&k));
    let Some(net) = critic else {
        return Ok(vec![0.0; rows]);
    };
    let input = Value::new(DType::S, Some(rows), dim, states.to_vec());
    let cache = net.forward(&[&input])?;
    Ok(cache.output.data)
}

fn trajectory_loop(
    run: &mut Run<'_>,
    rollout: &mut Rollout,
    space: &ActionSpace,
    budget: &TrainBudget,
    r: &mut Rng,
    returns: &mut Vec<f64>,
) -> (usize, Option<TrainError>) {
    let spec = run.spec;
    let mut steps = 0;
    while steps < budget.total_steps {
        for (online, snap) in &spec.snapshots {
            if let Err(e) = nn::hard_copy(&mut run.store, online, snap) {
                return (steps, Some(e.into()));
            }
        }
        let n = budget.rollout_steps.min(budget.total_steps - steps);
        let d = rollout.env().descriptor().clone();
        let mut batch = TransitionBatch::new(d.state_dim, space.width(), envs::BatchMode::ConsecutiveTrajectory);
        for _ in 0..n {
            let (action, _) = match act(spec, &run.store, space, rollout.state(), 0.0, r) {
                Ok(x) => x,
                Err(e) => return (steps, Some(e)),
            };
            let (tr, ep) = match rollout.step(&action) {
                Ok(x) => x,
                Err(e) => return (steps, Some(e.into())),
            };
            steps += 1;
            if let Err(e) = batch.push(&tr) {
                return (steps, Some(e.into()));
            }
            if let Some(ep) = ep {
                record_episode(run, returns, steps, ep);
            }
        }
        if let Some(last) = batch.ends.last_mut() {
            *last = 1.0;
        }
        let values = state_values(&run.store, spec, &batch.s_t, d.state_dim);
        let next = state_values(&run.store, spec, &batch.s_tp1, d.state_dim);
        let est = match (values, next) {
            (Ok(v), Ok(nv)) => compute_gae(&batch, &v, &nv, &run.hp),
            (Err(e), _) | (_, Err(e)) => Err(e),
        };
        let mut est = match est {
            Ok(x) => x,
            Err(e) => return (steps, Some(e)),
        };
        normalize(&mut est.adv);
        let mut bindings = Bindings::from_batch(&batch, &run.hp);
        let gamma: Vec<f64> = batch.ends.iter().map(|e| run.hp.gamma * (1.0 - e)).collect();
        bindings.set("gamma", Value::scalars(gamma));
        bindings.set("adv", Value::scalars(est.adv));
        bindings.set("rtg", Value::scalars(est.rtg));
        for i in 0..spec.losses.len() {
            for _ in 0..spec.losses[i].passes.max(1) {
                run.ticks += 1;
                if let Err(e) = run.descend(i, &bindings, steps) {
                    return (steps, Some(e));
                }
            }
        }
    }
    (steps, None)
}

/// Score of one environment and why it is zero, if it is.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvScore {
    pub env: String,
    pub score: f64,
    pub diagnostic: Option<String>,
}

/// Trains on `env_id` and scores the last `budget.eval_episodes` returns.
/// Incompatible environments and failed runs score zero with a diagnostic.
pub fn evaluate_env(
    spec: &AlgorithmSpec,
    env_id: &str,
    budget: &TrainBudget,
    hp: &HyperParams,
    seed: u64,
) -> EnvScore {
    let zero = |msg: String| EnvScore { env: env_id.to_string(), score: 0.0, diagnostic: Some(msg) };
    let desc = match envs::descriptor(env_id) {
        Ok(d) => d,
        Err(e) => return zero(e.to_string()),
    };
    let report = match train_agent(spec, env_id, budget, hp, seed, &mut |_| {}) {
        Ok(r) => r,
        Err(e) => return zero(e.to_string()),
    };
    if let Some(e) = &report.failure {
        return zero(format!("training failed: {e}"));
    }
    match envs::eval_score(&report.last_returns(budget.eval_episodes), desc.r_min, desc.r_max) {
        Ok(score) => EnvScore { env: env_id.to_string(), score, diagnostic: None },
        Err(e) => zero(e.to_string()),
    }
}

/// Sum of per-environment scores, folded in the given order.
pub fn evaluate_algorithm(
    spec: &AlgorithmSpec,
    env_ids: &[&str],
    budget: &TrainBudget,
    hp: &HyperParams,
    seed: u64,
) -> (f64, Vec<EnvScore>) {
    let scores: Vec<EnvScore> = env_ids.iter().map(|e| evaluate_env(spec, e, budget, hp, seed)).collect();
    (scores.iter().map(|s| s.score).sum(), scores)
}

/// Defaults per reference algorithm. Plain SGD needs very different step
/// sizes for TD regression and for policy gradients, and on-policy methods
/// get more updates from short rollouts.
pub fn algorithm_defaults(name: &str) -> (HyperParams, TrainBudget) {
    let hp = HyperParams::default();
    let budget = TrainBudget::default();
    match name {
        "ddqn" => (HyperParams { lr: 3e-3, ..hp }, budget),
        "vpg" => (HyperParams { lr: 0.5, ..hp }, TrainBudget { rollout_steps: 500, ..budget }),
        "ppo" => (HyperParams { lr: 0.05, ..hp }, TrainBudget { rollout_steps: 500, ..budget }),
        _ => (hp, budget),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{BatchMode, Transition};
    use crate::graph::{ActionKind, GraphBuilder};
    use crate::ops::OpId;
    use crate::reference;

    fn chain(rewards: &[f64], terminated: &[bool], ends: &[bool]) -> TransitionBatch {
        let mut b = TransitionBatch::new(1, 1, BatchMode::ConsecutiveTrajectory);
        for (i, &r) in rewards.iter().enumerate() {
            let t = Transition {
                s: vec![i as f64],
                a: vec![0.0],
                r,
                terminated: terminated[i],
                end: ends[i],
                s_next: vec![i as f64 + 1.0],
            };
            b.push(&t).unwrap();
        }
        b
    }

    #[test]
    fn gae_single_terminal_step() {
        let b = chain(&[1.0], &[true], &[true]);
        let est = compute_gae(&b, &[0.0], &[0.0], &HyperParams::default()).unwrap();
        assert_eq!(est.adv, vec![1.0]);
        assert_eq!(est.rtg, vec![1.0]);
    }

    #[test]
    fn gae_restarts_at_episode_boundaries() {
        let hp = HyperParams { gamma: 0.5, lambda: 1.0, ..HyperParams::default() };
        let b = chain(&[1.0, 1.0, 1.0], &[false, true, false], &[false, true, true]);
        let est = compute_gae(&b, &[0.0; 3], &[0.0, 0.0, 4.0], &hp).unwrap();
        // second episode bootstraps from V(s_3) = 4
        assert_eq!(est.rtg, vec![1.5, 1.0, 3.0]);
        assert_eq!(est.adv, vec![1.5, 1.0, 3.0]);
    }

    #[test]
    fn gae_rejects_replay_batches() {
        let mut b = chain(&[1.0], &[true], &[true]);
        b.mode = BatchMode::IidReplay;
        assert_eq!(compute_gae(&b, &[0.0], &[0.0], &HyperParams::default()), Err(TrainError::ModeMismatch));
    }

    #[test]
    fn epsilon_decays_linearly() {
        let b = TrainBudget { total_steps: 100, epsilon_fraction: 0.5, ..TrainBudget::default() };
        assert_eq!(b.epsilon(0), 1.0);
        assert!((b.epsilon(25) - 0.525).abs() < 1e-12);
        assert_eq!(b.epsilon(50), 0.05);
        assert_eq!(b.epsilon(99), 0.05);
    }

    #[test]
    fn normalize_centers() {
        let mut xs = vec![1.0, 2.0, 3.0];
        normalize(&mut xs);
        assert!(xs.iter().sum::<f64>().abs() < 1e-12);
        let mut same = vec![2.0, 2.0];
        normalize(&mut same);
        assert_eq!(same, vec![2.0, 2.0]);
    }

    #[test]
    fn ddqn_passes_the_hurdle() {
        let spec = reference::build("ddqn").unwrap();
        let (hp, _) = algorithm_defaults("ddqn");
        let s = evaluate_env(&spec, "bandit", &TrainBudget::hurdle(), &hp, 3);
        assert!(s.score >= 0.6, "{s:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let spec = reference::build("ddqn").unwrap();
        let budget = TrainBudget::hurdle();
        let hp = HyperParams::default();
        let a = train_agent(&spec, "bandit", &budget, &hp, 11, &mut |_| {}).unwrap();
        let b = train_agent(&spec, "bandit", &budget, &hp, 11, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        let c = train_agent(&spec, "bandit", &budget, &hp, 12, &mut |_| {}).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn incompatible_env_scores_zero() {
        let spec = reference::build("ddqn").unwrap();
        let err = train_agent(&spec, "pendulum", &TrainBudget::hurdle(), &HyperParams::default(), 0, &mut |_| {});
        assert!(matches!(err, Err(TrainError::IncompatibleActionSpace { .. })));
        let s = evaluate_env(&spec, "pendulum", &TrainBudget::hurdle(), &HyperParams::default(), 0);
        assert_eq!(s.score, 0.0);
        assert!(s.diagnostic.is_some());
    }

    #[test]
    fn non_finite_loss_marks_failure() {
        let mut b = GraphBuilder::new("nan", "theta").action_space(ActionKind::Discrete);
        let s = b.input("s_t");
        let a = b.input("a_t");
        let q = b.param("theta", Signature::StateToList, &[s]);
        let qa = b.op(OpId::SelectList, &[q, a]);
        let big = b.constant(1e308);
        let ten = b.constant(10.0);
        let inf = b.op(OpId::Multiply, &[big, ten]);
        let l = b.op(OpId::Add, &[inf, qa]);
        let g = b.output(l);
        let spec = reference::build("ddqn").unwrap().with_graph(0, g);
        let mut seen = 0;
        let report = train_agent(&spec, "bandit", &TrainBudget::hurdle(), &HyperParams::default(), 0, &mut |m| {
            if let Metric::Episode { .. } = m {
                seen += 1;
            }
        })
        .unwrap();
        assert!(report.failed());
        assert_eq!(report.returns.len(), seen);
        assert!(!report.returns.is_empty());
    }

    #[test]
    fn every_algorithm_runs_briefly() {
        for name in reference::ALGORITHMS {
            let spec = reference::build(name).unwrap();
            let env = if spec.actions == ActionKind::Discrete { "cartpole" } else { "pendulum" };
            let budget = TrainBudget { total_steps: 300, warmup: 100, batch_size: 16, rollout_steps: 100, ..TrainBudget::default() };
            let (hp, _) = algorithm_defaults(name);
            let mut losses = 0;
            let r = train_agent(&spec, env, &budget, &hp, 1, &mut |m| {
                if let Metric::Loss { .. } = m {
                    losses += 1;
                }
            })
            .unwrap();
            assert!(r.failure.is_none(), "{name}: {:?}", r.failure);
            assert!(losses > 0, "{name}");
        }
    }

    #[test]
    fn value_loss_decreases_on_a_frozen_batch() {
        let spec = reference::build("vpg").unwrap();
        let hp = HyperParams { lr: 1e-3, ..HyperParams::default() };
        let mut rollout = Rollout::new(envs::make_env("cartpole").unwrap(), 5);
        let mut batch = TransitionBatch::new(4, 1, BatchMode::ConsecutiveTrajectory);
        for i in 0..200 {
            let (t, _) = rollout.step(&Action::Discrete(i % 2)).unwrap();
            batch.push(&t).unwrap();
        }
        *batch.ends.last_mut().unwrap() = 1.0;
        let mut store = init_store(&spec, 4, &ActionSpace::Discrete(2), 0).unwrap();
        let mut bindings = Bindings::from_batch(&batch, &hp);
        let gamma: Vec<f64> = batch.ends.iter().map(|e| hp.gamma * (1.0 - e)).collect();
        bindings.set("gamma", Value::scalars(gamma));
        let g = &spec.losses[1].graph;
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let (loss, grads) =
                autodiff::loss_and_grads(g, &store, &bindings, &hp, &ActionSpace::Discrete(2), None).unwrap();
            assert!(loss < last, "{loss} >= {last}");
            last = loss;
            nn::sgd_step(&mut store, &grads, hp.lr).unwrap();
        }
    }
}
