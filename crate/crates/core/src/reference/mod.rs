//! Reference loss graphs for DDQN, VPG, PPO, DDPG, TD3 and SAC, and the
//! algorithm specs that bundle them with update cadences and target rules.
//!
//! The wiring of each graph is reconstructed from its loss formula; other
//! wirings computing the same loss would be equally valid. [`oracle`] holds
//! straight-line evaluations of the same formulas for testing.

pub mod oracle;

use alloc::borrow::ToOwned;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::graph::{meta, ActionKind, Graph, GraphBuilder, NodeId, NodeKind, Signature};
use crate::ops::OpId;

pub const ALGORITHMS: [&str; 6] = ["ddqn", "vpg", "ppo", "ddpg", "td3", "sac"];

/// The ten reference graphs. `td3_q` and `sac_q` are the twin-Q templates
/// instantiated for the first critic.
pub const GRAPH_NAMES: [&str; 10] =
    ["ddqn", "vpg_pi", "vpg_v", "ppo_pi", "ddpg_q", "ddpg_pi", "td3_q", "td3_pi", "sac_q", "sac_pi"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReferenceError {
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("unknown reference graph `{0}`")]
    UnknownGraph(String),
    #[error("`{name}` does not support {actions} action spaces")]
    IncompatibleActionSpace { name: String, actions: &'static str },
}

/// Where training data comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DataMode {
    Replay,
    Trajectory,
}

/// How target stores follow their online stores.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TargetRule {
    None,
    /// `target <- tau * online + (1 - tau) * target` every `every` updates,
    /// with `tau` taken from the hyperparameters.
    Polyak { every: usize },
    HardCopy { every: usize },
}

/// Behaviour policy used to collect data.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Behavior {
    /// Greedy over a Q-list with linearly decaying uniform exploration.
    EpsilonGreedy,
    /// Sample from the policy head (softmax logits or diagonal Gaussian).
    Stochastic,
    /// Deterministic action plus `N(0, noise * range)` exploration.
    Deterministic { noise: f64 },
    /// Tanh-squashed Gaussian sample mapped to the action bounds.
    Squashed,
}

/// One loss of an algorithm with its update cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub graph: Graph,
    /// Replay mode: apply this loss on every `every`-th update tick.
    pub every: usize,
    /// Trajectory mode: gradient steps per collected batch.
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSpec {
    pub name: String,
    pub actions: ActionKind,
    pub losses: Vec<LossSpec>,
    pub data_mode: DataMode,
    pub target_rule: TargetRule,
    /// `(online, target)` store pairs managed by `target_rule`.
    pub target_pairs: Vec<(String, String)>,
    /// `(online, snapshot)` pairs hard-copied at the start of every
    /// collection phase (the PPO `theta_k`).
    pub snapshots: Vec<(String, String)>,
    pub behavior: Behavior,
    /// Store key of the acting network.
    pub actor: String,
    pub twin_q: bool,
}

impl AlgorithmSpec {
    pub fn graphs(&self) -> impl Iterator<Item = &Graph> {
        self.losses.iter().map(|l| &l.graph)
    }

    /// Every store key referenced by a graph together with its signature,
    /// plus the target and snapshot keys.
    pub fn store_signatures(&self) -> Vec<(String, Signature)> {
        let mut out: Vec<(String, Signature)> = Vec::new();
        for g in self.graphs() {
            for node in g.nodes() {
                if let NodeKind::Parameter { store_key, signature } = &node.kind {
                    if !out.iter().any(|(k, _)| k == store_key) {
                        out.push((store_key.clone(), *signature));
                    }
                }
            }
        }
        let linked: Vec<(String, String)> =
            self.target_pairs.iter().chain(&self.snapshots).cloned().collect();
        for (online, target) in linked {
            let sig = out.iter().find(|(k, _)| *k == online || *k == target).map(|(_, s)| *s);
            if let Some(sig) = sig {
                for key in [online, target] {
                    if !out.iter().any(|(k, _)| *k == key) {
                        out.push((key, sig));
                    }
                }
            }
        }
        out
    }

    /// Replaces the graph of loss `index`, keeping its cadence.
    pub fn with_graph(&self, index: usize, graph: Graph) -> AlgorithmSpec {
        let mut out = self.clone();
        out.losses[index].graph = graph;
        out
    }
}

/// Knobs for [`build_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    /// Action space for VPG and PPO (the others are fixed).
    pub actions: Option<ActionKind>,
    /// Build the GAE advantage inside the policy graphs instead of taking
    /// it as the precomputed `adv` input.
    pub inline_advantages: bool,
    /// Gradient passes of the value loss per collected batch.
    pub value_passes: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { actions: None, inline_advantages: false, value_passes: 20 }
    }
}

pub fn build(name: &str) -> Result<AlgorithmSpec, ReferenceError> {
    build_with(name, BuildOptions::default())
}

pub fn build_with(name: &str, opts: BuildOptions) -> Result<AlgorithmSpec, ReferenceError> {
    let fixed = |kind: ActionKind| -> Result<ActionKind, ReferenceError> {
        match opts.actions {
            Some(k) if k != kind => {
                Err(ReferenceError::IncompatibleActionSpace { name: name.to_string(), actions: k.as_str() })
            }
            _ => Ok(kind),
        }
    };
    let loss = |graph: Graph| LossSpec { graph, every: 1, passes: 1 };
    let pairs = |ps: &[(&str, &str)]| ps.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let spec = match name {
        "ddqn" => AlgorithmSpec {
            name: name.into(),
            actions: fixed(ActionKind::Discrete)?,
            losses: vec![loss(ddqn())],
            data_mode: DataMode::Replay,
            target_rule: TargetRule::HardCopy { every: 500 },
            target_pairs: pairs(&[("theta", "theta_targ")]),
            snapshots: Vec::new(),
            behavior: Behavior::EpsilonGreedy,
            actor: "theta".into(),
            twin_q: false,
        },
        "vpg" | "ppo" => {
            let kind = opts.actions.unwrap_or(ActionKind::Discrete);
            let policy = if name == "vpg" {
                LossSpec { graph: vpg_policy(kind, opts.inline_advantages), every: 1, passes: 1 }
            } else {
                LossSpec { graph: ppo_policy(kind, opts.inline_advantages), every: 1, passes: 10 }
            };
            AlgorithmSpec {
                name: name.into(),
                actions: kind,
                losses: vec![policy, LossSpec { graph: vpg_value(kind), every: 1, passes: opts.value_passes.max(1) }],
                data_mode: DataMode::Trajectory,
                target_rule: TargetRule::None,
                target_pairs: Vec::new(),
                snapshots: if name == "ppo" { pairs(&[("theta", "theta_k")]) } else { Vec::new() },
                behavior: Behavior::Stochastic,
                actor: "theta".into(),
                twin_q: false,
            }
        }
        "ddpg" => AlgorithmSpec {
            name: name.into(),
            actions: fixed(ActionKind::Continuous)?,
            losses: vec![loss(ddpg_q()), loss(ddpg_policy())],
            data_mode: DataMode::Replay,
            target_rule: TargetRule::Polyak { every: 1 },
            target_pairs: pairs(&[("phi", "phi_targ"), ("theta", "theta_targ")]),
            snapshots: Vec::new(),
            behavior: Behavior::Deterministic { noise: 0.1 },
            actor: "theta".into(),
            twin_q: false,
        },
        "td3" => AlgorithmSpec {
            name: name.into(),
            actions: fixed(ActionKind::Continuous)?,
            losses: vec![
                loss(td3_q("phi1")),
                loss(td3_q("phi2")),
                LossSpec { graph: td3_policy(), every: 2, passes: 1 },
            ],
            data_mode: DataMode::Replay,
            target_rule: TargetRule::Polyak { every: 2 },
            target_pairs: pairs(&[("phi1", "phi1_targ"), ("phi2", "phi2_targ"), ("theta", "theta_targ")]),
            snapshots: Vec::new(),
            behavior: Behavior::Deterministic { noise: 0.1 },
            actor: "theta".into(),
            twin_q: true,
        },
        "sac" => AlgorithmSpec {
            name: name.into(),
            actions: fixed(ActionKind::Continuous)?,
            losses: vec![loss(sac_q("phi1")), loss(sac_q("phi2")), loss(sac_policy())],
            data_mode: DataMode::Replay,
            target_rule: TargetRule::Polyak { every: 1 },
            target_pairs: pairs(&[("phi1", "phi1_targ"), ("phi2", "phi2_targ")]),
            snapshots: Vec::new(),
            behavior: Behavior::Squashed,
            actor: "theta".into(),
            twin_q: true,
        },
        other => return Err(ReferenceError::UnknownAlgorithm(other.to_owned())),
    };
    Ok(spec)
}

/// One of the ten reference graphs by name (discrete VPG/PPO).
pub fn graph(name: &str) -> Result<Graph, ReferenceError> {
    let d = ActionKind::Discrete;
    Ok(match name {
        "ddqn" => ddqn(),
        "vpg_pi" => vpg_policy(d, false),
        "vpg_v" => vpg_value(d),
        "ppo_pi" => ppo_policy(d, false),
        "ddpg_q" => ddpg_q(),
        "ddpg_pi" => ddpg_policy(),
        "td3_q" => td3_q("phi1"),
        "td3_pi" => td3_policy(),
        "sac_q" => sac_q("phi1"),
        "sac_pi" => sac_policy(),
        other => return Err(ReferenceError::UnknownGraph(other.to_owned())),
    })
}

fn builder(name: &str, target: &str, algorithm: &str, kind: ActionKind) -> GraphBuilder {
    GraphBuilder::new(name, target).action_space(kind).meta(meta::ALGORITHM, algorithm)
}

/// `(Q_theta(s_t, a_t) - (r_t + gamma * Q_theta'(s_tp1, argmax_a Q_theta(s_tp1, a))))^2`
pub fn ddqn() -> Graph {
    let mut b = builder("ddqn", "theta", "ddqn", ActionKind::Discrete);
    let s = b.input("s_t");
    let a = b.input("a_t");
    let r = b.input("r_t");
    let s1 = b.input("s_tp1");
    let gamma = b.input("gamma");
    let q = b.param("theta", Signature::StateToList, &[s]);
    let qa = b.op(OpId::SelectList, &[q, a]);
    let q_next = b.param("theta", Signature::StateToList, &[s1]);
    let greedy = b.op(OpId::ArgMaxList, &[q_next]);
    let q_targ = b.param("theta_targ", Signature::StateToList, &[s1]);
    let q_eval = b.op(OpId::SelectList, &[q_targ, greedy]);
    let disc = b.op(OpId::Multiply, &[gamma, q_eval]);
    let y = b.op(OpId::Add, &[r, disc]);
    let diff = b.op(OpId::Subtract, &[qa, y]);
    let sq = b.op(OpId::Square, &[diff]);
    b.output(sq)
}

fn policy_head(kind: ActionKind) -> Signature {
    match kind {
        ActionKind::Discrete => Signature::StateToList,
        ActionKind::Continuous => Signature::StateToGaussian,
    }
}

/// GAE advantage built from `V_phi`, segmented by the bound `gamma`:
/// `SumAndDiscount(r_t + gamma V(s_tp1) - V(s_t), gamma * lambda)`.
fn inline_advantage(b: &mut GraphBuilder, s: NodeId) -> NodeId {
    let r = b.input("r_t");
    let s1 = b.input("s_tp1");
    let gamma = b.input("gamma");
    let lambda = b.input("lambda");
    let v = b.param("phi", Signature::StateToScalar, &[s]);
    let v1 = b.param("phi", Signature::StateToScalar, &[s1]);
    let boot = b.op(OpId::Multiply, &[gamma, v1]);
    let target = b.op(OpId::Add, &[r, boot]);
    let delta = b.op(OpId::Subtract, &[target, v]);
    let gl = b.op(OpId::Multiply, &[gamma, lambda]);
    b.op(OpId::SumAndDiscount, &[delta, gl])
}

/// `-1/T sum log pi_theta(a_t | s_t) * A_t`
pub fn vpg_policy(kind: ActionKind, inline_advantages: bool) -> Graph {
    let mut b = builder("vpg_pi", "theta", "vpg", kind);
    let s = b.input("s_t");
    let a = b.input("a_t");
    let adv = if inline_advantages { inline_advantage(&mut b, s) } else { b.input("adv") };
    let head = b.param("theta", policy_head(kind), &[s]);
    let logp = match kind {
        ActionKind::Discrete => {
            let p = b.op(OpId::Prob, &[head, a]);
            b.op(OpId::Log, &[p])
        }
        ActionKind::Continuous => b.op(OpId::LogProb, &[head, a]),
    };
    let weighted = b.op(OpId::Multiply, &[logp, adv]);
    let mean = b.op(OpId::MeanBatch, &[weighted]);
    let minus = b.constant(-1.0);
    let loss = b.op(OpId::Multiply, &[minus, mean]);
    b.output(loss)
}

/// `1/T sum (V_phi(s_t) - R_t)^2` with the rewards-to-go built in-graph
/// as `SumAndDiscount(r_t, gamma)`.
pub fn vpg_value(kind: ActionKind) -> Graph {
    let mut b = builder("vpg_v", "phi", "vpg", kind);
    let s = b.input("s_t");
    let r = b.input("r_t");
    let gamma = b.input("gamma");
    let v = b.param("phi", Signature::StateToScalar, &[s]);
    let rtg = b.op(OpId::SumAndDiscount, &[r, gamma]);
    let diff = b.op(OpId::Subtract, &[v, rtg]);
    let sq = b.op(OpId::Square, &[diff]);
    let mean = b.op(OpId::MeanBatch, &[sq]);
    b.output(mean)
}

/// `-1/T sum min(rho A_t, clip(rho, 1 - eps, 1 + eps) A_t)` with
/// `rho = pi_theta(a_t | s_t) / pi_theta_k(a_t | s_t)`.
pub fn ppo_policy(kind: ActionKind, inline_advantages: bool) -> Graph {
    let mut b = builder("ppo_pi", "theta", "ppo", kind);
    let s = b.input("s_t");
    let a = b.input("a_t");
    let adv = if inline_advantages { inline_advantage(&mut b, s) } else { b.input("adv") };
    let head = b.param("theta", policy_head(kind), &[s]);
    let head_k = b.param("theta_k", policy_head(kind), &[s]);
    let p = b.op(OpId::Prob, &[head, a]);
    let pk = b.op(OpId::Prob, &[head_k, a]);
    let ratio = b.op(OpId::Div, &[p, pk]);
    let lo = b.labeled("1-eps", 0.8);
    let hi = b.labeled("1+eps", 1.2);
    let clipped = b.op(OpId::Clip, &[ratio, lo, hi]);
    let plain = b.op(OpId::Multiply, &[ratio, adv]);
    let safe = b.op(OpId::Multiply, &[clipped, adv]);
    let m = b.op(OpId::Min, &[plain, safe]);
    let mean = b.op(OpId::MeanBatch, &[m]);
    let minus = b.constant(-1.0);
    let loss = b.op(OpId::Multiply, &[minus, mean]);
    b.output(loss)
}

/// Builds `r_t + gamma * (1 - d_t) * next`.
fn bellman(b: &mut GraphBuilder, next: NodeId) -> NodeId {
    let r = b.input("r_t");
    let d = b.input("d_t");
    let gamma = b.input("gamma");
    let one = b.constant(1.0);
    let alive = b.op(OpId::Subtract, &[one, d]);
    let g = b.op(OpId::Multiply, &[gamma, alive]);
    let disc = b.op(OpId::Multiply, &[g, next]);
    b.op(OpId::Add, &[r, disc])
}

fn squared_td(b: &mut GraphBuilder, q_key: &str, y: NodeId) -> NodeId {
    let s = b.input("s_t");
    let a = b.input("a_t");
    let q = b.param(q_key, Signature::StateActionToScalar, &[s, a]);
    let diff = b.op(OpId::Subtract, &[q, y]);
    b.op(OpId::Square, &[diff])
}

/// `(Q_phi(s_t, a_t) - (r_t + gamma (1 - d_t) Q_phi'(s_tp1, mu_theta'(s_tp1))))^2`
pub fn ddpg_q() -> Graph {
    let mut b = builder("ddpg_q", "phi", "ddpg", ActionKind::Continuous);
    let s1 = b.input("s_tp1");
    let mu = b.param("theta_targ", Signature::StateToAction, &[s1]);
    let q_next = b.param("phi_targ", Signature::StateActionToScalar, &[s1, mu]);
    let y = bellman(&mut b, q_next);
    let loss = squared_td(&mut b, "phi", y);
    b.output(loss)
}

fn neg_q_of_policy(name: &str, algorithm: &str, q_key: &str) -> Graph {
    let mut b = builder(name, "theta", algorithm, ActionKind::Continuous);
    let s = b.input("s_t");
    let mu = b.param("theta", Signature::StateToAction, &[s]);
    let q = b.param(q_key, Signature::StateActionToScalar, &[s, mu]);
    let minus = b.constant(-1.0);
    let loss = b.op(OpId::Multiply, &[minus, q]);
    b.output(loss)
}

/// `-Q_phi(s_t, mu_theta(s_t))`
pub fn ddpg_policy() -> Graph {
    neg_q_of_policy("ddpg_pi", "ddpg", "phi")
}

/// Twin-Q target with clipped target-policy smoothing:
/// `a' = clip(mu_theta'(s_tp1) + clip(eps, -c, c), a_low, a_high)`.
pub fn td3_q(q_key: &str) -> Graph {
    let mut b = builder(&alloc::format!("td3_q_{q_key}"), q_key, "td3", ActionKind::Continuous);
    let s1 = b.input("s_tp1");
    let eps = b.input("eps");
    let neg_c = b.labeled("-c", -0.5);
    let c = b.labeled("c", 0.5);
    let noise = b.op(OpId::Clip, &[eps, neg_c, c]);
    let mu = b.param("theta_targ", Signature::StateToAction, &[s1]);
    let noisy = b.op(OpId::Add, &[mu, noise]);
    let low = b.labeled("a_low", -1.0);
    let high = b.labeled("a_high", 1.0);
    let a1 = b.op(OpId::Clip, &[noisy, low, high]);
    let q1 = b.param("phi1_targ", Signature::StateActionToScalar, &[s1, a1]);
    let q2 = b.param("phi2_targ", Signature::StateActionToScalar, &[s1, a1]);
    let m = b.op(OpId::MinPair, &[q1, q2]);
    let y = bellman(&mut b, m);
    let loss = squared_td(&mut b, q_key, y);
    b.output(loss)
}

/// `-Q_phi1(s_t, mu_theta(s_t))`
pub fn td3_policy() -> Graph {
    neg_q_of_policy("td3_pi", "td3", "phi1")
}

/// Squashed sample and its log-density under `pi_theta` at `state`.
fn squashed_sample(b: &mut GraphBuilder, state: NodeId) -> (NodeId, NodeId) {
    let xi = b.input("xi");
    let head = b.param("theta", Signature::StateToGaussian, &[state]);
    let a = b.op(OpId::Squashing, &[head, xi]);
    let logp = b.op(OpId::SquashedLogProb, &[head, a]);
    (a, logp)
}

/// Soft value of `(state, a)`: `min_i Q_i(state, a) - alpha * logp`.
fn soft_value(b: &mut GraphBuilder, state: NodeId, a: NodeId, logp: NodeId, keys: [&str; 2]) -> NodeId {
    let q1 = b.param(keys[0], Signature::StateActionToScalar, &[state, a]);
    let q2 = b.param(keys[1], Signature::StateActionToScalar, &[state, a]);
    let m = b.op(OpId::MinPair, &[q1, q2]);
    let alpha = b.labeled("alpha", 0.2);
    let ent = b.op(OpId::Multiply, &[alpha, logp]);
    b.op(OpId::Subtract, &[m, ent])
}

/// `(Q_phi_i(s_t, a_t) - (r_t + gamma (1 - d_t) (min_j Q_phi'_j(s_tp1, a~) - alpha log pi_theta(a~ | s_tp1))))^2`
/// with `a~ = tanh(mu_theta(s_tp1) + sigma_theta(s_tp1) * xi)`.
pub fn sac_q(q_key: &str) -> Graph {
    let mut b = builder(&alloc::format!("sac_q_{q_key}"), q_key, "sac", ActionKind::Continuous);
    let s1 = b.input("s_tp1");
    let (a1, logp) = squashed_sample(&mut b, s1);
    let soft = soft_value(&mut b, s1, a1, logp, ["phi1_targ", "phi2_targ"]);
    let y = bellman(&mut b, soft);
    let loss = squared_td(&mut b, q_key, y);
    b.output(loss)
}

/// `-(min_i Q_phi_i(s_t, a~) - alpha log pi_theta(a~ | s_t))`
pub fn sac_policy() -> Graph {
    let mut b = builder("sac_pi", "theta", "sac", ActionKind::Continuous);
    let s = b.input("s_t");
    let (a, logp) = squashed_sample(&mut b, s);
    let soft = soft_value(&mut b, s, a, logp, ["phi1", "phi2"]);
    let minus = b.constant(-1.0);
    let loss = b.op(OpId::Multiply, &[minus, soft]);
    b.output(loss)
}
