//! Regularized evolution over loss graphs.
//!
//! A fixed-size population of algorithm specs; each iteration picks a
//! parent by tournament, mutates one of its graphs, gates the child on a
//! cheap hurdle, scores it on the environment set, inserts it and removes
//! the oldest individual.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::Rng as _;

use crate::envs;
use crate::graph::{
    infer_port_types, input_type, live_nodes, meta, validate, ActionKind, Graph, Node, NodeId, NodeKind, OpRegistry,
    PortType, Signature,
};
use crate::hyper::HyperParams;
use crate::ops::{self, OpId};
use crate::reference::{self, AlgorithmSpec, DataMode};
use crate::rng::{self, Rng};
use crate::trainer::{self, EnvScore, TrainBudget};

/// Upper bound on mutant size; insertions beyond it are rejected.
pub const MAX_MUTANT_NODES: usize = 64;
/// Random initial graphs: node count and depth bounds (Output included).
pub const MAX_RANDOM_NODES: usize = 20;
pub const MAX_RANDOM_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvolutionError {
    #[error("invalid warm start `{0}`")]
    InvalidWarmStart(String),
    #[error("invalid evolution config: {0}")]
    InvalidConfig(String),
    #[error("no valid mutation after {attempts} attempts")]
    MutationExhausted { attempts: usize },
    #[error("could not generate a random graph")]
    GenerationFailed,
    #[error("unknown environment task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Status {
    Scored,
    FailedHurdle,
    FailedEval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub id: u64,
    pub spec: AlgorithmSpec,
    /// Present iff `status` is [`Status::Scored`].
    pub score: Option<f64>,
    pub birth: u64,
    pub parent: Option<u64>,
    pub status: Status,
}

impl Individual {
    fn rank_score(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EvolutionConfig {
    /// Population size N.
    pub population: usize,
    /// Tournament size T.
    pub tournament: usize,
    /// Iterations C.
    pub iterations: usize,
    pub hurdle_alpha: f64,
    /// Mutation attempts K before giving up on an iteration.
    pub mutation_retries: usize,
    /// Reference algorithm names seeding the population.
    pub warm_start: Vec<String>,
    /// Environment tasks, see [`EnvTask::parse`].
    pub env_set: Vec<String>,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 10,
            tournament: 3,
            iterations: 20,
            hurdle_alpha: 0.6,
            mutation_retries: 20,
            warm_start: vec!["ddqn".into()],
            env_set: vec!["bandit".into(), "cartpole-short".into()],
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn check(&self) -> Result<(), EvolutionError> {
        let bad = |m: &str| Err(EvolutionError::InvalidConfig(m.to_string()));
        if self.population == 0 {
            return bad("population must be at least 1");
        }
        if self.tournament == 0 || self.tournament > self.population {
            return bad("tournament size must lie in [1, population]");
        }
        if !(0.0..=1.0).contains(&self.hurdle_alpha) {
            return bad("hurdle_alpha must lie in [0, 1]");
        }
        if self.warm_start.len() > self.population {
            return bad("more warm starts than population slots");
        }
        for t in &self.env_set {
            EnvTask::parse(t)?;
        }
        Ok(())
    }
}

/// An environment with the training budget used to score candidates on it.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTask {
    pub env: String,
    pub budget: TrainBudget,
}

impl EnvTask {
    /// Budget used for an environment named without a step count.
    pub fn default_budget(env: &str) -> TrainBudget {
        match env {
            "bandit" | "bandit-continuous" => TrainBudget::hurdle(),
            _ => TrainBudget { total_steps: 1000, batch_size: 32, warmup: 100, rollout_steps: 200, ..TrainBudget::default() },
        }
    }

    /// `env`, `env:steps`, or `cartpole-short` (CartPole with the short
    /// default budget).
    pub fn parse(s: &str) -> Result<EnvTask, EvolutionError> {
        let unknown = || EvolutionError::UnknownTask(s.to_string());
        let (name, steps) = match s.split_once(':') {
            Some((n, k)) => (n, Some(k.parse::<usize>().map_err(|_| unknown())?)),
            None => (s, None),
        };
        let env = match name {
            "cartpole-short" => "cartpole",
            other => other,
        };
        envs::descriptor(env).map_err(|_| unknown())?;
        let mut budget = Self::default_budget(env);
        if let Some(k) = steps {
            if k == 0 {
                return Err(unknown());
            }
            budget.total_steps = k;
            budget.warmup = budget.warmup.min(k / 2);
        }
        Ok(EnvTask { env: env.to_string(), budget })
    }
}

/// Result of gating and scoring one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub hurdle_score: Option<f64>,
    pub passed_hurdle: bool,
    pub per_env: Vec<EnvScore>,
    /// Training diverged or could not run on some environment.
    pub failed: bool,
}

impl Assessment {
    pub fn status(&self) -> Status {
        if !self.passed_hurdle {
            Status::FailedHurdle
        } else if self.failed {
            Status::FailedEval
        } else {
            Status::Scored
        }
    }

    pub fn score(&self) -> Option<f64> {
        (self.status() == Status::Scored).then(|| self.per_env.iter().map(|s| s.score).sum())
    }
}

/// Scores candidates. Implementations may evaluate in parallel but must
/// return results in job order.
pub trait Evaluator {
    fn assess(&self, jobs: &[(&AlgorithmSpec, u64)], gate: bool) -> Vec<Assessment>;
}

/// Hurdle and environment-set scoring with fixed hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub tasks: Vec<EnvTask>,
    pub hp: HyperParams,
    pub hurdle_budget: TrainBudget,
    pub hurdle_alpha: f64,
}

impl Scorer {
    pub fn new(cfg: &EvolutionConfig, hp: HyperParams) -> Result<Scorer, EvolutionError> {
        let tasks = cfg.env_set.iter().map(|t| EnvTask::parse(t)).collect::<Result<_, _>>()?;
        Ok(Scorer { tasks, hp, hurdle_budget: TrainBudget::hurdle(), hurdle_alpha: cfg.hurdle_alpha })
    }

    /// Hurdle score on the bandit matching the spec's action space, and
    /// whether it clears `hurdle_alpha`.
    pub fn hurdle(&self, spec: &AlgorithmSpec, seed: u64) -> (Option<f64>, bool) {
        if self.hurdle_alpha <= 0.0 {
            return (None, true);
        }
        let env = envs::hurdle_env(spec.actions);
        let s = trainer::evaluate_env(spec, env.id, &self.hurdle_budget, &self.hp, rng::derive_seed(&[seed, 0x4u64]));
        let passed = s.diagnostic.is_none() && s.score >= self.hurdle_alpha;
        (Some(s.score), passed)
    }

    pub fn env_score(&self, spec: &AlgorithmSpec, task: usize, seed: u64) -> EnvScore {
        let t = &self.tasks[task];
        trainer::evaluate_env(spec, &t.env, &t.budget, &self.hp, seed)
    }

    /// Whether a zero score came from a training failure rather than an
    /// incompatible action space.
    pub fn is_failure(score: &EnvScore) -> bool {
        score.diagnostic.as_deref().is_some_and(|d| d.starts_with("training failed"))
    }

    pub fn assess_one(&self, spec: &AlgorithmSpec, seed: u64, gate: bool) -> Assessment {
        let (hurdle_score, passed_hurdle) = if gate { self.hurdle(spec, seed) } else { (None, true) };
        if !passed_hurdle {
            return Assessment { hurdle_score, passed_hurdle, per_env: Vec::new(), failed: false };
        }
        let per_env: Vec<EnvScore> = (0..self.tasks.len()).map(|i| self.env_score(spec, i, seed)).collect();
        let failed = per_env.iter().any(Self::is_failure);
        Assessment { hurdle_score, passed_hurdle, per_env, failed }
    }
}

impl Evaluator for Scorer {
    fn assess(&self, jobs: &[(&AlgorithmSpec, u64)], gate: bool) -> Vec<Assessment> {
        jobs.iter().map(|(spec, seed)| self.assess_one(spec, *seed, gate)).collect()
    }
}

/// Inputs and stores a generated graph may use.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphContext {
    pub actions: ActionKind,
    pub inputs: Vec<(String, PortType)>,
    pub stores: Vec<(String, Signature)>,
    pub loss_target: String,
    pub algorithm: String,
}

impl GraphContext {
    /// Everything the trainer binds for `spec`, targeting loss `index`.
    pub fn for_spec(spec: &AlgorithmSpec, index: usize) -> GraphContext {
        let replay_only = ["adv", "rtg"];
        let inputs = crate::graph::INPUT_SYMBOLS
            .iter()
            .filter(|s| spec.data_mode == DataMode::Trajectory || !replay_only.contains(s))
            .filter_map(|s| input_type(s, spec.actions).map(|t| (s.to_string(), t)))
            .collect();
        let graph = &spec.losses[index].graph;
        GraphContext {
            actions: spec.actions,
            inputs,
            stores: spec.store_signatures(),
            loss_target: graph.loss_target.clone(),
            algorithm: spec.name.clone(),
        }
    }
}

fn depth_of(g: &Graph) -> usize {
    let order = match crate::graph::topo_order(g) {
        Ok(o) => o,
        Err(_) => return usize::MAX,
    };
    let mut depth = vec![0usize; g.len()];
    for id in order {
        depth[id.0] = g.node(id).inputs.iter().map(|s| depth[s.0] + 1).max().unwrap_or(0);
    }
    g.output().map_or(usize::MAX, |o| depth[o.0])
}

fn target_is_live(g: &Graph) -> bool {
    let live = live_nodes(g);
    g.ids().any(|id| {
        live[id.0] && matches!(&g.node(id).kind, NodeKind::Parameter { store_key, .. } if *store_key == g.loss_target)
    })
}

/// Sanity checks every candidate graph must pass: it validates and the loss
/// target still feeds the output.
pub fn acceptable(g: &Graph, registry: &OpRegistry) -> bool {
    validate(g, registry).ok && target_is_live(g)
}

fn random_constant(r: &mut Rng) -> f64 {
    const NICE: [f64; 6] = [-1.0, 0.5, 1.0, 2.0, 0.1, 10.0];
    if r.random_bool(0.5) {
        NICE[r.random_range(0..NICE.len())]
    } else {
        r.random_range(-2.0..2.0)
    }
}

/// Draws a random graph that validates, has at most [`MAX_RANDOM_NODES`]
/// nodes and depth [`MAX_RANDOM_DEPTH`], and feeds a parameter node of the
/// loss target and at least one input into the output.
pub fn random_graph(ctx: &GraphContext, registry: &OpRegistry, r: &mut Rng, name: &str) -> Result<Graph, EvolutionError> {
    let ops: Vec<OpId> = registry.ops().collect();
    let target_sig = ctx
        .stores
        .iter()
        .find(|(k, _)| *k == ctx.loss_target)
        .map(|(_, s)| *s)
        .ok_or(EvolutionError::GenerationFailed)?;
    for _ in 0..1000 {
        let mut nodes: Vec<Node> = Vec::new();
        let mut types: Vec<PortType> = Vec::new();
        let mut depth: Vec<usize> = Vec::new();
        let mut feeds: Vec<bool> = Vec::new();
        let push = |nodes: &mut Vec<Node>, types: &mut Vec<PortType>, depth: &mut Vec<usize>, feeds: &mut Vec<bool>,
                    kind: NodeKind, inputs: Vec<NodeId>, t: PortType, is_target: bool| {
            let d = inputs.iter().map(|s| depth[s.0] + 1).max().unwrap_or(0);
            let f = is_target || inputs.iter().any(|s| feeds[s.0]);
            nodes.push(Node { kind, inputs });
            types.push(t);
            depth.push(d);
            feeds.push(f);
        };
        let add_input = |nodes: &mut Vec<Node>, types: &mut Vec<PortType>, depth: &mut Vec<usize>, feeds: &mut Vec<bool>,
                         sym: &str, t: PortType| {
            push(nodes, types, depth, feeds, NodeKind::Input { symbol: sym.to_string() }, Vec::new(), t, false);
        };
        // Seed with a state input and the loss-target network.
        let states: Vec<&(String, PortType)> = ctx.inputs.iter().filter(|(_, t)| *t == PortType::S).collect();
        if states.is_empty() {
            return Err(EvolutionError::GenerationFailed);
        }
        let (sym, t) = states[r.random_range(0..states.len())];
        add_input(&mut nodes, &mut types, &mut depth, &mut feeds, sym, *t);
        for _ in 0..r.random_range(0..3) {
            let (sym, t) = &ctx.inputs[r.random_range(0..ctx.inputs.len())];
            add_input(&mut nodes, &mut types, &mut depth, &mut feeds, sym, *t);
        }
        let param_inputs = |types: &[PortType], sig: Signature, r: &mut Rng| -> Option<Vec<NodeId>> {
            sig.inputs()
                .iter()
                .map(|want| {
                    let c: Vec<usize> = (0..types.len()).filter(|&i| types[i] == *want).collect();
                    (!c.is_empty()).then(|| NodeId(c[r.random_range(0..c.len())]))
                })
                .collect()
        };
        let ins = match param_inputs(&types, target_sig, r) {
            Some(ins) => ins,
            None => {
                let z = ctx.inputs.iter().find(|(_, t)| *t == PortType::Z);
                let Some((sym, t)) = z else { continue };
                add_input(&mut nodes, &mut types, &mut depth, &mut feeds, sym, *t);
                match param_inputs(&types, target_sig, r) {
                    Some(ins) => ins,
                    None => continue,
                }
            }
        };
        let Some(out_t) = target_sig.output(ctx.actions) else {
            return Err(EvolutionError::GenerationFailed);
        };
        push(
            &mut nodes,
            &mut types,
            &mut depth,
            &mut feeds,
            NodeKind::Parameter { store_key: ctx.loss_target.clone(), signature: target_sig },
            ins,
            out_t,
            true,
        );
        let extra = r.random_range(3..=14);
        for _ in 0..extra {
            if nodes.len() >= MAX_RANDOM_NODES - 1 {
                break;
            }
            let roll = r.random_range(0..100);
            if roll < 70 {
                for _ in 0..30 {
                    let op = ops[r.random_range(0..ops.len())];
                    let ins: Vec<NodeId> = (0..op.arity()).map(|_| NodeId(r.random_range(0..nodes.len()))).collect();
                    let its: Vec<PortType> = ins.iter().map(|s| types[s.0]).collect();
                    let d = ins.iter().map(|s| depth[s.0] + 1).max().unwrap_or(0);
                    if d >= MAX_RANDOM_DEPTH {
                        continue;
                    }
                    if let Some(t) = ops::infer(op, &its, ctx.actions) {
                        push(&mut nodes, &mut types, &mut depth, &mut feeds, NodeKind::Operation { op }, ins, t, false);
                        break;
                    }
                }
            } else if roll < 80 {
                let (key, sig) = &ctx.stores[r.random_range(0..ctx.stores.len())];
                let (Some(t), Some(ins)) = (sig.output(ctx.actions), param_inputs(&types, *sig, r)) else { continue };
                let is_target = *key == ctx.loss_target;
                push(
                    &mut nodes,
                    &mut types,
                    &mut depth,
                    &mut feeds,
                    NodeKind::Parameter { store_key: key.clone(), signature: *sig },
                    ins,
                    t,
                    is_target,
                );
            } else if roll < 90 {
                let value = random_constant(r);
                push(&mut nodes, &mut types, &mut depth, &mut feeds, NodeKind::Constant { value, label: None }, Vec::new(), PortType::R, false);
            } else {
                let (sym, t) = &ctx.inputs[r.random_range(0..ctx.inputs.len())];
                add_input(&mut nodes, &mut types, &mut depth, &mut feeds, sym, *t);
            }
        }
        // Latest scalar that depends on the loss target becomes the loss.
        let pick = (0..nodes.len()).rev().find(|&i| types[i] == PortType::R && feeds[i]);
        let loss = match pick {
            Some(i) => NodeId(i),
            None => {
                let list = (0..nodes.len()).rev().find(|&i| feeds[i] && ops::infer(OpId::MaxList, &[types[i]], ctx.actions) == Some(PortType::R));
                let Some(i) = list else { continue };
                push(&mut nodes, &mut types, &mut depth, &mut feeds, NodeKind::Operation { op: OpId::MaxList }, vec![NodeId(i)], PortType::R, false);
                NodeId(nodes.len() - 1)
            }
        };
        nodes.push(Node { kind: NodeKind::Output, inputs: vec![loss] });
        let mut metadata = alloc::collections::BTreeMap::new();
        metadata.insert(meta::ACTION_SPACE.to_string(), ctx.actions.as_str().to_string());
        metadata.insert(meta::ALGORITHM.to_string(), ctx.algorithm.clone());
        let g = Graph::from_parts(name, nodes, ctx.loss_target.clone(), metadata).prune_dead();
        let has_input = g.nodes().iter().any(|n| matches!(n.kind, NodeKind::Input { .. }));
        if g.len() <= MAX_RANDOM_NODES && depth_of(&g) <= MAX_RANDOM_DEPTH && has_input && acceptable(&g, registry) {
            return Ok(g);
        }
    }
    Err(EvolutionError::GenerationFailed)
}

/// The kind of edit a mutation made.
#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    ReplaceOp { node: usize, from: OpId, to: OpId },
    Rewire { node: usize, port: usize, from: usize, to: usize },
    InsertOp { op: OpId, before: usize, port: usize },
    DeleteNode { node: usize },
    PerturbConstant { node: usize, from: f64, to: f64 },
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mutation::ReplaceOp { node, from, to } => write!(f, "replace-op node={node} {from}->{to}"),
            Mutation::Rewire { node, port, from, to } => write!(f, "rewire node={node} port={port} {from}->{to}"),
            Mutation::InsertOp { op, before, port } => write!(f, "insert-op {op} before={before} port={port}"),
            Mutation::DeleteNode { node } => write!(f, "delete-node node={node}"),
            Mutation::PerturbConstant { node, from, to } => write!(f, "perturb-constant node={node} {from}->{to}"),
        }
    }
}

/// A mutated spec together with what was changed.
#[derive(Debug, Clone, PartialEq)]
pub struct Child {
    pub spec: AlgorithmSpec,
    /// Index of the mutated loss.
    pub loss: usize,
    pub mutation: Mutation,
    pub attempts: usize,
}

/// Nodes reachable from `id` along consumer edges, `id` included.
fn descendants(g: &Graph, id: NodeId) -> Vec<bool> {
    let consumers = g.consumers();
    let mut seen = vec![false; g.len()];
    let mut stack = vec![id];
    while let Some(n) = stack.pop() {
        if seen[n.0] {
            continue;
        }
        seen[n.0] = true;
        stack.extend(consumers[n.0].iter().map(|(c, _)| *c));
    }
    seen
}

/// Type of `kind` applied to `ins`, for the node kinds that take inputs.
fn retype(kind: &NodeKind, ins: &[PortType], actions: ActionKind) -> Option<PortType> {
    match kind {
        NodeKind::Operation { op } => ops::infer(*op, ins, actions),
        NodeKind::Parameter { signature, .. } => {
            (ins == signature.inputs()).then(|| signature.output(actions)).flatten()
        }
        NodeKind::Output => (ins == [PortType::R]).then_some(PortType::R),
        _ => None,
    }
}

fn pick<T: Copy>(items: &[T], r: &mut Rng) -> Option<T> {
    (!items.is_empty()).then(|| items[r.random_range(0..items.len())])
}

/// One attempt of one mutation kind. Returns `None` when the kind does not
/// apply; the result is not yet validated.
fn try_mutation(g: &Graph, kind: usize, registry: &OpRegistry, r: &mut Rng) -> Option<(Graph, Mutation)> {
    let types = infer_port_types(g).ok()?;
    let actions = g.action_space();
    let mut nodes: Vec<Node> = g.nodes().to_vec();
    let ids: Vec<usize> = (0..g.len()).collect();
    match kind {
        0 => {
            let cands: Vec<usize> = ids.iter().copied().filter(|&i| matches!(nodes[i].kind, NodeKind::Operation { .. })).collect();
            let n = pick(&cands, r)?;
            let NodeKind::Operation { op: from } = nodes[n].kind else { return None };
            let ins: Vec<PortType> = nodes[n].inputs.iter().map(|s| types[s.0]).collect();
            let alts: Vec<OpId> = registry
                .ops()
                .filter(|&o| o != from && o.arity() == from.arity() && ops::infer(o, &ins, actions) == Some(types[n]))
                .collect();
            let to = pick(&alts, r)?;
            nodes[n].kind = NodeKind::Operation { op: to };
            Some((g.with_nodes(nodes), Mutation::ReplaceOp { node: n, from, to }))
        }
        1 => {
            let cands: Vec<usize> = ids.iter().copied().filter(|&i| !nodes[i].inputs.is_empty()).collect();
            let c = pick(&cands, r)?;
            let port = r.random_range(0..nodes[c].inputs.len());
            let from = nodes[c].inputs[port].0;
            let desc = descendants(g, NodeId(c));
            let alts: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&x| x != from && !desc[x] && !matches!(nodes[x].kind, NodeKind::Output))
                .filter(|&x| {
                    let mut ins: Vec<PortType> = nodes[c].inputs.iter().map(|s| types[s.0]).collect();
                    ins[port] = types[x];
                    retype(&nodes[c].kind, &ins, actions) == Some(types[c])
                })
                .collect();
            let to = pick(&alts, r)?;
            nodes[c].inputs[port] = NodeId(to);
            Some((g.with_nodes(nodes), Mutation::Rewire { node: c, port, from, to }))
        }
        2 => {
            let cands: Vec<usize> = ids.iter().copied().filter(|&i| !nodes[i].inputs.is_empty()).collect();
            let c = pick(&cands, r)?;
            let port = r.random_range(0..nodes[c].inputs.len());
            let src = nodes[c].inputs[port];
            let want = types[src.0];
            let desc = descendants(g, NodeId(c));
            let pool: Vec<usize> =
                ids.iter().copied().filter(|&x| !desc[x] && !matches!(nodes[x].kind, NodeKind::Output)).collect();
            let ops: Vec<OpId> = registry.ops().collect();
            for _ in 0..20 {
                let op = pick(&ops, r)?;
                let slot = r.random_range(0..op.arity());
                let mut extra: Vec<Node> = Vec::new();
                let mut ins = Vec::with_capacity(op.arity());
                for p in 0..op.arity() {
                    if p == slot {
                        ins.push(src);
                    } else if r.random_bool(0.3) {
                        extra.push(Node { kind: NodeKind::Constant { value: random_constant(r), label: None }, inputs: Vec::new() });
                        ins.push(NodeId(nodes.len() + extra.len() - 1));
                    } else {
                        ins.push(NodeId(pick(&pool, r)?));
                    }
                }
                let its: Vec<PortType> =
                    ins.iter().map(|s| if s.0 < types.len() { types[s.0] } else { PortType::R }).collect();
                if ops::infer(op, &its, actions) != Some(want) {
                    continue;
                }
                nodes.extend(extra);
                nodes.push(Node { kind: NodeKind::Operation { op }, inputs: ins });
                let new_id = nodes.len() - 1;
                nodes[c].inputs[port] = NodeId(new_id);
                return Some((g.with_nodes(nodes), Mutation::InsertOp { op, before: c, port }));
            }
            None
        }
        3 => {
            let cands: Vec<usize> = ids.iter().copied().filter(|&i| !matches!(nodes[i].kind, NodeKind::Output)).collect();
            let n = pick(&cands, r)?;
            let desc = descendants(g, NodeId(n));
            let own: Vec<usize> = nodes[n].inputs.iter().map(|s| s.0).filter(|&s| types[s] == types[n]).collect();
            let others: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&x| !desc[x] && types[x] == types[n] && !matches!(nodes[x].kind, NodeKind::Output))
                .collect();
            let to = pick(&own, r).or_else(|| pick(&others, r))?;
            for node in nodes.iter_mut() {
                for s in node.inputs.iter_mut() {
                    if s.0 == n {
                        *s = NodeId(to);
                    }
                }
            }
            Some((g.with_nodes(nodes), Mutation::DeleteNode { node: n }))
        }
        _ => {
            let cands: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&i| matches!(nodes[i].kind, NodeKind::Constant { label: None, .. }))
                .collect();
            let n = pick(&cands, r)?;
            let NodeKind::Constant { value: from, .. } = nodes[n].kind else { return None };
            let to = from * r.random_range(0.5..2.0);
            if to == from {
                return None;
            }
            nodes[n].kind = NodeKind::Constant { value: to, label: None };
            Some((g.with_nodes(nodes), Mutation::PerturbConstant { node: n, from, to }))
        }
    }
}

/// Number of mutation kinds, drawn uniformly.
pub const MUTATION_KINDS: usize = 5;

/// Draws of an inapplicable mutation kind allowed per attempt.
const DRAWS_PER_ATTEMPT: usize = 50;

/// Mutates one graph of `parent`, retrying up to `retries` times until the
/// child validates, still feeds its loss target, and differs from the
/// parent graph. An attempt is one candidate child; drawing a kind that
/// does not apply to the graph (say, perturbing a constant in a graph
/// without constants) redraws instead of spending an attempt.
pub fn mutate(parent: &AlgorithmSpec, registry: &OpRegistry, r: &mut Rng, retries: usize) -> Result<Child, EvolutionError> {
    if parent.losses.is_empty() {
        return Err(EvolutionError::MutationExhausted { attempts: 0 });
    }
    for attempt in 1..=retries {
        let loss = r.random_range(0..parent.losses.len());
        let g = &parent.losses[loss].graph;
        let drawn = (0..DRAWS_PER_ATTEMPT).find_map(|_| {
            let kind = r.random_range(0..MUTATION_KINDS);
            try_mutation(g, kind, registry, r)
        });
        let Some((child, mutation)) = drawn else { continue };
        let child = child.prune_dead();
        if child.len() > MAX_MUTANT_NODES || child.nodes() == g.nodes() || !acceptable(&child, registry) {
            continue;
        }
        return Ok(Child { spec: parent.with_graph(loss, child), loss, mutation, attempts: attempt });
    }
    Err(EvolutionError::MutationExhausted { attempts: retries })
}

/// Picks `t` distinct individuals uniformly and returns the index of the
/// best: highest score, then younger (larger birth), then lower id.
pub fn tournament_select(population: &[Individual], t: usize, r: &mut Rng) -> usize {
    assert!(!population.is_empty() && t >= 1 && t <= population.len(), "invalid tournament");
    let sample = index::sample(r, population.len(), t);
    let mut best = sample.index(0);
    for i in sample.iter().skip(1) {
        let (a, b) = (&population[i], &population[best]);
        let better = a.rank_score() > b.rank_score()
            || (a.rank_score() == b.rank_score() && (a.birth > b.birth || (a.birth == b.birth && a.id < b.id)));
        if better {
            best = i;
        }
    }
    best
}

/// Index of the oldest individual (minimum birth, then lowest id).
pub fn oldest(population: &[Individual]) -> Option<usize> {
    (0..population.len()).min_by_key(|&i| (population[i].birth, population[i].id))
}

/// Resolves warm-start names to reference specs.
pub fn warm_start_specs(cfg: &EvolutionConfig) -> Result<Vec<AlgorithmSpec>, EvolutionError> {
    cfg.warm_start
        .iter()
        .map(|name| {
            let spec = reference::build(name).map_err(|_| EvolutionError::InvalidWarmStart(name.clone()))?;
            let registry = OpRegistry::default();
            if spec.graphs().all(|g| validate(g, &registry).ok) {
                Ok(spec)
            } else {
                Err(EvolutionError::InvalidWarmStart(name.clone()))
            }
        })
        .collect()
}

/// Wraps a single loss graph into the algorithm named by its metadata
/// (DDQN by default), replacing the loss with the same name or target.
pub fn spec_from_graph(g: &Graph) -> Result<AlgorithmSpec, EvolutionError> {
    let alg = g.metadata.get(meta::ALGORITHM).map(String::as_str).unwrap_or("ddqn");
    let actions = g.action_space();
    let opts = reference::BuildOptions { actions: Some(actions), ..Default::default() };
    let template = reference::build_with(alg, opts)
        .or_else(|_| reference::build(alg))
        .map_err(|_| EvolutionError::InvalidWarmStart(g.name.clone()))?;
    if template.actions != actions {
        return Err(EvolutionError::InvalidWarmStart(g.name.clone()));
    }
    let idx = template
        .losses
        .iter()
        .position(|l| l.graph.name == g.name)
        .or_else(|| template.losses.iter().position(|l| l.graph.loss_target == g.loss_target))
        .unwrap_or(0);
    if !validate(g, &OpRegistry::default()).ok {
        return Err(EvolutionError::InvalidWarmStart(g.name.clone()));
    }
    Ok(template.with_graph(idx, g.clone()))
}

/// One line of the run history.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IterationRecord {
    pub iteration: u64,
    pub parent: u64,
    pub child: Option<u64>,
    pub mutation: Option<String>,
    pub hurdle_passed: Option<bool>,
    pub hurdle_score: Option<f64>,
    pub score: Option<f64>,
    pub status: Option<Status>,
    pub inserted: bool,
    pub removed: Option<u64>,
    pub removed_birth: Option<u64>,
    pub best_score: f64,
    pub population_size: usize,
    pub error: Option<String>,
}

/// Final state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionRun {
    pub initial: Vec<Individual>,
    pub population: Vec<Individual>,
    pub best: Individual,
    pub history: Vec<IterationRecord>,
}

/// Builds and scores the initial population: warm starts first, then random
/// graphs on the first warm start's template (DDQN without warm starts).
pub fn init_population(
    cfg: &EvolutionConfig,
    warm: &[AlgorithmSpec],
    registry: &OpRegistry,
    evaluator: &dyn Evaluator,
) -> Result<Vec<Individual>, EvolutionError> {
    cfg.check()?;
    if warm.len() > cfg.population {
        return Err(EvolutionError::InvalidConfig("more warm starts than population slots".into()));
    }
    let template = match warm.first() {
        Some(s) => s.clone(),
        None => reference::build("ddqn").map_err(|e| EvolutionError::InvalidWarmStart(e.to_string()))?,
    };
    let ctx = GraphContext::for_spec(&template, 0);
    let mut specs: Vec<AlgorithmSpec> = warm.to_vec();
    let mut r = rng::rng_from(&[cfg.seed, rng::hash_str("init")]);
    while specs.len() < cfg.population {
        let name = format!("random_{}", specs.len());
        let g = random_graph(&ctx, registry, &mut r, &name)?;
        specs.push(template.with_graph(0, g));
    }
    let jobs: Vec<(&AlgorithmSpec, u64)> =
        specs.iter().enumerate().map(|(i, s)| (s, candidate_seed(cfg.seed, i as u64))).collect();
    let results = evaluator.assess(&jobs, false);
    Ok(specs
        .into_iter()
        .zip(results)
        .enumerate()
        .map(|(i, (spec, a))| Individual {
            id: i as u64,
            spec,
            score: a.score(),
            birth: 0,
            parent: None,
            status: a.status(),
        })
        .collect())
}

pub fn candidate_seed(run_seed: u64, id: u64) -> u64 {
    rng::derive_seed(&[run_seed, rng::hash_str("candidate"), id])
}

fn best_of(pop: &[Individual]) -> Option<&Individual> {
    pop.iter().fold(None, |best: Option<&Individual>, x| match best {
        Some(b) if b.rank_score() >= x.rank_score() => Some(b),
        _ => Some(x),
    })
}

/// Runs `cfg.iterations` rounds of select, mutate, hurdle, score, insert
/// and age out. `observer` sees every record with the population after
/// that iteration.
pub fn evolve(
    cfg: &EvolutionConfig,
    warm: &[AlgorithmSpec],
    registry: &OpRegistry,
    evaluator: &dyn Evaluator,
    observer: &mut dyn FnMut(&IterationRecord, &[Individual]),
) -> Result<EvolutionRun, EvolutionError> {
    let initial = init_population(cfg, warm, registry, evaluator)?;
    let mut population = initial.clone();
    let mut best = best_of(&population).cloned().expect("population is non-empty");
    let mut next_id = population.len() as u64;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 1..=cfg.iterations as u64 {
        let mut r = rng::rng_from(&[cfg.seed, rng::hash_str("iteration"), it]);
        let p = tournament_select(&population, cfg.tournament, &mut r);
        let parent = &population[p];
        let mut rec = IterationRecord {
            iteration: it,
            parent: parent.id,
            child: None,
            mutation: None,
            hurdle_passed: None,
            hurdle_score: None,
            score: None,
            status: None,
            inserted: false,
            removed: None,
            removed_birth: None,
            best_score: best.rank_score(),
            population_size: population.len(),
            error: None,
        };
        match mutate(&parent.spec, registry, &mut r, cfg.mutation_retries) {
            Err(e) => {
                log::info!("iteration {it}: {e}");
                rec.error = Some(e.to_string());
            }
            Ok(child) => {
                let id = next_id;
                next_id += 1;
                let parent_id = parent.id;
                rec.child = Some(id);
                rec.mutation = Some(child.mutation.to_string());
                let a = evaluator.assess(&[(&child.spec, candidate_seed(cfg.seed, id))], true).remove(0);
                rec.hurdle_passed = Some(a.passed_hurdle);
                rec.hurdle_score = a.hurdle_score;
                rec.status = Some(a.status());
                rec.score = a.score();
                if a.status() == Status::Scored {
                    let ind = Individual { id, spec: child.spec, score: a.score(), birth: it, parent: Some(parent_id), status: Status::Scored };
                    if ind.rank_score() > best.rank_score() {
                        best = ind.clone();
                    }
                    population.push(ind);
                    rec.inserted = true;
                    let old = oldest(&population).expect("non-empty");
                    let gone = population.remove(old);
                    rec.removed = Some(gone.id);
                    rec.removed_birth = Some(gone.birth);
                }
            }
        }
        rec.best_score = best.rank_score();
        rec.population_size = population.len();
        observer(&rec, &population);
        history.push(rec);
    }
    Ok(EvolutionRun { initial, population, best, history })
}

/// Collects the distinct store keys a set of graphs uses.
pub fn store_keys(spec: &AlgorithmSpec) -> BTreeSet<String> {
    spec.store_signatures().into_iter().map(|(k, _)| k).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ddqn() -> AlgorithmSpec {
        reference::build("ddqn").unwrap()
    }

    fn ind(id: u64, score: Option<f64>, birth: u64) -> Individual {
        Individual {
            id,
            spec: ddqn(),
            score,
            birth,
            parent: None,
            status: if score.is_some() { Status::Scored } else { Status::FailedEval },
        }
    }

    /// Scores by a pure function of the graph, so tests run instantly.
    struct Fake;

    impl Evaluator for Fake {
        fn assess(&self, jobs: &[(&AlgorithmSpec, u64)], gate: bool) -> Vec<Assessment> {
            jobs.iter()
                .map(|(spec, seed)| {
                    let n = spec.losses[0].graph.len() as f64;
                    let passed = !gate || seed % 4 != 0;
                    Assessment {
                        hurdle_score: gate.then_some(0.7),
                        passed_hurdle: passed,
                        per_env: vec![EnvScore { env: "fake".into(), score: 1.0 / n, diagnostic: None }],
                        failed: false,
                    }
                })
                .collect()
        }
    }

    #[test]
    fn replace_square_with_abs_is_valid() {
        let g = ddqn().losses[0].graph.clone();
        let sq = g.ids().find(|&i| g.node(i).kind == NodeKind::Operation { op: OpId::Square }).unwrap();
        let mut nodes = g.nodes().to_vec();
        nodes[sq.0].kind = NodeKind::Operation { op: OpId::Abs };
        assert!(acceptable(&g.with_nodes(nodes), &OpRegistry::default()));
    }

    #[test]
    fn mutations_validate_and_differ() {
        let parent = ddqn();
        let registry = OpRegistry::default();
        let mut r = rng::rng_from(&[1]);
        let mut kinds = BTreeSet::new();
        for _ in 0..300 {
            let child = mutate(&parent, &registry, &mut r, 20).unwrap();
            assert!(acceptable(&child.spec.losses[0].graph, &registry));
            assert_ne!(child.spec.losses[0].graph.nodes(), parent.losses[0].graph.nodes());
            kinds.insert(child.mutation.to_string().split(' ').next().unwrap().to_string());
        }
        // DDQN has no free constants, but insertions add some later on
        assert!(kinds.len() >= 4, "{kinds:?}");
    }

    #[test]
    fn zero_retries_exhaust() {
        let mut r = rng::rng_from(&[0]);
        let e = mutate(&ddqn(), &OpRegistry::default(), &mut r, 0);
        assert_eq!(e, Err(EvolutionError::MutationExhausted { attempts: 0 }));
    }

    #[test]
    fn random_graphs_respect_bounds() {
        let spec = ddqn();
        let ctx = GraphContext::for_spec(&spec, 0);
        let registry = OpRegistry::default();
        let mut r = rng::rng_from(&[2]);
        for i in 0..200 {
            let g = random_graph(&ctx, &registry, &mut r, "g").unwrap();
            assert!(g.len() <= MAX_RANDOM_NODES, "{i}: {}", g.len());
            assert!(depth_of(&g) <= MAX_RANDOM_DEPTH);
            assert!(acceptable(&g, &registry));
            assert!(g.nodes().iter().any(|n| matches!(n.kind, NodeKind::Input { .. })));
        }
    }

    #[test]
    fn tournament_edges() {
        let pop = vec![ind(0, Some(1.0), 0), ind(1, Some(3.0), 0), ind(2, None, 0), ind(3, Some(3.0), 2)];
        let mut r = rng::rng_from(&[0]);
        // full tournament: best score, then younger
        assert_eq!(tournament_select(&pop, 4, &mut r), 3);
        let mut a = rng::rng_from(&[9]);
        let mut b = rng::rng_from(&[9]);
        for _ in 0..20 {
            assert_eq!(tournament_select(&pop, 2, &mut a), tournament_select(&pop, 2, &mut b));
        }
        let ties = vec![ind(5, Some(1.0), 1), ind(4, Some(1.0), 1)];
        assert_eq!(tournament_select(&ties, 2, &mut r), 1);
    }

    #[test]
    fn oldest_breaks_ties_by_id() {
        let pop = vec![ind(7, None, 3), ind(4, None, 1), ind(2, None, 1)];
        assert_eq!(oldest(&pop), Some(2));
    }

    #[test]
    fn warm_start_population() {
        let cfg = EvolutionConfig { population: 1, tournament: 1, ..EvolutionConfig::default() };
        let warm = warm_start_specs(&cfg).unwrap();
        let pop = init_population(&cfg, &warm, &OpRegistry::default(), &Fake).unwrap();
        assert_eq!(pop.len(), 1);
        assert_eq!(pop[0].spec, ddqn());

        let cfg = EvolutionConfig { population: 10, ..EvolutionConfig::default() };
        let pop = init_population(&cfg, &warm, &OpRegistry::default(), &Fake).unwrap();
        assert_eq!(pop.len(), 10);
        assert_eq!(pop[0].spec, ddqn());
        assert!(pop[1..].iter().all(|i| i.spec.losses[0].graph.name.starts_with("random_")));
    }

    #[test]
    fn bad_warm_start() {
        let cfg = EvolutionConfig { warm_start: vec!["nope".into()], ..EvolutionConfig::default() };
        assert!(matches!(warm_start_specs(&cfg), Err(EvolutionError::InvalidWarmStart(_))));
    }

    #[test]
    fn evolve_invariants_with_fake_scores() {
        let cfg = EvolutionConfig { population: 6, tournament: 3, iterations: 200, seed: 4, ..EvolutionConfig::default() };
        let warm = warm_start_specs(&cfg).unwrap();
        let mut last_best = f64::NEG_INFINITY;
        let run = evolve(&cfg, &warm, &OpRegistry::default(), &Fake, &mut |rec, pop| {
            assert_eq!(pop.len(), 6);
            assert!(rec.best_score >= last_best);
            last_best = rec.best_score;
            if let Some(b) = rec.removed_birth {
                assert!(pop.iter().all(|i| i.birth >= b));
            }
        })
        .unwrap();
        assert_eq!(run.history.len(), 200);
        assert!(run.history.iter().any(|h| h.hurdle_passed == Some(false) && !h.inserted));
        let again = evolve(&cfg, &warm, &OpRegistry::default(), &Fake, &mut |_, _| {}).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn zero_iterations_keep_initial_population() {
        let cfg = EvolutionConfig { population: 3, iterations: 0, ..EvolutionConfig::default() };
        let warm = warm_start_specs(&cfg).unwrap();
        let run = evolve(&cfg, &warm, &OpRegistry::default(), &Fake, &mut |_, _| {}).unwrap();
        assert_eq!(run.population, run.initial);
    }

    #[test]
    fn task_parsing() {
        let t = EnvTask::parse("cartpole-short").unwrap();
        assert_eq!(t.env, "cartpole");
        assert_eq!(EnvTask::parse("cartpole:300").unwrap().budget.total_steps, 300);
        assert!(EnvTask::parse("mountaincar").is_err());
    }

    #[test]
    fn hurdle_gate() {
        let cfg = EvolutionConfig::default();
        let scorer = Scorer::new(&cfg, trainer::algorithm_defaults("ddqn").0).unwrap();
        let (_, passed) = scorer.hurdle(&ddqn(), 0);
        assert!(passed);

        // a loss that never changes the network leaves the arms tied
        let mut b = crate::graph::GraphBuilder::new("flat", "theta").action_space(ActionKind::Discrete);
        let s = b.input("s_t");
        let q = b.param("theta", Signature::StateToList, &[s]);
        let m = b.op(OpId::MaxList, &[q]);
        let zero = b.constant(0.0);
        let l = b.op(OpId::Multiply, &[zero, m]);
        let flat = ddqn().with_graph(0, b.output(l));
        assert!(!scorer.hurdle(&flat, 0).1);

        let open = Scorer { hurdle_alpha: 0.0, ..scorer };
        assert!(open.hurdle(&flat, 0).1);
    }
}
