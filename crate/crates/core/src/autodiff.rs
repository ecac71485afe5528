//! Forward interpretation of a loss graph and the reverse sweep over it.
//!
//! [`evaluate_loss`] walks the graph in topological order, recording every
//! node value on a [`Tape`]; [`backward`] then pushes cotangents from the
//! output back to the `Parameter` nodes whose store keys are targets. Stores
//! that are not targets (target networks, old policies) are constants.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::envs::{ActionSpace, TransitionBatch};
use crate::graph::{self, ActionKind, DType, Graph, GraphError, NodeId, NodeKind, Signature};
use crate::hyper::{self, HyperParams};
use crate::nn::{ActionEncoding, NetCache, NnError, ParameterStore, StoreGrads};
use crate::ops::{self, OpError};
use crate::rng;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("no binding for `{0}`")]
    MissingBinding(String),
    #[error("binding `{symbol}` has type {found}, expected {expected}")]
    BindingMismatch { symbol: String, expected: DType, found: DType },
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("no differentiable path from the loss to `{0}`")]
    NonDifferentiablePath(String),
    #[error("node {node}: {source}")]
    Op { node: NodeId, source: OpError },
    #[error("node {node}: {source}")]
    Nn { node: NodeId, source: NnError },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph has no output node")]
    NoOutput,
}

/// Values bound to a graph's input symbols.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bindings {
    values: BTreeMap<String, Value>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, symbol: impl Into<String>, value: Value) -> &mut Self {
        self.values.insert(symbol.into(), value);
        self
    }

    pub fn with(mut self, symbol: impl Into<String>, value: Value) -> Self {
        self.set(symbol, value);
        self
    }

    pub fn get(&self, symbol: &str) -> Option<&Value> {
        self.values.get(symbol)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.values.contains_key(symbol)
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Binds the transition fields and the scalar hyperparameters.
    /// `gamma` and `lambda` are bound unbatched.
    pub fn from_batch(batch: &TransitionBatch, hp: &HyperParams) -> Self {
        let b = batch.len();
        let mut out = Bindings::new();
        out.set("s_t", Value::new(DType::S, Some(b), batch.state_dim, batch.s_t.clone()));
        out.set("s_tp1", Value::new(DType::S, Some(b), batch.state_dim, batch.s_tp1.clone()));
        out.set("a_t", Value::new(DType::Z, Some(b), batch.action_width, batch.a_t.clone()));
        out.set("r_t", Value::scalars(batch.r_t.clone()));
        out.set("d_t", Value::scalars(batch.d_t.clone()));
        out.set("gamma", Value::scalar(hp.gamma));
        out.set("lambda", Value::scalar(hp.lambda));
        out
    }
}

/// Counter-based source of the Gaussian noise inputs `xi ~ N(0, I)` and
/// `eps ~ N(0, sigma)`. One draw per evaluation, reproducible from
/// `(seed, stream, step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseContext {
    pub seed: u64,
    pub stream: u64,
    pub step: u64,
}

impl NoiseContext {
    pub fn new(seed: u64, stream: u64, step: u64) -> Self {
        NoiseContext { seed, stream, step }
    }

    /// `rows x dim` standard normal draws scaled by `sigma` for `symbol`.
    pub fn draw(&self, symbol: &str, rows: usize, dim: usize, sigma: f64) -> Vec<f64> {
        let mut r = rng::rng_from(&[self.seed, self.stream, self.step, rng::hash_str(symbol)]);
        (0..rows * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut r);
                sigma * z
            })
            .collect()
    }
}

/// Recorded forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    order: Vec<NodeId>,
    values: Vec<Option<Value>>,
    caches: BTreeMap<NodeId, NetCache>,
    /// Cotangent accumulators, filled by [`backward`].
    pub cotangents: Vec<Option<Vec<f64>>>,
    pub loss: f64,
    actions: ActionKind,
    output: NodeId,
}

impl Tape {
    pub fn value(&self, id: NodeId) -> Option<&Value> {
        self.values.get(id.0).and_then(Option::as_ref)
    }
}

fn bind_noise(
    g: &Graph,
    bindings: &Bindings,
    noise: Option<&NoiseContext>,
    hp: &HyperParams,
    actions: &ActionSpace,
    used: &BTreeSet<String>,
) -> Bindings {
    let mut out = Bindings::new();
    let Some(ctx) = noise else { return out };
    if g.action_space() != ActionKind::Continuous {
        return out;
    }
    let rows = bindings.get("s_t").or_else(|| bindings.get("s_tp1")).and_then(|v| v.batch);
    let dim = actions.width();
    for (symbol, sigma) in [("xi", 1.0), ("eps", hp.td3_sigma)] {
        if used.contains(symbol) && !bindings.contains(symbol) {
            let data = ctx.draw(symbol, rows.unwrap_or(1), dim, sigma);
            out.set(symbol, Value::new(DType::ListR, rows, dim, data));
        }
    }
    out
}

/// Interprets `g` and returns the loss (the output value, mean-reduced over
/// the batch) together with the tape for [`backward`].
///
/// Noise inputs `xi` and `eps` that the graph uses but `bindings` lacks are
/// drawn from `noise`. Labeled constants resolve against `hp` and the
/// action bounds.
pub fn evaluate_loss(
    g: &Graph,
    store: &ParameterStore,
    bindings: &Bindings,
    hp: &HyperParams,
    actions: &ActionSpace,
    noise: Option<&NoiseContext>,
) -> Result<(f64, Tape), AutodiffError> {
    let order = graph::topo_order(g)?;
    let output = g.output().ok_or(AutodiffError::NoOutput)?;
    let kind = g.action_space();
    let live = graph::live_nodes(g);
    let used: BTreeSet<String> = graph::free_symbols(g).inputs;
    let drawn = bind_noise(g, bindings, noise, hp, actions, &used);
    let mut values: Vec<Option<Value>> = vec![None; g.len()];
    let mut caches = BTreeMap::new();
    let live_order: Vec<NodeId> = order.into_iter().filter(|id| live[id.0]).collect();
    for &id in &live_order {
        let node = g.node(id);
        let value = match &node.kind {
            NodeKind::Input { symbol } => {
                let v = bindings
                    .get(symbol)
                    .or_else(|| drawn.get(symbol))
                    .ok_or_else(|| AutodiffError::MissingBinding(symbol.clone()))?;
                if let Some(expected) = declared_dtype(g, symbol) {
                    // a discrete index or continuous vector may both be bound to Z
                    let compatible = v.dtype == expected
                        || (expected == DType::ListR && v.dtype == DType::Z)
                        || (expected == DType::Z && v.dtype == DType::ListR);
                    if !compatible {
                        return Err(AutodiffError::BindingMismatch {
                            symbol: symbol.clone(),
                            expected,
                            found: v.dtype,
                        });
                    }
                }
                v.clone()
            }
            NodeKind::Constant { value, label } => match label {
                Some(label) => Value::scalar(
                    hyper::resolve_label(label, hp, actions)
                        .ok_or_else(|| AutodiffError::MissingBinding(label.clone()))?,
                ),
                None => Value::scalar(*value),
            },
            NodeKind::Parameter { store_key, .. } => {
                let net = store.get(store_key).ok_or_else(|| AutodiffError::MissingBinding(store_key.clone()))?;
                let ins: Vec<&Value> = node.inputs.iter().map(|s| values[s.0].as_ref().expect("topological")).collect();
                let cache = net.forward(&ins).map_err(|source| AutodiffError::Nn { node: id, source })?;
                let v = cache.output.clone();
                caches.insert(id, cache);
                v
            }
            NodeKind::Operation { op } => {
                let ins: Vec<&Value> = node.inputs.iter().map(|s| values[s.0].as_ref().expect("topological")).collect();
                ops::eval_primitive(*op, &ins, kind).map_err(|source| AutodiffError::Op { node: id, source })?
            }
            NodeKind::Output => values[node.inputs[0].0].clone().expect("topological"),
        };
        values[id.0] = Some(value);
    }
    let out = values[output.0].as_ref().expect("output evaluated");
    let loss = out.data.iter().sum::<f64>() / out.data.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(AutodiffError::NonFiniteLoss(loss));
    }
    let n = g.len();
    Ok((
        loss,
        Tape { order: live_order, values, caches, cotangents: vec![None; n], loss, actions: kind, output },
    ))
}

fn declared_dtype(g: &Graph, symbol: &str) -> Option<DType> {
    graph::input_type(symbol, g.action_space()).map(|t| t.dtype).or_else(|| {
        g.extra_inputs().into_iter().find(|(name, _)| name == symbol).map(|(_, d)| d)
    })
}

/// Which inputs of a node carry gradient.
fn port_differentiable(g: &Graph, id: NodeId, port: usize, actions: ActionKind, store: &ParameterStore) -> bool {
    match &g.node(id).kind {
        NodeKind::Operation { op } => op.differentiable_port(port, actions),
        NodeKind::Parameter { store_key, signature } => {
            *signature == Signature::StateActionToScalar
                && port == 1
                && matches!(
                    store.get(store_key).and_then(|n| n.action_encoding),
                    Some(ActionEncoding::Raw(_))
                )
        }
        NodeKind::Output => true,
        _ => false,
    }
}

/// Reverse sweep. Returns flat weight gradients for every store key in
/// `targets`; all other stores are held constant.
pub fn backward(
    g: &Graph,
    store: &ParameterStore,
    tape: &mut Tape,
    targets: &[&str],
) -> Result<StoreGrads, AutodiffError> {
    let targets: BTreeSet<&str> = targets.iter().copied().collect();
    let actions = tape.actions;
    // forward pass over the tape: does a node depend on a target weight
    // through differentiable ports only?
    let mut needs = vec![false; g.len()];
    for &id in &tape.order {
        let node = g.node(id);
        let own = matches!(&node.kind, NodeKind::Parameter { store_key, .. } if targets.contains(store_key.as_str()));
        let through = node
            .inputs
            .iter()
            .enumerate()
            .any(|(p, src)| needs[src.0] && port_differentiable(g, id, p, actions, store));
        needs[id.0] = own || through;
    }
    let mut grads = store.zero_grads(targets.iter());
    let mut reached: BTreeSet<String> = BTreeSet::new();
    let out_val = tape.values[tape.output.0].as_ref().expect("output evaluated");
    let count = out_val.data.len().max(1) as f64;
    for c in tape.cotangents.iter_mut() {
        *c = None;
    }
    tape.cotangents[tape.output.0] = Some(vec![1.0 / count; out_val.data.len()]);

    for &id in tape.order.iter().rev() {
        if !needs[id.0] {
            continue;
        }
        let Some(cot) = tape.cotangents[id.0].take() else { continue };
        let node = g.node(id);
        match &node.kind {
            NodeKind::Output => accumulate(&mut tape.cotangents, node.inputs[0], &cot),
            NodeKind::Operation { op } => {
                let ins: Vec<&Value> =
                    node.inputs.iter().map(|s| tape.values[s.0].as_ref().expect("evaluated")).collect();
                let out = tape.values[id.0].as_ref().expect("evaluated");
                let port_grads =
                    ops::vjp(*op, &ins, out, &cot, actions).map_err(|source| AutodiffError::Op { node: id, source })?;
                for (p, (src, pg)) in node.inputs.iter().zip(port_grads).enumerate() {
                    if let Some(pg) = pg {
                        if needs[src.0] && op.differentiable_port(p, actions) {
                            accumulate(&mut tape.cotangents, *src, &pg);
                        }
                    }
                }
            }
            NodeKind::Parameter { store_key, .. } => {
                let net = store.get(store_key).expect("evaluated with this store");
                let cache = &tape.caches[&id];
                let is_target = targets.contains(store_key.as_str());
                let action_port = node.inputs.get(1).copied().filter(|src| {
                    needs[src.0] && port_differentiable(g, id, 1, actions, store)
                });
                let gin = net.backward(
                    cache,
                    &cot,
                    if is_target { grads.get_mut(store_key.as_str()).map(|v| v.as_mut_slice()) } else { None },
                    action_port.is_some(),
                );
                if is_target {
                    reached.insert(store_key.clone());
                }
                if let (Some(src), Some(gin)) = (action_port, gin) {
                    let state_dim = tape.values[node.inputs[0].0].as_ref().expect("evaluated").width;
                    let action = tape.values[src.0].as_ref().expect("evaluated");
                    let width = net.input_width();
                    let rows = gin.len() / width.max(1);
                    let mut ga = vec![0.0; action.data.len()];
                    for r in 0..rows {
                        for j in 0..action.width {
                            ga[action.offset(r, j)] += gin[r * width + state_dim + j];
                        }
                    }
                    accumulate(&mut tape.cotangents, src, &ga);
                }
            }
            NodeKind::Input { .. } | NodeKind::Constant { .. } => {}
        }
    }
    let live = graph::live_nodes(g);
    for key in &targets {
        let present = g.ids().any(|id| {
            live[id.0] && matches!(&g.node(id).kind, NodeKind::Parameter { store_key, .. } if store_key == key)
        });
        if present && !reached.contains(*key) {
            return Err(AutodiffError::NonDifferentiablePath(key.to_string()));
        }
    }
    Ok(grads)
}

fn accumulate(cots: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut cots[id.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Forward plus backward for the graph's own `loss_target`.
pub fn loss_and_grads(
    g: &Graph,
    store: &ParameterStore,
    bindings: &Bindings,
    hp: &HyperParams,
    actions: &ActionSpace,
    noise: Option<&NoiseContext>,
) -> Result<(f64, StoreGrads), AutodiffError> {
    let (loss, mut tape) = evaluate_loss(g, store, bindings, hp, actions, noise)?;
    let grads = backward(g, store, &mut tape, &[g.loss_target.as_str()])?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::nn::Network;
    use crate::ops::OpId;

    fn scalar_store(key: &str, w: f64) -> ParameterStore {
        // S -> R with one state feature fixed at 1: output = w
        let mut s = ParameterStore::new();
        s.insert(key, Network::affine(Signature::StateToScalar, 1, vec![w], vec![0.0], None).unwrap());
        s
    }

    fn one_state() -> Bindings {
        Bindings::new().with("s_t", Value::new(DType::S, None, 1, vec![1.0]))
    }

    #[test]
    fn square_of_weight() {
        let mut b = GraphBuilder::new("sq", "w");
        let s = b.input("s_t");
        let w = b.param("w", Signature::StateToScalar, &[s]);
        let sq = b.op(OpId::Square, &[w]);
        let g = b.output(sq);
        let store = scalar_store("w", 3.0);
        let hp = HyperParams::default();
        let acts = ActionSpace::Discrete(2);
        let (loss, mut tape) = evaluate_loss(&g, &store, &one_state(), &hp, &acts, None).unwrap();
        assert_eq!(loss, 9.0);
        let grads = backward(&g, &store, &mut tape, &["w"]).unwrap();
        // d/dw and d/db of (w + b)^2 at w = 3, b = 0
        assert_eq!(grads["w"], vec![6.0, 6.0]);
    }

    #[test]
    fn constant_output_is_zero_loss() {
        let mut b = GraphBuilder::new("zero", "w");
        let c = b.constant(0.0);
        let g = b.output(c);
        let (loss, _) = evaluate_loss(
            &g,
            &ParameterStore::new(),
            &Bindings::new(),
            &HyperParams::default(),
            &ActionSpace::Discrete(2),
            None,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn missing_binding_is_reported() {
        let mut b = GraphBuilder::new("r", "w");
        let r = b.input("r_t");
        let g = b.output(r);
        let err = evaluate_loss(
            &g,
            &ParameterStore::new(),
            &Bindings::new(),
            &HyperParams::default(),
            &ActionSpace::Discrete(2),
            None,
        )
        .unwrap_err();
        assert_eq!(err, AutodiffError::MissingBinding("r_t".into()));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut b = GraphBuilder::new("exp", "w");
        let c = b.constant(1000.0);
        let e = b.op(OpId::Exp, &[c]);
        let g = b.output(e);
        let err = evaluate_loss(
            &g,
            &ParameterStore::new(),
            &Bindings::new(),
            &HyperParams::default(),
            &ActionSpace::Discrete(2),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteLoss(_)));
    }

    #[test]
    fn shared_store_gradients_add_up() {
        // w * w through two parameter nodes with the same key: d/dw = 2w
        let mut b = GraphBuilder::new("shared", "w");
        let s = b.input("s_t");
        let p1 = b.param("w", Signature::StateToScalar, &[s]);
        let p2 = b.param("w", Signature::StateToScalar, &[s]);
        let m = b.op(OpId::Multiply, &[p1, p2]);
        let g = b.output(m);
        let store = scalar_store("w", 1.5);
        let (_, mut tape) =
            evaluate_loss(&g, &store, &one_state(), &HyperParams::default(), &ActionSpace::Discrete(2), None)
                .unwrap();
        let grads = backward(&g, &store, &mut tape, &["w"]).unwrap();
        assert_eq!(grads["w"][0], 3.0);
    }

    #[test]
    fn argmax_only_path_is_non_differentiable() {
        let mut b = GraphBuilder::new("argmax", "q");
        let s = b.input("s_t");
        let q = b.param("q", Signature::StateToList, &[s]);
        let a = b.op(OpId::ArgMaxList, &[q]);
        let r = b.input("r_t");
        let sel = b.op(OpId::SelectList, &[q, a]);
        let _ = sel;
        let c = b.op(OpId::Multiply, &[r, r]);
        // loss depends on q only through an index
        let idx_list = b.param("k", Signature::StateToList, &[s]);
        let pick = b.op(OpId::SelectList, &[idx_list, a]);
        let loss = b.op(OpId::Add, &[c, pick]);
        let g = b.output(loss);
        let mut store = ParameterStore::new();
        store.insert("q", Network::affine(Signature::StateToList, 1, vec![1.0, 2.0], vec![0.0, 0.0], None).unwrap());
        store.insert("k", Network::affine(Signature::StateToList, 1, vec![1.0, 2.0], vec![0.0, 0.0], None).unwrap());
        let binds = one_state().with("r_t", Value::scalar(1.0));
        let (_, mut tape) =
            evaluate_loss(&g, &store, &binds, &HyperParams::default(), &ActionSpace::Discrete(2), None).unwrap();
        let err = backward(&g, &store, &mut tape, &["q"]).unwrap_err();
        assert_eq!(err, AutodiffError::NonDifferentiablePath("q".into()));
        assert!(backward(&g, &store, &mut tape, &["k"]).is_ok());
    }

    #[test]
    fn noise_draws_are_reproducible() {
        let ctx = NoiseContext::new(1, 2, 3);
        assert_eq!(ctx.draw("xi", 4, 2, 1.0), ctx.draw("xi", 4, 2, 1.0));
        assert_ne!(ctx.draw("xi", 4, 2, 1.0), NoiseContext::new(1, 2, 4).draw("xi", 4, 2, 1.0));
        assert!(ctx.draw("eps", 3, 1, 0.0).iter().all(|&x| x == 0.0));
    }
}
