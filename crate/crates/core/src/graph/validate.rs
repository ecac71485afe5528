use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use super::{ActionKind, DType, Graph, ListLen, NodeId, NodeKind, PortType};
use crate::hyper;
use crate::ops::{self, OpId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("cycle detected among nodes {0:?}")]
    CycleDetected(Vec<NodeId>),
    #[error("type mismatch at node {0}")]
    TypeMismatch(NodeId),
    #[error("node {node} expects {expected} inputs, has {found}")]
    Arity { node: NodeId, expected: usize, found: usize },
    #[error("node {node} references missing node {missing}")]
    DanglingEdge { node: NodeId, missing: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub ok: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub inferred_types: BTreeMap<NodeId, DType>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Error)
    }

    /// Nodes flagged as not contributing to the output.
    pub fn unused(&self) -> BTreeSet<NodeId> {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Warning && d.message.starts_with("unused"))
            .filter_map(|d| d.node)
            .collect()
    }
}

/// The set of operators a graph may reference. The default registry holds
/// every compiled-in operator; narrower registries let callers restrict a
/// search space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRegistry {
    ops: BTreeSet<OpId>,
}

impl Default for OpRegistry {
    fn default() -> Self {
        OpRegistry { ops: OpId::ALL.into_iter().collect() }
    }
}

impl OpRegistry {
    pub fn with_ops(ops: impl IntoIterator<Item = OpId>) -> Self {
        OpRegistry { ops: ops.into_iter().collect() }
    }

    pub fn contains(&self, op: OpId) -> bool {
        self.ops.contains(&op)
    }

    pub fn ops(&self) -> impl Iterator<Item = OpId> + '_ {
        self.ops.iter().copied()
    }
}

/// Static type of a built-in input symbol.
pub fn input_type(symbol: &str, actions: ActionKind) -> Option<PortType> {
    let continuous = actions == ActionKind::Continuous;
    Some(match symbol {
        "s_t" | "s_tp1" => PortType::S,
        "a_t" => PortType::Z,
        "r_t" | "d_t" | "gamma" | "lambda" | "adv" | "rtg" => PortType::R,
        "xi" | "eps" if continuous => PortType::list(ListLen::ActionDim),
        _ => return None,
    })
}

/// Built-in input symbols, in a fixed order.
pub const INPUT_SYMBOLS: [&str; 11] =
    ["s_t", "a_t", "r_t", "d_t", "s_tp1", "gamma", "lambda", "adv", "rtg", "xi", "eps"];

fn symbol_type(g: &Graph, symbol: &str) -> Option<PortType> {
    input_type(symbol, g.action_space()).or_else(|| {
        g.extra_inputs()
            .into_iter()
            .find(|(name, _)| name == symbol)
            .map(|(_, dtype)| PortType { dtype, len: None })
    })
}

fn check_edges(g: &Graph) -> Result<(), GraphError> {
    for id in g.ids() {
        let node = g.node(id);
        if let Some(&missing) = node.inputs.iter().find(|src| src.0 >= g.len()) {
            return Err(GraphError::DanglingEdge { node: id, missing });
        }
        let expected = node.kind.arity();
        if node.inputs.len() != expected {
            return Err(GraphError::Arity { node: id, expected, found: node.inputs.len() });
        }
    }
    Ok(())
}

/// Topological order with ties broken by ascending node id.
pub fn topo_order(g: &Graph) -> Result<Vec<NodeId>, GraphError> {
    let n = g.len();
    let mut indegree = vec![0usize; n];
    let consumers = g.consumers();
    for node in g.nodes() {
        for src in &node.inputs {
            if src.0 >= n {
                return Err(GraphError::DanglingEdge { node: NodeId(n), missing: *src });
            }
        }
    }
    for (i, node) in g.nodes().iter().enumerate() {
        indegree[i] = node.inputs.len();
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(NodeId(i));
        for &(c, _) in &consumers[i] {
            indegree[c.0] -= 1;
            if indegree[c.0] == 0 {
                ready.push(Reverse(c.0));
            }
        }
    }
    if order.len() < n {
        // Drop stuck nodes that only lie downstream of a cycle.
        let mut stuck: Vec<bool> = indegree.iter().map(|&d| d > 0).collect();
        loop {
            let tail = (0..n).find(|&i| stuck[i] && !consumers[i].iter().any(|(c, _)| stuck[c.0]));
            match tail {
                Some(i) => stuck[i] = false,
                None => break,
            }
        }
        let on_cycle = (0..n).filter(|&i| stuck[i]).map(NodeId).collect();
        return Err(GraphError::CycleDetected(on_cycle));
    }
    Ok(order)
}

/// Nodes with a path to the `Output` node (including the output itself).
pub fn live_nodes(g: &Graph) -> Vec<bool> {
    let mut live = vec![false; g.len()];
    let Some(out) = g.output() else {
        return live;
    };
    let mut stack = vec![out];
    while let Some(id) = stack.pop() {
        if id.0 >= g.len() || live[id.0] {
            continue;
        }
        live[id.0] = true;
        stack.extend(g.node(id).inputs.iter().copied());
    }
    live
}

fn node_type(
    g: &Graph,
    id: NodeId,
    ins: &[PortType],
    actions: ActionKind,
) -> Result<PortType, String> {
    match &g.node(id).kind {
        NodeKind::Input { symbol } => {
            symbol_type(g, symbol).ok_or_else(|| format!("unknown input symbol `{symbol}`"))
        }
        NodeKind::Constant { .. } => Ok(PortType::R),
        NodeKind::Parameter { signature, .. } => {
            let out = signature.output(actions).ok_or_else(|| {
                format!("signature {signature} unavailable for {} actions", actions.as_str())
            })?;
            if ins != signature.inputs() {
                return Err(format!(
                    "signature {signature} applied to ({})",
                    join_types(ins)
                ));
            }
            Ok(out)
        }
        NodeKind::Operation { op } => ops::infer(*op, ins, actions)
            .ok_or_else(|| format!("type mismatch: no {op} overload for ({})", join_types(ins))),
        NodeKind::Output => {
            if ins == [PortType::R] {
                Ok(PortType::R)
            } else {
                Err(format!("output must receive R, got ({})", join_types(ins)))
            }
        }
    }
}

fn join_types(ts: &[PortType]) -> String {
    let parts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
    parts.join(", ")
}

/// Full port types for every node. Fails on the first node (in topological
/// order) with no matching signature.
pub fn infer_port_types(g: &Graph) -> Result<Vec<PortType>, GraphError> {
    check_edges(g)?;
    let order = topo_order(g)?;
    let actions = g.action_space();
    let mut types: Vec<Option<PortType>> = vec![None; g.len()];
    for id in order {
        let ins: Vec<PortType> =
            g.node(id).inputs.iter().map(|src| types[src.0].expect("topological")).collect();
        let t = node_type(g, id, &ins, actions).map_err(|_| GraphError::TypeMismatch(id))?;
        types[id.0] = Some(t);
    }
    Ok(types.into_iter().map(|t| t.expect("all nodes typed")).collect())
}

/// Output data type of every node.
pub fn infer_types(g: &Graph) -> Result<BTreeMap<NodeId, DType>, GraphError> {
    Ok(infer_port_types(g)?.into_iter().enumerate().map(|(i, t)| (NodeId(i), t.dtype)).collect())
}

/// Structural and type checks. Never fails: every problem becomes a
/// diagnostic, and `ok` is false iff any diagnostic is an error.
pub fn validate(g: &Graph, registry: &OpRegistry) -> ValidationReport {
    let mut diags = Vec::new();
    let mut inferred = BTreeMap::new();
    let error = |node: Option<NodeId>, message: String| Diagnostic {
        node,
        severity: Severity::Error,
        message,
    };

    let outputs = g.ids().filter(|&id| matches!(g.node(id).kind, NodeKind::Output)).count();
    if outputs != 1 {
        diags.push(error(None, format!("graph must have exactly one Output node, found {outputs}")));
    }
    if let Some(raw) = g.metadata.get(super::meta::ACTION_SPACE) {
        if ActionKind::parse(raw).is_none() {
            diags.push(error(None, format!("unknown action space `{raw}`")));
        }
    }

    let mut structural_ok = true;
    for id in g.ids() {
        let node = g.node(id);
        for src in &node.inputs {
            if src.0 >= g.len() {
                diags.push(error(Some(id), format!("edge from missing node {src}")));
                structural_ok = false;
            }
        }
        let expected = node.kind.arity();
        if node.inputs.len() != expected {
            diags.push(error(
                Some(id),
                format!("arity: expects {expected} inputs, has {}", node.inputs.len()),
            ));
            structural_ok = false;
        }
        match &node.kind {
            NodeKind::Operation { op } if !registry.contains(*op) => {
                diags.push(error(Some(id), format!("operator {op} not in registry")));
                structural_ok = false;
            }
            NodeKind::Constant { value, label } => {
                if !value.is_finite() {
                    diags.push(error(Some(id), "constant is not finite".into()));
                }
                if let Some(label) = label {
                    if !hyper::is_known_label(label) {
                        diags.push(error(Some(id), format!("unknown constant label `{label}`")));
                    }
                }
            }
            _ => {}
        }
    }

    // Parameter nodes sharing a store key share weights, so they must agree
    // on the network signature.
    let mut signatures = BTreeMap::new();
    for id in g.ids() {
        if let NodeKind::Parameter { store_key, signature } = &g.node(id).kind {
            match signatures.get(store_key) {
                Some(prev) if prev != signature => diags.push(error(
                    Some(id),
                    format!("store `{store_key}` used with signatures {prev} and {signature}"),
                )),
                _ => {
                    signatures.insert(store_key.clone(), *signature);
                }
            }
        }
    }

    if structural_ok {
        match topo_order(g) {
            Err(GraphError::CycleDetected(nodes)) => {
                diags.push(error(nodes.first().copied(), format!("cycle through nodes {}", nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(", "))));
            }
            Err(e) => diags.push(error(None, e.to_string())),
            Ok(order) => {
                let actions = g.action_space();
                let mut types: Vec<Option<PortType>> = vec![None; g.len()];
                for id in order {
                    let ins: Option<Vec<PortType>> =
                        g.node(id).inputs.iter().map(|src| types[src.0]).collect();
                    // Skip nodes downstream of an earlier failure.
                    let Some(ins) = ins else { continue };
                    match node_type(g, id, &ins, actions) {
                        Ok(t) => {
                            types[id.0] = Some(t);
                            inferred.insert(id, t.dtype);
                        }
                        Err(msg) => diags.push(error(Some(id), msg)),
                    }
                }
            }
        }
    }

    let live = live_nodes(g);
    if outputs == 1 {
        for id in g.ids() {
            if !live[id.0] {
                diags.push(Diagnostic {
                    node: Some(id),
                    severity: Severity::Warning,
                    message: "unused: node does not reach the output".into(),
                });
            }
        }
        let targets_loss = g.ids().any(|id| {
            live[id.0]
                && matches!(&g.node(id).kind,
                    NodeKind::Parameter { store_key, .. } if *store_key == g.loss_target)
        });
        if !targets_loss {
            diags.push(Diagnostic {
                node: None,
                severity: Severity::Warning,
                message: format!("loss target `{}` is not referenced by the loss", g.loss_target),
            });
        }
    }

    let ok = !diags.iter().any(|d| d.severity == Severity::Error);
    ValidationReport { ok, diagnostics: diags, inferred_types: inferred }
}

/// Input symbols, parameter store keys and constant labels that the output
/// depends on.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreeSymbols {
    pub inputs: BTreeSet<String>,
    pub stores: BTreeSet<String>,
    pub labels: BTreeSet<String>,
}

impl FreeSymbols {
    /// Inputs and store keys together.
    pub fn bindings(&self) -> BTreeSet<String> {
        self.inputs.union(&self.stores).cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.inputs.contains(name) || self.stores.contains(name) || self.labels.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty() && self.stores.is_empty() && self.labels.is_empty()
    }
}

pub fn free_symbols(g: &Graph) -> FreeSymbols {
    let live = live_nodes(g);
    let mut out = FreeSymbols::default();
    for id in g.ids().filter(|id| live[id.0]) {
        match &g.node(id).kind {
            NodeKind::Input { symbol } => {
                out.inputs.insert(symbol.clone());
            }
            NodeKind::Parameter { store_key, .. } => {
                out.stores.insert(store_key.clone());
            }
            NodeKind::Constant { label: Some(label), .. } => {
                out.labels.insert(label.to_string());
            }
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, Node, Signature};

    fn registry() -> OpRegistry {
        OpRegistry::default()
    }

    #[test]
    fn state_plus_reward_is_a_type_error() {
        let mut b = GraphBuilder::new("bad", "theta");
        let s = b.input("s_t");
        let r = b.input("r_t");
        let add = b.op(OpId::Add, &[s, r]);
        let g = b.output(add);
        let report = validate(&g, &registry());
        assert!(!report.ok);
        assert!(report.errors().any(|d| d.node == Some(add) && d.message.contains("type mismatch")));
    }

    #[test]
    fn two_node_cycle_is_reported() {
        let nodes = vec![
            Node { kind: NodeKind::Operation { op: OpId::Neg }, inputs: vec![NodeId(1)] },
            Node { kind: NodeKind::Operation { op: OpId::Neg }, inputs: vec![NodeId(0)] },
            Node { kind: NodeKind::Output, inputs: vec![NodeId(0)] },
        ];
        let g = Graph::from_parts("cyc", nodes, "theta", BTreeMap::new());
        let report = validate(&g, &registry());
        assert!(!report.ok);
        assert!(report.errors().any(|d| d.message.contains("cycle")));
        assert!(matches!(topo_order(&g), Err(GraphError::CycleDetected(_))));
    }

    #[test]
    fn topo_order_examples() {
        let mut b = GraphBuilder::new("c", "theta");
        let c = b.constant(1.0);
        let g = b.output(c);
        assert_eq!(topo_order(&g).unwrap(), vec![NodeId(0), NodeId(1)]);

        // diamond: 0 -> {1, 2} -> 3 -> output
        let mut b = GraphBuilder::new("diamond", "theta");
        let a = b.constant(1.0);
        let l = b.op(OpId::Neg, &[a]);
        let r = b.op(OpId::Square, &[a]);
        let d = b.op(OpId::Add, &[l, r]);
        let g = b.output(d);
        let order = topo_order(&g).unwrap();
        assert_eq!(order.first(), Some(&a));
        assert_eq!(order[3], d);
    }

    #[test]
    fn infer_types_examples() {
        let mut b = GraphBuilder::new("t", "theta");
        let s = b.input("s_tp1");
        let c = b.constant(0.9);
        let q = b.param("theta", Signature::StateToList, &[s]);
        let m = b.op(OpId::MaxList, &[q]);
        let x = b.op(OpId::Multiply, &[c, m]);
        let g = b.output(x);
        let types = infer_types(&g).unwrap();
        assert_eq!(types[&s], DType::S);
        assert_eq!(types[&c], DType::R);
        assert_eq!(types[&q], DType::ListR);
    }

    #[test]
    fn unused_nodes_are_warnings() {
        let mut b = GraphBuilder::new("u", "theta");
        let s = b.input("s_t");
        let _unused = b.input("r_t");
        let v = b.param("theta", Signature::StateToScalar, &[s]);
        let g = b.output(v);
        let report = validate(&g, &registry());
        assert!(report.ok);
        assert_eq!(report.unused(), [NodeId(1)].into_iter().collect());
    }

    #[test]
    fn conflicting_store_signatures_are_errors() {
        let mut b = GraphBuilder::new("u", "theta");
        let s = b.input("s_t");
        let v = b.param("theta", Signature::StateToScalar, &[s]);
        let q = b.param("theta", Signature::StateToList, &[s]);
        let m = b.op(OpId::MaxList, &[q]);
        let x = b.op(OpId::Add, &[v, m]);
        let g = b.output(x);
        assert!(!validate(&g, &registry()).ok);
    }

    #[test]
    fn missing_operator_in_registry() {
        let mut b = GraphBuilder::new("u", "theta");
        let c = b.constant(2.0);
        let x = b.op(OpId::Square, &[c]);
        let g = b.output(x);
        let narrow = OpRegistry::with_ops([OpId::Add]);
        assert!(!validate(&g, &narrow).ok);
        assert!(validate(&g, &registry()).ok);
    }

    #[test]
    fn constant_only_graph_has_no_free_symbols() {
        let mut b = GraphBuilder::new("c", "theta");
        let c = b.constant(0.0);
        let g = b.output(c);
        assert!(free_symbols(&g).is_empty());
    }

    #[test]
    fn extra_inputs_are_typed_from_metadata() {
        let mut b = GraphBuilder::new("x", "theta").meta(super::super::meta::EXTRA_INPUTS, "bonus:R");
        let x = b.input("bonus");
        let g = b.output(x);
        assert!(validate(&g, &registry()).ok);
    }
}
