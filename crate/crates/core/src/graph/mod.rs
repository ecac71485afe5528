//! Typed DAG representation of a loss function.
//!
//! A [`Graph`] is a list of [`Node`]s addressed by dense [`NodeId`]s. Every
//! node carries a [`NodeKind`] and an ordered list of input node ids; input
//! order matters for non-commutative operators such as `Subtract` and `Div`.
//! Graphs are plain values: all editing helpers return new graphs.

mod dot;
mod validate;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::ops::OpId;

pub use dot::to_dot;
pub use validate::{
    free_symbols, infer_port_types, infer_types, input_type, live_nodes, topo_order, validate,
    Diagnostic, INPUT_SYMBOLS,
    FreeSymbols, GraphError, OpRegistry, Severity, ValidationReport,
};

/// Data type carried by a node port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DType {
    /// Environment state vector.
    S,
    /// Action: a discrete index or a bounded continuous vector.
    Z,
    /// Scalar float.
    R,
    /// List of floats.
    ListR,
    /// List of states.
    ListS,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::S => "S",
            DType::Z => "Z",
            DType::R => "R",
            DType::ListR => "ListR",
            DType::ListS => "ListS",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        Some(match s {
            "S" => DType::S,
            "Z" => DType::Z,
            "R" => DType::R,
            "ListR" => DType::ListR,
            "ListS" => DType::ListS,
            _ => return None,
        })
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Symbolic length of a `ListR` value. Lengths are resolved against the
/// bound environment at evaluation time; the checker only needs to know
/// which lengths agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ListLen {
    /// One entry per discrete action.
    Actions,
    /// One entry per continuous action dimension.
    ActionDim,
    /// Gaussian policy head: means followed by log standard deviations.
    Head,
}

/// Full static type of a port: the data type plus, for lists, the length
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortType {
    pub dtype: DType,
    pub len: Option<ListLen>,
}

impl PortType {
    pub const S: PortType = PortType { dtype: DType::S, len: None };
    pub const Z: PortType = PortType { dtype: DType::Z, len: None };
    pub const R: PortType = PortType { dtype: DType::R, len: None };

    pub const fn list(len: ListLen) -> PortType {
        PortType { dtype: DType::ListR, len: Some(len) }
    }
}

impl fmt::Display for PortType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.len {
            None => write!(f, "{}", self.dtype),
            Some(ListLen::Actions) => write!(f, "{}[actions]", self.dtype),
            Some(ListLen::ActionDim) => write!(f, "{}[action_dim]", self.dtype),
            Some(ListLen::Head) => write!(f, "{}[head]", self.dtype),
        }
    }
}

/// Action space family a graph is written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ActionKind {
    Discrete,
    Continuous,
}

impl ActionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Discrete => "discrete",
            ActionKind::Continuous => "continuous",
        }
    }

    pub fn parse(s: &str) -> Option<ActionKind> {
        match s {
            "discrete" => Some(ActionKind::Discrete),
            "continuous" => Some(ActionKind::Continuous),
            _ => None,
        }
    }
}

/// Network signature of a `Parameter` node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Signature {
    /// `S -> R`, e.g. a value function.
    StateToScalar,
    /// `S -> ListR`, one output per discrete action (Q-list or logits).
    StateToList,
    /// `S x Z -> R`, a state-action value function.
    StateActionToScalar,
    /// `S -> Z`, a deterministic policy bounded to the action range.
    StateToAction,
    /// `S -> (Z-mean, Z-logstd)`, a diagonal Gaussian policy head.
    StateToGaussian,
}

impl Signature {
    pub const ALL: [Signature; 5] = [
        Signature::StateToScalar,
        Signature::StateToList,
        Signature::StateActionToScalar,
        Signature::StateToAction,
        Signature::StateToGaussian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Signature::StateToScalar => "S->R",
            Signature::StateToList => "S->ListR",
            Signature::StateActionToScalar => "SxZ->R",
            Signature::StateToAction => "S->Z",
            Signature::StateToGaussian => "S->Gaussian",
        }
    }

    pub fn parse(s: &str) -> Option<Signature> {
        Signature::ALL.into_iter().find(|sig| sig.as_str() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            Signature::StateActionToScalar => 2,
            _ => 1,
        }
    }

    /// Output type, or `None` when the signature is not available for the
    /// given action space.
    pub fn output(self, actions: ActionKind) -> Option<PortType> {
        match (self, actions) {
            (Signature::StateToScalar, _) | (Signature::StateActionToScalar, _) => {
                Some(PortType::R)
            }
            (Signature::StateToList, ActionKind::Discrete) => {
                Some(PortType::list(ListLen::Actions))
            }
            (Signature::StateToAction, ActionKind::Continuous) => Some(PortType::Z),
            (Signature::StateToGaussian, ActionKind::Continuous) => {
                Some(PortType::list(ListLen::Head))
            }
            _ => None,
        }
    }

    pub fn inputs(self) -> &'static [PortType] {
        match self {
            Signature::StateActionToScalar => &[PortType::S, PortType::Z],
            _ => &[PortType::S],
        }
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dense node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input { symbol: String },
    /// A float constant. When `label` is set (e.g. `"1+eps"`), the value is
    /// re-resolved against the hyperparameters at bind time and `value` is
    /// only the default.
    Constant { value: f64, label: Option<String> },
    Parameter { store_key: String, signature: Signature },
    Operation { op: OpId },
    Output,
}

impl NodeKind {
    /// Number of inputs this kind consumes.
    pub fn arity(&self) -> usize {
        match self {
            NodeKind::Input { .. } | NodeKind::Constant { .. } => 0,
            NodeKind::Parameter { signature, .. } => signature.arity(),
            NodeKind::Operation { op } => op.arity(),
            NodeKind::Output => 1,
        }
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Constant { .. } => "constant",
            NodeKind::Parameter { .. } => "parameter",
            NodeKind::Operation { .. } => "operation",
            NodeKind::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

/// Well-known metadata keys.
pub mod meta {
    /// `"discrete"` or `"continuous"`; defaults to discrete.
    pub const ACTION_SPACE: &str = "action_space";
    /// Reference algorithm the graph belongs to (template for training).
    pub const ALGORITHM: &str = "algorithm";
    /// Extra input symbols, `name:DType` pairs separated by commas.
    pub const EXTRA_INPUTS: &str = "extra_inputs";
}

/// Immutable typed DAG with exactly one `Output` node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    nodes: Vec<Node>,
    /// Store key updated by the gradient step on this loss.
    pub loss_target: String,
    pub metadata: BTreeMap<String, String>,
}

impl Graph {
    pub fn from_parts(
        name: impl Into<String>,
        nodes: Vec<Node>,
        loss_target: impl Into<String>,
        metadata: BTreeMap<String, String>,
    ) -> Graph {
        Graph { name: name.into(), nodes, loss_target: loss_target.into(), metadata }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    /// The unique `Output` node, if exactly one exists.
    pub fn output(&self) -> Option<NodeId> {
        let mut outs = self.ids().filter(|&id| matches!(self.node(id).kind, NodeKind::Output));
        let first = outs.next()?;
        if outs.next().is_some() {
            None
        } else {
            Some(first)
        }
    }

    pub fn action_space(&self) -> ActionKind {
        self.metadata
            .get(meta::ACTION_SPACE)
            .and_then(|s| ActionKind::parse(s))
            .unwrap_or(ActionKind::Discrete)
    }

    /// Declared extra input symbols with their data types.
    pub fn extra_inputs(&self) -> Vec<(String, DType)> {
        let Some(raw) = self.metadata.get(meta::EXTRA_INPUTS) else {
            return Vec::new();
        };
        raw.split(',')
            .filter_map(|item| {
                let (name, ty) = item.trim().split_once(':')?;
                Some((name.trim().to_string(), DType::parse(ty.trim())?))
            })
            .collect()
    }

    /// Consumers of every node as `(consumer, port)` pairs.
    pub fn consumers(&self) -> Vec<Vec<(NodeId, usize)>> {
        let mut out = alloc::vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for (port, src) in node.inputs.iter().enumerate() {
                if src.0 < out.len() {
                    out[src.0].push((NodeId(i), port));
                }
            }
        }
        out
    }

    /// Returns a copy with `nodes` replaced.
    pub fn with_nodes(&self, nodes: Vec<Node>) -> Graph {
        Graph {
            name: self.name.clone(),
            nodes,
            loss_target: self.loss_target.clone(),
            metadata: self.metadata.clone(),
        }
    }

    /// Returns a copy keeping only the nodes in `keep` (in their current
    /// order), with ids compacted and edges renumbered. Edges into dropped
    /// nodes must not exist.
    pub fn retain(&self, keep: &[bool]) -> Graph {
        let mut remap = alloc::vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                remap[i] = next;
                next += 1;
            }
        }
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .map(|(_, n)| Node {
                kind: n.kind.clone(),
                inputs: n.inputs.iter().map(|src| NodeId(remap[src.0])).collect(),
            })
            .collect();
        self.with_nodes(nodes)
    }

    /// Drops every node that does not reach the `Output` node.
    pub fn prune_dead(&self) -> Graph {
        let live = live_nodes(self);
        if live.iter().all(|&l| l) {
            return self.clone();
        }
        self.retain(&live)
    }
}

/// Incremental graph construction used by the reference builders and tests.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    name: String,
    loss_target: String,
    nodes: Vec<Node>,
    metadata: BTreeMap<String, String>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, loss_target: impl Into<String>) -> Self {
        GraphBuilder {
            name: name.into(),
            loss_target: loss_target.into(),
            nodes: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn action_space(mut self, kind: ActionKind) -> Self {
        self.metadata.insert(meta::ACTION_SPACE.to_string(), kind.as_str().to_string());
        self
    }

    pub fn meta(mut self, key: &str, value: &str) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    fn push(&mut self, kind: NodeKind, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(Node { kind, inputs: inputs.to_vec() });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, symbol: &str) -> NodeId {
        self.push(NodeKind::Input { symbol: symbol.to_string() }, &[])
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(NodeKind::Constant { value, label: None }, &[])
    }

    pub fn labeled(&mut self, label: &str, default: f64) -> NodeId {
        self.push(NodeKind::Constant { value: default, label: Some(label.to_string()) }, &[])
    }

    pub fn param(&mut self, store_key: &str, signature: Signature, inputs: &[NodeId]) -> NodeId {
        self.push(NodeKind::Parameter { store_key: store_key.to_string(), signature }, inputs)
    }

    pub fn op(&mut self, op: OpId, inputs: &[NodeId]) -> NodeId {
        self.push(NodeKind::Operation { op }, inputs)
    }

    pub fn output(mut self, loss: NodeId) -> Graph {
        self.push(NodeKind::Output, &[loss]);
        Graph {
            name: self.name,
            nodes: self.nodes,
            loss_target: self.loss_target,
            metadata: self.metadata,
        }
    }
}
