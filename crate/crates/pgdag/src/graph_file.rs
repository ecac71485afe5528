//! Graph files: UTF-8 JSON with a schema version, node list and metadata.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "name": "ddqn",
//!   "loss_target": "theta",
//!   "metadata": { "action_space": "discrete" },
//!   "nodes": [
//!     { "id": 0, "kind": "input", "symbol": "s_t", "inputs": [] },
//!     { "id": 1, "kind": "parameter", "store_key": "theta", "signature": "S->ListR", "inputs": [0] },
//!     { "id": 2, "kind": "operation", "op": "MaxList", "inputs": [1] },
//!     { "id": 3, "kind": "output", "inputs": [2] }
//!   ]
//! }
//! ```
//!
//! Ids may be any distinct non-negative integers; nodes are renumbered in
//! file order on load and written back densely.

use std::collections::{BTreeMap, HashMap};

use pgdag_core::graph::{Node, NodeId, NodeKind, Signature};
use pgdag_core::ops::OpId;
use pgdag_core::Graph;
use serde_json::{json, Map, Value};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema_version {found}, expected {expected}")]
    SchemaVersionMismatch { found: u64, expected: u64 },
}

impl FormatError {
    pub(crate) fn at(line: usize, message: impl Into<String>) -> Self {
        FormatError::Parse { line, message: message.into() }
    }
}

impl From<serde_json::Error> for FormatError {
    fn from(e: serde_json::Error) -> Self {
        FormatError::at(e.line(), e.to_string())
    }
}

/// 1-based line of the `n`-th node object, found by scanning for `"kind"`
/// keys after the `"nodes"` key. Falls back to line 1.
fn node_line(text: &str, n: usize) -> usize {
    let Some(start) = text.find("\"nodes\"") else { return 1 };
    let mut from = start;
    for _ in 0..=n {
        match text[from..].find("\"kind\"") {
            Some(off) => from += off + 1,
            None => return 1,
        }
    }
    text[..from].matches('\n').count() + 1
}

fn field_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    obj.get(key).and_then(Value::as_str)
}

pub fn parse_graph(text: &str) -> Result<Graph, FormatError> {
    let root: Value = serde_json::from_str(text)?;
    let root = root.as_object().ok_or_else(|| FormatError::at(1, "top level must be an object"))?;
    let version = root
        .get("schema_version")
        .ok_or_else(|| FormatError::at(1, "missing schema_version"))?
        .as_u64()
        .ok_or_else(|| FormatError::at(1, "schema_version must be an integer"))?;
    if version != SCHEMA_VERSION {
        return Err(FormatError::SchemaVersionMismatch { found: version, expected: SCHEMA_VERSION });
    }
    let name = field_str(root, "name").ok_or_else(|| FormatError::at(1, "missing string field `name`"))?;
    let loss_target =
        field_str(root, "loss_target").ok_or_else(|| FormatError::at(1, "missing string field `loss_target`"))?;
    let mut metadata = BTreeMap::new();
    match root.get("metadata") {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                let v = v.as_str().ok_or_else(|| FormatError::at(1, format!("metadata `{k}` must be a string")))?;
                metadata.insert(k.clone(), v.to_string());
            }
        }
        Some(_) => return Err(FormatError::at(1, "metadata must be an object")),
    }
    let nodes = root
        .get("nodes")
        .and_then(Value::as_array)
        .ok_or_else(|| FormatError::at(1, "missing array field `nodes`"))?;

    let mut index: HashMap<u64, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        let line = node_line(text, i);
        let id = n
            .get("id")
            .and_then(Value::as_u64)
            .ok_or_else(|| FormatError::at(line, "node needs a non-negative integer `id`"))?;
        if index.insert(id, i).is_some() {
            return Err(FormatError::at(line, format!("duplicate node id {id}")));
        }
    }

    let mut out = Vec::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        let line = node_line(text, i);
        let err = |m: String| FormatError::at(line, m);
        let obj = n.as_object().ok_or_else(|| err("node must be an object".into()))?;
        let need = |key: &str| field_str(obj, key).ok_or_else(|| err(format!("node needs string field `{key}`")));
        let kind = match need("kind")? {
            "input" => NodeKind::Input { symbol: need("symbol")?.to_string() },
            "constant" => {
                let value = obj
                    .get("value")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| err("constant needs numeric `value`".into()))?;
                let label = match obj.get("label") {
                    None | Some(Value::Null) => None,
                    Some(Value::String(s)) => Some(s.clone()),
                    Some(_) => return Err(err("constant `label` must be a string".into())),
                };
                NodeKind::Constant { value, label }
            }
            "parameter" => {
                let sig = need("signature")?;
                NodeKind::Parameter {
                    store_key: need("store_key")?.to_string(),
                    signature: Signature::parse(sig).ok_or_else(|| err(format!("unknown signature `{sig}`")))?,
                }
            }
            "operation" => {
                let op = need("op")?;
                NodeKind::Operation { op: OpId::parse(op).ok_or_else(|| err(format!("unknown operator `{op}`")))? }
            }
            "output" => NodeKind::Output,
            other => return Err(err(format!("unknown node kind `{other}`"))),
        };
        let inputs = match obj.get("inputs") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(xs)) => xs
                .iter()
                .map(|x| {
                    let id = x.as_u64().ok_or_else(|| err("inputs must be node ids".into()))?;
                    index.get(&id).map(|&j| NodeId(j)).ok_or_else(|| err(format!("input refers to unknown node {id}")))
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(err("`inputs` must be an array".into())),
        };
        out.push(Node { kind, inputs });
    }
    if !out.iter().any(|n| n.kind == NodeKind::Output) {
        return Err(FormatError::at(node_line(text, 0), "graph has no output node"));
    }
    Ok(Graph::from_parts(name, out, loss_target, metadata))
}

fn node_json(id: usize, node: &Node) -> Value {
    let mut m = Map::new();
    m.insert("id".into(), json!(id));
    match &node.kind {
        NodeKind::Input { symbol } => {
            m.insert("kind".into(), json!("input"));
            m.insert("symbol".into(), json!(symbol));
        }
        NodeKind::Constant { value, label } => {
            m.insert("kind".into(), json!("constant"));
            m.insert("value".into(), json!(value));
            if let Some(l) = label {
                m.insert("label".into(), json!(l));
            }
        }
        NodeKind::Parameter { store_key, signature } => {
            m.insert("kind".into(), json!("parameter"));
            m.insert("store_key".into(), json!(store_key));
            m.insert("signature".into(), json!(signature.as_str()));
        }
        NodeKind::Operation { op } => {
            m.insert("kind".into(), json!("operation"));
            m.insert("op".into(), json!(op.as_str()));
        }
        NodeKind::Output => {
            m.insert("kind".into(), json!("output"));
        }
    }
    m.insert("inputs".into(), json!(node.inputs.iter().map(|s| s.0).collect::<Vec<_>>()));
    Value::Object(m)
}

pub fn graph_to_json(g: &Graph) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "name": g.name,
        "loss_target": g.loss_target,
        "metadata": g.metadata,
        "nodes": g.nodes().iter().enumerate().map(|(i, n)| node_json(i, n)).collect::<Vec<_>>(),
    })
}

/// Pretty JSON with one node per line.
pub fn serialize_graph(g: &Graph) -> String {
    let head = json!({
        "schema_version": SCHEMA_VERSION,
        "name": g.name,
        "loss_target": g.loss_target,
        "metadata": g.metadata,
    });
    let mut s = serde_json::to_string_pretty(&head).expect("graph header serializes");
    s.truncate(s.len() - 2);
    s.push_str(",\n  \"nodes\": [\n");
    let lines: Vec<String> = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| format!("    {}", serde_json::to_string(&node_json(i, n)).expect("node serializes")))
        .collect();
    s.push_str(&lines.join(",\n"));
    s.push_str("\n  ]\n}\n");
    s
}
