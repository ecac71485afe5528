use alloc::format;
use alloc::string::String;
use core::fmt::Write;

use super::{infer_types, live_nodes, Graph, NodeKind};

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

/// Renders the graph as a Graphviz digraph.
///
/// Node labels carry the kind and the inferred data type; edge labels carry
/// the consumer port number. Nodes that do not reach the output are dashed.
pub fn to_dot(g: &Graph) -> String {
    let types = infer_types(g).ok();
    let live = live_nodes(g);
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", escape(&g.name));
    let _ = writeln!(out, "  rankdir=BT;");
    for id in g.ids() {
        let node = g.node(id);
        let (text, shape) = match &node.kind {
            NodeKind::Input { symbol } => (format!("Input {symbol}"), "ellipse"),
            NodeKind::Constant { value, label: Some(label) } => {
                (format!("Constant {label} ({value})"), "plaintext")
            }
            NodeKind::Constant { value, label: None } => (format!("Constant {value}"), "plaintext"),
            NodeKind::Parameter { store_key, signature } => {
                (format!("Parameter {store_key} {signature}"), "box")
            }
            NodeKind::Operation { op } => (format!("{op}"), "box"),
            NodeKind::Output => ("Output".into(), "doublecircle"),
        };
        let ty = types
            .as_ref()
            .and_then(|t| t.get(&id))
            .map(|t| format!(" : {t}"))
            .unwrap_or_default();
        let style = if live[id.0] { "" } else { ", style=dashed" };
        let _ = writeln!(
            out,
            "  n{} [label=\"{}{}\", shape={}{}];",
            id.0,
            escape(&text),
            escape(&ty),
            shape,
            style
        );
    }
    for id in g.ids() {
        for (port, src) in g.node(id).inputs.iter().enumerate() {
            let _ = writeln!(out, "  n{} -> n{} [label=\"{}\"];", src.0, id.0, port);
        }
    }
    out.push_str("}\n");
    out
}
