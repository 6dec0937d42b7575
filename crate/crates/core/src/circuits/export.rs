use std::fmt::Write as _;
use std::io::{Read, Write};

use super::CircuitGraph;
use crate::error::Result;
use crate::nanoformer::NodeId;

pub fn write_circuit_json<W: Write>(graph: &CircuitGraph, mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, graph)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_circuit_json<R: Read>(r: R) -> Result<CircuitGraph> {
    Ok(serde_json::from_reader(r)?)
}

fn dot_id(n: NodeId) -> String {
    n.label().replace('.', "_")
}

/// Graphviz rendering of the active subgraph. Pen width grows with |score|.
pub fn to_dot(graph: &CircuitGraph) -> String {
    let max = graph
        .active_edges()
        .filter_map(|e| e.score)
        .fold(0.0f64, |m, s| m.max(s.abs()));
    let mut out = String::from("digraph circuit {\n  rankdir=BT;\n  node [shape=box, fontname=\"monospace\"];\n");
    let used: Vec<NodeId> = graph
        .nodes
        .iter()
        .copied()
        .filter(|n| {
            graph
                .active_edges()
                .any(|e| e.edge.parent == *n || e.edge.child == *n)
        })
        .collect();
    for n in &used {
        let _ = writeln!(out, "  {} [label=\"{}\"];", dot_id(*n), n.label());
    }
    for e in graph.active_edges() {
        let s = e.score.unwrap_or(0.0);
        let width = if max > 0.0 { 0.5 + 4.5 * s.abs() / max } else { 1.0 };
        let color = if s < 0.0 { "firebrick" } else { "steelblue" };
        let _ = writeln!(
            out,
            "  {} -> {} [label=\"{}\", penwidth={:.3}, color={}];",
            dot_id(e.edge.parent),
            dot_id(e.edge.child),
            e.edge.slot,
            width,
            color
        );
    }
    out.push_str("}\n");
    out
}
