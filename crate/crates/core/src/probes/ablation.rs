use serde::{Deserialize, Serialize};

use super::{report_from_maps, AttentionReport};
use crate::circuits::{run_circuit, CircuitGraph, PairTraces};
use crate::error::{Error, Result};
use crate::nanoformer::{Model, NodeId};
use crate::ndtensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub proportion: f64,
    pub ablated: Vec<NodeId>,
    pub circuit_heads: usize,
    pub metric_before: f64,
    pub metric_after: f64,
    /// Drop in mean metric; positive is worse.
    pub delta_metric: f64,
    /// Mean span attention over the circuit's heads, before and after.
    pub attention_before: f64,
    pub attention_after: f64,
    /// Drop in mean span attention; positive is worse.
    pub delta_attention: f64,
}

/// Heads touching at least one active edge, in computation order.
pub fn circuit_heads(graph: &CircuitGraph) -> Vec<NodeId> {
    graph
        .nodes
        .iter()
        .copied()
        .filter(|n| n.is_head())
        .filter(|n| graph.active_edges().any(|e| e.edge.parent == *n || e.edge.child == *n))
        .collect()
}

fn measure<T: Scalar>(
    model: &Model<T>,
    graph: &CircuitGraph,
    pairs: &[PairTraces<T>],
    span: &[usize],
) -> Result<(f64, AttentionReport)> {
    let mut total = 0.0;
    let mut maps = Vec::with_capacity(pairs.len());
    for p in pairs {
        let r = run_circuit(model, graph, p)?;
        total += r.metric;
        maps.push(r.attention);
    }
    Ok((total / pairs.len() as f64, report_from_maps(model, &maps, span)?))
}

/// Forces every active edge of the top `⌈p·|heads|⌉` circuit heads (by span
/// attention under the circuit) to corrupt patching and re-runs the circuit.
pub fn ablate_heads<T: Scalar>(
    model: &Model<T>,
    graph: &CircuitGraph,
    pairs: &[PairTraces<T>],
    proportion: f64,
    span: &[usize],
) -> Result<AblationResult> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Input(format!("ablation proportion {proportion} outside (0, 1]")));
    }
    if pairs.is_empty() {
        return Err(Error::Input("no prompt pairs for ablation".into()));
    }
    let heads = circuit_heads(graph);
    if heads.is_empty() {
        return Err(Error::Circuit("circuit has no attention heads".into()));
    }
    let (metric_before, before) = measure(model, graph, pairs, span)?;
    let mut ranked: Vec<(NodeId, f64)> = before.heads().filter(|(n, _)| heads.contains(n)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let k = ((proportion * heads.len() as f64).ceil() as usize).clamp(1, heads.len());
    let ablated: Vec<NodeId> = ranked[..k].iter().map(|(n, _)| *n).collect();
    let mut cut = graph.clone();
    for e in &mut cut.edges {
        if ablated.contains(&e.edge.parent) || ablated.contains(&e.edge.child) {
            e.active = false;
        }
    }
    let (metric_after, after) = measure(model, &cut, pairs, span)?;
    let attention_before = before.mean(Some(&heads));
    let attention_after = after.mean(Some(&heads));
    Ok(AblationResult {
        proportion,
        ablated,
        circuit_heads: heads.len(),
        metric_before,
        metric_after,
        delta_metric: metric_before - metric_after,
        attention_before,
        attention_after,
        delta_attention: attention_before - attention_after,
    })
}
