//! Read-only analyses of a model and its circuits: attention on the
//! distinguishing span, logit lens, structure tracing and head ablation.

mod ablation;
mod lens;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::circuits::CircuitGraph;
use crate::error::{Error, Result};
use crate::nanoformer::{forward, EdgeKey, Model, NodeId, Slot};
use crate::ndtensor::{Scalar, Tensor};

pub use ablation::{ablate_heads, circuit_heads, AblationResult};
pub use lens::{logit_lens, LensEntry, LogitLensReport};

pub const HIGH_ATTENTION: f64 = 0.2;

/// Attention mass from the final query position onto `span`.
pub fn span_mass<T: Scalar>(attn: &Tensor<T>, span: &[usize]) -> f64 {
    let t = attn.shape()[0];
    let row = attn.row(t - 1);
    span.iter().map(|&j| row[j].to_f64_lossy()).sum()
}

/// Mean per-head attention from the final position onto a span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub n_layers: usize,
    pub n_heads: usize,
    pub span: Vec<usize>,
    /// Indexed `layer * n_heads + head`.
    pub scores: Vec<f64>,
    pub n_prompts: usize,
}

impl AttentionReport {
    pub fn score(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.n_heads + head]
    }

    pub fn heads(&self) -> impl Iterator<Item = (NodeId, f64)> + '_ {
        self.scores.iter().enumerate().map(|(i, &s)| {
            (
                NodeId::Head {
                    layer: i / self.n_heads,
                    head: i % self.n_heads,
                },
                s,
            )
        })
    }

    /// Mean over the listed heads (all heads when `None`).
    pub fn mean(&self, heads: Option<&[NodeId]>) -> f64 {
        let picked: Vec<f64> = self
            .heads()
            .filter(|(n, _)| heads.map_or(true, |hs| hs.contains(n)))
            .map(|(_, s)| s)
            .collect();
        if picked.is_empty() {
            0.0
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        }
    }
}

/// Builds a report from per-prompt attention maps (`layer * H + head` order).
pub fn report_from_maps<T: Scalar>(
    model: &Model<T>,
    maps: &[Vec<Tensor<T>>],
    span: &[usize],
) -> Result<AttentionReport> {
    let cfg = model.config();
    let n = cfg.n_layers * cfg.n_heads;
    let mut scores = vec![0.0; n];
    for per_head in maps {
        let t = per_head.first().map_or(0, |a| a.shape()[0]);
        if let Some(&bad) = span.iter().find(|&&j| j >= t) {
            return Err(Error::Input(format!("span position {bad} outside prompt of length {t}")));
        }
        for (s, a) in scores.iter_mut().zip(per_head) {
            *s += span_mass(a, span);
        }
    }
    if !maps.is_empty() {
        for s in &mut scores {
            *s /= maps.len() as f64;
        }
    }
    Ok(AttentionReport {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        span: span.to_vec(),
        scores,
        n_prompts: maps.len(),
    })
}

pub fn attention_on_span<T: Scalar>(model: &Model<T>, prompts: &[Vec<usize>], span: &[usize]) -> Result<AttentionReport> {
    if span.is_empty() {
        return Err(Error::Input("attention span is empty".into()));
    }
    let mut maps = Vec::with_capacity(prompts.len());
    for p in prompts {
        if let Some(&bad) = span.iter().find(|&&j| j >= p.len()) {
            return Err(Error::Input(format!(
                "span position {bad} outside prompt of length {}",
                p.len()
            )));
        }
        maps.push(forward(model, p)?.1.attention);
    }
    report_from_maps(model, &maps, span)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighAttentionSet {
    pub heads: Vec<NodeId>,
    pub threshold: f64,
    pub epoch: Option<usize>,
}

pub fn high_attention_heads(report: &AttentionReport, threshold: f64, epoch: Option<usize>) -> HighAttentionSet {
    HighAttentionSet {
        heads: report
            .heads()
            .filter(|&(_, s)| s >= threshold)
            .map(|(n, _)| n)
            .collect(),
        threshold,
        epoch,
    }
}

/// One active edge seen from a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub node: NodeId,
    pub slot: Slot,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub node: NodeId,
    /// Nodes feeding this one through active edges.
    pub parents: Vec<Neighbor>,
    /// Nodes this one feeds through active edges.
    pub children: Vec<Neighbor>,
}

pub fn trace_structure(graph: &CircuitGraph, node: NodeId) -> Result<Structure> {
    if !graph.nodes.contains(&node) {
        return Err(Error::Circuit(format!("node {node} is not in the circuit graph")));
    }
    let collect = |pick: &dyn Fn(&EdgeKey) -> Option<NodeId>| {
        let mut out: Vec<Neighbor> = graph
            .active_edges()
            .filter_map(|e| {
                pick(&e.edge).map(|n| Neighbor {
                    node: n,
                    slot: e.edge.slot,
                    score: e.score.unwrap_or(0.0),
                })
            })
            .collect();
        out.sort_by(|a, b| b.score.abs().total_cmp(&a.score.abs()));
        out
    };
    Ok(Structure {
        node,
        parents: collect(&|e| (e.child == node).then_some(e.parent)),
        children: collect(&|e| (e.parent == node).then_some(e.child)),
    })
}

pub const ATTENTION_SERIES_HEADER: [&str; 5] = ["epoch", "layer", "head", "score_on_xsub", "score_on_xdom"];

/// Appends one epoch of the per-head attention series.
pub fn append_attention_series<W: Write>(
    w: W,
    epoch: usize,
    on_sub: &AttentionReport,
    on_dom: &AttentionReport,
    with_header: bool,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Input(format!("attention csv: {e}"));
    if with_header {
        out.write_record(ATTENTION_SERIES_HEADER).map_err(err)?;
    }
    for ((n, s), (_, d)) in on_sub.heads().zip(on_dom.heads()) {
        if let NodeId::Head { layer, head } = n {
            out.write_record([
                epoch.to_string(),
                layer.to_string(),
                head.to_string(),
                s.to_string(),
                d.to_string(),
            ])
            .map_err(err)?;
        }
    }
    out.flush()?;
    Ok(())
}
