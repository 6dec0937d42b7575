use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, SlotMode};
use crate::error::{Error, Result};

/// A computation node of the residual-stream DAG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NodeId {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

/// Residual-stream read port of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Q,
    K,
    V,
    In,
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Slot::Q => "q",
            Slot::K => "k",
            Slot::V => "v",
            Slot::In => "in",
        })
    }
}

impl NodeId {
    /// Position in computation order: embed, then per layer the heads followed
    /// by the MLP, then logits.
    pub fn order(&self, cfg: &ModelConfig) -> usize {
        let stride = cfg.n_heads + 1;
        match *self {
            NodeId::Embed => 0,
            NodeId::Head { layer, head } => 1 + layer * stride + head,
            NodeId::Mlp { layer } => 1 + layer * stride + cfg.n_heads,
            NodeId::Logits => 1 + cfg.n_layers * stride,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            NodeId::Embed => "embed".into(),
            NodeId::Head { layer, head } => format!("a{layer}.h{head}"),
            NodeId::Mlp { layer } => format!("m{layer}"),
            NodeId::Logits => "logits".into(),
        }
    }

    pub fn parse(label: &str) -> Option<NodeId> {
        match label {
            "embed" => return Some(NodeId::Embed),
            "logits" => return Some(NodeId::Logits),
            _ => {}
        }
        if let Some(rest) = label.strip_prefix('m') {
            return rest.parse().ok().map(|layer| NodeId::Mlp { layer });
        }
        let rest = label.strip_prefix('a')?;
        let (l, h) = rest.split_once(".h")?;
        Some(NodeId::Head {
            layer: l.parse().ok()?,
            head: h.parse().ok()?,
        })
    }

    pub fn is_head(&self) -> bool {
        matches!(self, NodeId::Head { .. })
    }

    pub fn slots(&self, mode: SlotMode) -> &'static [Slot] {
        match (self, mode) {
            (NodeId::Embed, _) => &[],
            (NodeId::Head { .. }, SlotMode::Qkv) => &[Slot::Q, Slot::K, Slot::V],
            _ => &[Slot::In],
        }
    }

    /// Does this node write into the residual stream?
    pub fn writes(&self) -> bool {
        !matches!(self, NodeId::Logits)
    }

    fn exists_in(&self, cfg: &ModelConfig) -> bool {
        match *self {
            NodeId::Embed | NodeId::Logits => true,
            NodeId::Head { layer, head } => layer < cfg.n_layers && head < cfg.n_heads,
            NodeId::Mlp { layer } => layer < cfg.n_layers,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// All nodes in computation order.
pub fn all_nodes(cfg: &ModelConfig) -> Vec<NodeId> {
    let mut out = vec![NodeId::Embed];
    for layer in 0..cfg.n_layers {
        out.extend((0..cfg.n_heads).map(|head| NodeId::Head { layer, head }));
        out.push(NodeId::Mlp { layer });
    }
    out.push(NodeId::Logits);
    out
}

/// Nodes whose output is part of `child`'s residual-stream input, in order.
///
/// Heads of one layer read the same residual, so they are not parents of each
/// other; the MLP of a layer reads after that layer's heads.
pub fn parents_of(cfg: &ModelConfig, child: NodeId) -> Vec<NodeId> {
    let limit = match child {
        NodeId::Embed => return Vec::new(),
        NodeId::Head { layer, .. } => NodeId::Head { layer, head: 0 }.order(cfg),
        other => other.order(cfg),
    };
    all_nodes(cfg)
        .into_iter()
        .filter(|n| n.writes() && n.order(cfg) < limit)
        .collect()
}

/// One residual-stream edge into a specific read slot of `child`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeKey {
    pub parent: NodeId,
    pub child: NodeId,
    pub slot: Slot,
}

impl EdgeKey {
    pub fn new(parent: NodeId, child: NodeId, slot: Slot) -> Self {
        EdgeKey {
            parent,
            child,
            slot,
        }
    }

    pub fn is_valid(&self, cfg: &ModelConfig) -> bool {
        self.parent.exists_in(cfg)
            && self.child.exists_in(cfg)
            && self.child.slots(cfg.slot_mode).contains(&self.slot)
            && parents_of(cfg, self.child).contains(&self.parent)
    }
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}<{}>", self.parent, self.child, self.slot)
    }
}

/// Every edge of the DAG, grouped by child (computation order), then slot,
/// then parent. This is the canonical edge order.
pub fn all_edges(cfg: &ModelConfig) -> Vec<EdgeKey> {
    let mut out = Vec::new();
    for child in all_nodes(cfg) {
        let parents = parents_of(cfg, child);
        for &slot in child.slots(cfg.slot_mode) {
            out.extend(parents.iter().map(|&p| EdgeKey::new(p, child, slot)));
        }
    }
    out
}

/// Where a patched edge takes its parent contribution from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// The parent's output in the current (patched) pass.
    #[default]
    Clean,
    /// The parent's output recorded on the corrupt prompt.
    Corrupt,
}

/// Per-edge choice of contribution source. Edges not listed are clean.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PatchPlan {
    sources: BTreeMap<EdgeKey, Source>,
}

impl PatchPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Plan with every edge of the model corrupted.
    pub fn all_corrupt(cfg: &ModelConfig) -> Self {
        let mut plan = Self::new();
        for e in all_edges(cfg) {
            plan.set(e, Source::Corrupt);
        }
        plan
    }

    pub fn set(&mut self, edge: EdgeKey, source: Source) {
        match source {
            Source::Clean => {
                self.sources.remove(&edge);
            }
            Source::Corrupt => {
                self.sources.insert(edge, source);
            }
        }
    }

    pub fn corrupt(mut self, edge: EdgeKey) -> Self {
        self.set(edge, Source::Corrupt);
        self
    }

    pub fn source(&self, edge: &EdgeKey) -> Source {
        self.sources.get(edge).copied().unwrap_or_default()
    }

    pub fn corrupted(&self) -> impl Iterator<Item = &EdgeKey> {
        self.sources.keys()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        match self.sources.keys().find(|e| !e.is_valid(cfg)) {
            Some(e) => Err(Error::Circuit(format!("patch plan edge {e} is not in the DAG"))),
            None => Ok(()),
        }
    }
}
