//! Knowledge circuits over the residual-stream DAG: edge scoring, pruning and
//! patched execution.

mod eap;
mod export;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nanoformer::{
    all_edges, all_nodes, forward, forward_patched, ActivationTrace, EdgeKey, LogitDifference, Model, ModelConfig,
    NodeId, PatchPlan,
};
use crate::ndtensor::{Scalar, Tensor};

pub use eap::{eap_ig_scores, edge_scores_for_pair};
pub use export::{read_circuit_json, to_dot, write_circuit_json};

/// A clean prompt, its corrupt counterpart and the two competing answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: Vec<usize>,
    pub corrupt: Vec<usize>,
    /// Answer the metric rewards (the subordinate answer).
    pub target: usize,
    /// Answer the metric penalizes (the dominant answer).
    pub foil: usize,
    /// Dataset group the pair was taken from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
}

impl PromptPair {
    pub fn metric(&self) -> LogitDifference {
        LogitDifference {
            target: self.target,
            foil: self.foil,
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.clean.len() != self.corrupt.len() {
            return Err(Error::Input(format!(
                "clean prompt has {} tokens, corrupt prompt {}",
                self.clean.len(),
                self.corrupt.len()
            )));
        }
        if self.target >= vocab || self.foil >= vocab {
            return Err(Error::Input(format!(
                "answer ids ({}, {}) out of range for vocab {vocab}",
                self.target, self.foil
            )));
        }
        Ok(())
    }
}

/// Clean and corrupt traces of a pair, computed once and reused across circuits.
#[derive(Debug, Clone)]
pub struct PairTraces<T> {
    pub pair: PromptPair,
    pub clean: ActivationTrace<T>,
    pub corrupt: ActivationTrace<T>,
}

impl<T: Scalar> PairTraces<T> {
    pub fn new(model: &Model<T>, pair: &PromptPair) -> Result<Self> {
        pair.validate(model.config().vocab_size)?;
        Ok(PairTraces {
            pair: pair.clone(),
            clean: forward(model, &pair.clean)?.1,
            corrupt: forward(model, &pair.corrupt)?.1,
        })
    }

    /// Metric of the unpatched model on the clean prompt.
    pub fn clean_metric(&self) -> f64 {
        metric_m(&self.clean.logits, self.pair.target, self.pair.foil)
    }

    pub fn corrupt_metric(&self) -> f64 {
        metric_m(&self.corrupt.logits, self.pair.target, self.pair.foil)
    }
}

/// `logit(target) − logit(foil)` at the final position of `[seq, vocab]` logits.
pub fn metric_m<T: Scalar>(logits: &Tensor<T>, target: usize, foil: usize) -> f64 {
    LogitDifference { target, foil }.eval(logits).to_f64_lossy()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneCriterion {
    Threshold(f64),
    TopN(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    #[serde(flatten)]
    pub edge: EdgeKey,
    pub score: Option<f64>,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Groups (or positions in the pair list) the scores were averaged over.
    pub pairs: Vec<usize>,
    pub ig_steps: Option<usize>,
    pub criterion: Option<PruneCriterion>,
    /// A requested top-n exceeded the edge count.
    #[serde(default)]
    pub clamped: bool,
}

/// Full DAG with per-edge scores and the active (circuit) mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub config: ModelConfig,
    pub nodes: Vec<NodeId>,
    pub edges: Vec<ScoredEdge>,
    pub provenance: Provenance,
}

impl CircuitGraph {
    /// Every edge active, no scores.
    pub fn build(config: &ModelConfig) -> Self {
        CircuitGraph {
            config: config.clone(),
            nodes: all_nodes(config),
            edges: all_edges(config)
                .into_iter()
                .map(|edge| ScoredEdge {
                    edge,
                    score: None,
                    active: true,
                })
                .collect(),
            provenance: Provenance::default(),
        }
    }

    pub fn is_scored(&self) -> bool {
        self.edges.iter().all(|e| e.score.is_some())
    }

    pub fn active_count(&self) -> usize {
        self.edges.iter().filter(|e| e.active).count()
    }

    pub fn active_edges(&self) -> impl Iterator<Item = &ScoredEdge> {
        self.edges.iter().filter(|e| e.active)
    }

    fn require_scores(&self) -> Result<()> {
        if self.is_scored() {
            Ok(())
        } else {
            Err(Error::Circuit("circuit edges have no scores".into()))
        }
    }

    /// Edge indices by decreasing |score|, ties in canonical edge order.
    pub fn ranking(&self) -> Result<Vec<usize>> {
        self.require_scores()?;
        let mut idx: Vec<usize> = (0..self.edges.len()).collect();
        let mag = |i: usize| self.edges[i].score.unwrap_or(0.0).abs();
        idx.sort_by(|&a, &b| mag(b).total_cmp(&mag(a)));
        Ok(idx)
    }

    pub fn prune(&self, criterion: PruneCriterion) -> Result<CircuitGraph> {
        let mut out = self.clone();
        out.provenance.clamped = false;
        match criterion {
            PruneCriterion::Threshold(tau) => {
                self.require_scores()?;
                for e in &mut out.edges {
                    e.active = e.score.is_some_and(|s| s.abs() >= tau);
                }
            }
            PruneCriterion::TopN(n) => {
                let order = self.ranking()?;
                out.provenance.clamped = n > order.len();
                for e in &mut out.edges {
                    e.active = false;
                }
                for &i in order.iter().take(n) {
                    out.edges[i].active = true;
                }
            }
        }
        out.provenance.criterion = Some(criterion);
        Ok(out)
    }

    /// Patch plan in which every inactive edge is corrupted.
    pub fn plan(&self) -> PatchPlan {
        let mut plan = PatchPlan::new();
        for e in self.edges.iter().filter(|e| !e.active) {
            plan = plan.corrupt(e.edge);
        }
        plan
    }

    pub fn edge(&self, key: &EdgeKey) -> Option<&ScoredEdge> {
        self.edges.iter().find(|e| e.edge == *key)
    }

    /// Nodes with an active path to the logits (reporting only; the mask is
    /// not changed).
    pub fn reachable_nodes(&self) -> Vec<NodeId> {
        let mut live = vec![NodeId::Logits];
        for n in self.nodes.iter().rev() {
            if live.contains(n) {
                continue;
            }
            let feeds_live = self
                .active_edges()
                .any(|e| e.edge.parent == *n && live.contains(&e.edge.child));
            if feeds_live {
                live.push(*n);
            }
        }
        self.nodes.iter().copied().filter(|n| live.contains(n)).collect()
    }
}

/// Logits and metric of a circuit run.
#[derive(Debug, Clone)]
pub struct CircuitRun<T> {
    pub logits: Tensor<T>,
    pub metric: f64,
    pub attention: Vec<Tensor<T>>,
}

/// Active edges carry clean contributions, pruned edges corrupt ones.
pub fn run_circuit<T: Scalar>(model: &Model<T>, graph: &CircuitGraph, traces: &PairTraces<T>) -> Result<CircuitRun<T>> {
    graph.require_scores()?;
    run_with_plan(model, &graph.plan(), traces)
}

pub fn run_with_plan<T: Scalar>(model: &Model<T>, plan: &PatchPlan, traces: &PairTraces<T>) -> Result<CircuitRun<T>> {
    let r = forward_patched(model, &traces.pair.clean, &traces.clean, &traces.corrupt, plan)?;
    Ok(CircuitRun {
        metric: metric_m(&r.logits, traces.pair.target, traces.pair.foil),
        logits: r.logits,
        attention: r.attention,
    })
}
