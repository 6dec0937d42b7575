use std::collections::HashMap;

use super::{CircuitGraph, PairTraces, PromptPair};
use crate::error::{Error, Result};
use crate::nanoformer::{all_edges, interpolate, slot_gradients, Model, NodeId, Slot};
use crate::ndtensor::{Scalar, Tensor};

/// Integrated-gradient edge scores for one pair, in canonical edge order.
///
/// The embedding is moved from the corrupt to the clean prompt in `steps`
/// equal increments (α = 1/m … 1); at each point the gradient of the metric
/// with respect to every child-slot input is taken. An edge scores the
/// parent's clean−corrupt output difference against the mean gradient of the
/// slot it feeds.
pub fn edge_scores_for_pair<T: Scalar>(model: &Model<T>, traces: &PairTraces<T>, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Input("integrated gradients need at least one step".into()));
    }
    let cfg = model.config();
    let metric = traces.pair.metric();
    let embed = NodeId::Embed.order(cfg);
    let (from, to) = (&traces.corrupt.outputs[embed], &traces.clean.outputs[embed]);
    let mut sum: HashMap<(NodeId, Slot), Tensor<T>> = HashMap::new();
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let point = interpolate(from, to, alpha)?;
        let sg = slot_gradients(model, &traces.pair.clean, point, &metric)?;
        for (key, g) in sg.grads {
            match sum.get_mut(&key) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    sum.insert(key, g);
                }
            }
        }
    }
    let inv = T::lit(1.0 / steps as f64);
    let mut delta: HashMap<usize, Tensor<T>> = HashMap::new();
    all_edges(cfg)
        .iter()
        .map(|e| {
            let p = e.parent.order(cfg);
            let d = match delta.get(&p) {
                Some(d) => d,
                None => {
                    let d = traces.clean.outputs[p].sub(&traces.corrupt.outputs[p])?;
                    delta.entry(p).or_insert(d)
                }
            };
            let g = sum
                .get(&(e.child, e.slot))
                .ok_or_else(|| Error::Circuit(format!("no gradient recorded for {e}")))?;
            Ok((d.dot(g)? * inv).to_f64_lossy())
        })
        .collect()
}

/// Scores averaged over a set of pairs; every edge stays active.
pub fn eap_ig_scores<T: Scalar>(model: &Model<T>, pairs: &[PromptPair], steps: usize) -> Result<CircuitGraph> {
    if pairs.is_empty() {
        return Err(Error::Input("no prompt pairs to score".into()));
    }
    let mut graph = CircuitGraph::build(model.config());
    let mut total = vec![0.0; graph.edges.len()];
    for pair in pairs {
        let traces = PairTraces::new(model, pair)?;
        for (t, s) in total.iter_mut().zip(edge_scores_for_pair(model, &traces, steps)?) {
            *t += s;
        }
    }
    for (e, t) in graph.edges.iter_mut().zip(total) {
        e.score = Some(t / pairs.len() as f64);
    }
    graph.provenance.pairs = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| p.group.unwrap_or(i))
        .collect();
    graph.provenance.ig_steps = Some(steps);
    Ok(graph)
}
