//! Circuit-based overshadowing recovery: locate the subordinate entity and
//! the two competing answers from the model alone, then search the edge
//! count whose circuit best favours the subordinate answer.

mod rpmi;
mod search;

use serde::{Deserialize, Serialize};

use crate::circuits::{eap_ig_scores, metric_m, run_circuit, CircuitGraph, PairTraces, PromptPair, PruneCriterion};
use crate::error::Result;
use crate::nanoformer::{argmax, Model, PLACEHOLDER};
use crate::ndtensor::Scalar;

pub use rpmi::{
    clamped_sum, contrast_prompt, identify_targets, next_token_log_probs, rpmi, rpmi_identify, top_k, ContrastMode,
    Identified, RpmiRow, RpmiTable, RpmiTerm, TargetScores,
};
pub use search::{edge_grid, golden_section, two_stage_search, EdgeCurve, Memo, GRID_MIN_FRACTION, GRID_POINTS};

pub const TOP_LIST: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub top_k: usize,
    pub ig_steps: usize,
    pub contrast: ContrastMode,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            top_k: 10,
            ig_steps: 5,
            contrast: ContrastMode::Mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub token: usize,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub argmax: usize,
    pub metric: f64,
    pub top: Vec<Ranked>,
}

fn prediction(last: &[f64], target: usize, foil: usize) -> Prediction {
    let top = top_k(last, TOP_LIST)
        .into_iter()
        .map(|token| Ranked { token, logit: last[token] })
        .collect();
    Prediction {
        argmax: argmax(last),
        metric: last[target] - last[foil],
        top,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    pub prompt: Vec<usize>,
    pub config: RecoveryConfig,
    pub identified: Option<Identified>,
    /// Why identification failed, if it did.
    pub failure: Option<String>,
    pub corrupt: Option<Vec<usize>>,
    pub n_opt: Option<usize>,
    pub total_edges: usize,
    pub full: Option<Prediction>,
    pub circuit: Option<Prediction>,
    pub circuit_graph: Option<CircuitGraph>,
    pub curve: EdgeCurve,
    /// Full model already answered `y_sub`.
    pub trivial: bool,
    pub recovered: bool,
}

impl RecoveryOutcome {
    fn failed(prompt: &[usize], config: RecoveryConfig, total_edges: usize, reason: String) -> Self {
        RecoveryOutcome {
            prompt: prompt.to_vec(),
            config,
            identified: None,
            failure: Some(reason),
            corrupt: None,
            n_opt: None,
            total_edges,
            full: None,
            circuit: None,
            circuit_graph: None,
            curve: EdgeCurve::default(),
            trivial: false,
            recovered: false,
        }
    }
}

/// Identifies targets with R-PMI, then optimizes the circuit.
pub fn recover<T: Scalar>(model: &Model<T>, prompt: &[usize], config: &RecoveryConfig) -> Result<RecoveryOutcome> {
    let total = crate::nanoformer::all_edges(model.config()).len();
    let table = rpmi_identify(model, prompt, config.top_k, config.contrast)?;
    let id = match identify_targets(&table) {
        Ok(id) => id,
        Err(e) => return Ok(RecoveryOutcome::failed(prompt, *config, total, e.to_string())),
    };
    let mut out = recover_with_targets(model, prompt, id.x_sub_position, id.y_sub, id.y_dom, config)?;
    out.identified = Some(id);
    Ok(out)
}

/// Circuit search with known positions and answers.
pub fn recover_with_targets<T: Scalar>(
    model: &Model<T>,
    prompt: &[usize],
    x_sub_position: usize,
    y_sub: usize,
    y_dom: usize,
    config: &RecoveryConfig,
) -> Result<RecoveryOutcome> {
    let mut corrupt = prompt.to_vec();
    corrupt[x_sub_position] = PLACEHOLDER;
    let pair = PromptPair {
        clean: prompt.to_vec(),
        corrupt: corrupt.clone(),
        target: y_sub,
        foil: y_dom,
        group: None,
    };
    let scored = eap_ig_scores(model, std::slice::from_ref(&pair), config.ig_steps)?;
    let traces = PairTraces::new(model, &pair)?;
    let total = scored.edges.len();

    let mut memo = Memo::new(|n| {
        let g = scored.prune(PruneCriterion::TopN(n))?;
        Ok(run_circuit(model, &g, &traces)?.metric)
    });
    let (n_opt, _) = two_stage_search(&mut memo, total)?;
    let curve = memo.curve;

    let graph = scored.prune(PruneCriterion::TopN(n_opt))?;
    let run = run_circuit(model, &graph, &traces)?;
    let last = |l: &crate::ndtensor::Tensor<T>| -> Vec<f64> {
        l.row(l.shape()[0] - 1).iter().map(|x| x.to_f64_lossy()).collect()
    };
    let full = prediction(&last(&traces.clean.logits), y_sub, y_dom);
    // metric_m subtracts in the model's precision.
    debug_assert!((full.metric - metric_m(&traces.clean.logits, y_sub, y_dom)).abs() <= 1e-5 * (1.0 + full.metric.abs()));
    let circuit = prediction(&last(&run.logits), y_sub, y_dom);
    let trivial = full.argmax == y_sub;
    let recovered = circuit.argmax == y_sub;
    Ok(RecoveryOutcome {
        prompt: prompt.to_vec(),
        config: *config,
        identified: None,
        failure: None,
        corrupt: Some(corrupt),
        n_opt: Some(n_opt),
        total_edges: total,
        full: Some(full),
        circuit: Some(circuit),
        circuit_graph: Some(graph),
        curve,
        trivial,
        recovered,
    })
}

#[cfg(test)]
mod tests;
