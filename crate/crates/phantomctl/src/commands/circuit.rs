use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use phantom_core::circuits::{
    eap_ig_scores, read_circuit_json, run_circuit, to_dot, write_circuit_json, CircuitGraph, PairTraces, PromptPair,
    PruneCriterion,
};
use phantom_core::dynamics::predict;
use phantom_core::nanoformer::{Model, NodeId};
use phantom_core::probes::{
    ablate_heads, circuit_heads, high_attention_heads, logit_lens, report_from_maps, trace_structure, AblationResult,
    AttentionReport, HighAttentionSet, LogitLensReport, Structure,
};
use phantom_core::recovery::{recover, recover_with_targets, two_stage_search, EdgeCurve, Memo, RecoveryConfig, RecoveryOutcome};
use phantom_core::shadowgen::{make_corrupt, Dataset, PromptRecord, ENTITY_POS};
use phantom_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CIRCUIT_FILE: &str = "circuit.json";
pub const CIRCUIT_DOT: &str = "circuit.dot";
pub const OPT_FILE: &str = "circuit_opt.json";
pub const OPT_DOT: &str = "circuit_opt.dot";
pub const CURVE_FILE: &str = "edge_curve.csv";
pub const OPTIMIZE_FILE: &str = "optimize.json";
pub const PROBE_FILE: &str = "probe.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const RECOVERY_FILE: &str = "recovery.json";

fn pair_for(ds: &Dataset, r: &PromptRecord) -> Result<PromptPair> {
    let g = ds
        .group(r.group)
        .ok_or_else(|| CliError::Runtime(format!("record refers to unknown group {}", r.group)))?;
    Ok(PromptPair {
        clean: r.tokens.clone(),
        corrupt: make_corrupt(r)?.tokens,
        target: g.y_sub,
        foil: g.y_dom,
        group: Some(g.id),
    })
}

/// Subordinate prompts with their placeholder counterparts, by group order.
pub fn pairs_from_dataset(ds: &Dataset, n: usize) -> Result<Vec<PromptPair>> {
    ds.subordinate().take(n).map(|r| pair_for(ds, r)).collect()
}

/// Subordinate prompts the model currently answers with the dominant answer.
pub fn overshadowed_pairs<T: Scalar>(model: &Model<T>, ds: &Dataset, n: usize) -> Result<Vec<PromptPair>> {
    let subs: Vec<&PromptRecord> = ds.subordinate().collect();
    let preds = predict(model, &subs)?;
    let mut out = Vec::new();
    for (r, p) in subs.iter().zip(preds) {
        let pair = pair_for(ds, r)?;
        if p == pair.foil {
            out.push(pair);
            if out.len() == n {
                break;
            }
        }
    }
    Ok(out)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PromptPair>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_circuit(path: &Path) -> Result<CircuitGraph> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("cannot open circuit {}: {e}", path.display())))?;
    Ok(read_circuit_json(f)?)
}

pub fn save_circuit(graph: &CircuitGraph, dir: &Path, json: &str, dot: &str) -> Result<()> {
    write_circuit_json(graph, BufWriter::new(File::create(dir.join(json))?))?;
    fs::write(dir.join(dot), to_dot(graph))?;
    Ok(())
}

fn traces<T: Scalar>(model: &Model<T>, pairs: &[PromptPair]) -> Result<Vec<PairTraces<T>>> {
    if pairs.is_empty() {
        return Err(CliError::Runtime("no prompt pairs to analyse".into()));
    }
    pairs.iter().map(|p| Ok(PairTraces::new(model, p)?)).collect()
}

/// Scores every edge and applies `criterion` (all edges stay active without one).
pub fn build<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    ig_steps: usize,
    criterion: Option<PruneCriterion>,
) -> Result<CircuitGraph> {
    if pairs.is_empty() {
        return Err(CliError::Runtime("no prompt pairs to score".into()));
    }
    let g = eap_ig_scores(model, pairs, ig_steps)?;
    Ok(match criterion {
        Some(c) => g.prune(c)?,
        None => g,
    })
}

pub fn mean_metric<T: Scalar>(
    model: &Model<T>,
    graph: &CircuitGraph,
    traces: &[PairTraces<T>],
) -> phantom_core::Result<f64> {
    let mut total = 0.0;
    for t in traces {
        total += run_circuit(model, graph, t)?.metric;
    }
    Ok(total / traces.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeReport {
    pub n_opt: usize,
    pub total_edges: usize,
    pub metric: f64,
    pub full_metric: f64,
    pub evaluations: usize,
}

/// Edge count maximizing the mean metric over `pairs`.
pub fn optimize<T: Scalar>(
    model: &Model<T>,
    scored: &CircuitGraph,
    pairs: &[PromptPair],
) -> Result<(CircuitGraph, EdgeCurve, OptimizeReport)> {
    let tr = traces(model, pairs)?;
    let total = scored.edges.len();
    let mut memo = Memo::new(|n| {
        let g = scored.prune(PruneCriterion::TopN(n))?;
        mean_metric(model, &g, &tr)
    });
    let (n_opt, metric) = two_stage_search(&mut memo, total)?;
    let evaluations = memo.calls;
    let curve = memo.curve;
    let graph = scored.prune(PruneCriterion::TopN(n_opt))?;
    let full_metric = tr.iter().map(|t| t.clean_metric()).sum::<f64>() / tr.len() as f64;
    Ok((
        graph,
        curve,
        OptimizeReport {
            n_opt,
            total_edges: total,
            metric,
            full_metric,
            evaluations,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub circuit_heads: Vec<NodeId>,
    /// Circuit-run attention from the final position onto the entity slot.
    pub attention: AttentionReport,
    pub mean_circuit_attention: f64,
    pub high_attention: HighAttentionSet,
    pub lens: Vec<LogitLensReport>,
    pub structures: Vec<Structure>,
}

pub fn probe<T: Scalar>(
    model: &Model<T>,
    graph: &CircuitGraph,
    pairs: &[PromptPair],
    threshold: f64,
    lens_prompts: usize,
) -> Result<ProbeReport> {
    let tr = traces(model, pairs)?;
    let mut maps = Vec::with_capacity(tr.len());
    for t in &tr {
        maps.push(run_circuit(model, graph, t)?.attention);
    }
    let attention = report_from_maps(model, &maps, &[ENTITY_POS])?;
    let heads = circuit_heads(graph);
    let lens = pairs
        .iter()
        .take(lens_prompts)
        .map(|p| Ok(logit_lens(model, &p.clean, p.target, p.foil)?))
        .collect::<Result<Vec<_>>>()?;
    let structures = heads
        .iter()
        .map(|&h| Ok(trace_structure(graph, h)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeReport {
        mean_circuit_attention: attention.mean(Some(&heads)),
        high_attention: high_attention_heads(&attention, threshold, None),
        circuit_heads: heads,
        attention,
        lens,
        structures,
    })
}

pub fn ablate<T: Scalar>(
    model: &Model<T>,
    graph: &CircuitGraph,
    pairs: &[PromptPair],
    proportions: &[f64],
) -> Result<Vec<AblationResult>> {
    let tr = traces(model, pairs)?;
    proportions
        .iter()
        .map(|&p| Ok(ablate_heads(model, graph, &tr, p, &[ENTITY_POS])?))
        .collect()
}

/// Known answers for a prompt taken from a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub group: Option<usize>,
    pub x_sub_position: usize,
    pub y_sub: usize,
    pub y_dom: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryCase {
    pub truth: Option<Truth>,
    pub identification_correct: Option<bool>,
    pub outcome: RecoveryOutcome,
}

/// Runs recovery on each pair's clean prompt. With `use_truth` the known
/// entity position and answers replace automatic identification.
pub fn recover_pairs<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    cfg: &RecoveryConfig,
    use_truth: bool,
) -> Result<Vec<RecoveryCase>> {
    pairs
        .iter()
        .map(|p| {
            let pos = p
                .clean
                .iter()
                .zip(&p.corrupt)
                .position(|(a, b)| a != b)
                .unwrap_or(ENTITY_POS);
            let truth = Truth {
                group: p.group,
                x_sub_position: pos,
                y_sub: p.target,
                y_dom: p.foil,
            };
            let outcome = if use_truth {
                recover_with_targets(model, &p.clean, pos, p.target, p.foil, cfg)?
            } else {
                recover(model, &p.clean, cfg)?
            };
            let identification_correct = outcome
                .identified
                .as_ref()
                .map(|id| id.x_sub_position == pos && id.y_sub == p.target && id.y_dom == p.foil);
            Ok(RecoveryCase {
                truth: Some(truth),
                identification_correct,
                outcome,
            })
        })
        .collect()
}

pub fn recover_prompt<T: Scalar>(model: &Model<T>, prompt: &[usize], cfg: &RecoveryConfig) -> Result<RecoveryCase> {
    Ok(RecoveryCase {
        truth: None,
        identification_correct: None,
        outcome: recover(model, prompt, cfg)?,
    })
}

pub fn write_json<S: Serialize>(dir: &Path, name: &str, value: &S) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_vec_pretty(value)?)?;
    Ok(())
}
