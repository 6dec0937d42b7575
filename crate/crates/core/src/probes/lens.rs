use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nanoformer::{forward, rank_of, unembed, Model};
use crate::ndtensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensEntry {
    /// 0 is the embedding; `l + 1` is the stream after layer `l`.
    pub layer: usize,
    pub logit_sub: f64,
    pub logit_dom: f64,
    /// 0 is the top token.
    pub rank_sub: usize,
    pub rank_dom: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitLensReport {
    pub y_sub: usize,
    pub y_dom: usize,
    pub entries: Vec<LensEntry>,
    /// Lens logits at the final position, one row per entry.
    #[serde(skip)]
    pub logits: Vec<Vec<f64>>,
}

impl LogitLensReport {
    /// First layer from which `y_sub` outranks `y_dom` through the end.
    pub fn juncture(&self) -> Option<usize> {
        let ahead = |e: &LensEntry| e.rank_sub < e.rank_dom;
        let last = self.entries.last()?;
        if !ahead(last) {
            return None;
        }
        let start = self
            .entries
            .iter()
            .rposition(|e| !ahead(e))
            .map_or(0, |i| i + 1);
        Some(self.entries[start].layer)
    }
}

/// Projects the residual stream at the final position after every layer
/// through the final layer norm and unembedding.
pub fn logit_lens<T: Scalar>(model: &Model<T>, prompt: &[usize], y_sub: usize, y_dom: usize) -> Result<LogitLensReport> {
    let v = model.config().vocab_size;
    if y_sub >= v || y_dom >= v {
        return Err(Error::Input(format!("lens targets ({y_sub}, {y_dom}) out of range for vocab {v}")));
    }
    let (_, trace) = forward(model, prompt)?;
    let t = prompt.len();
    let d = model.config().d_model;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let last_rows: Vec<T> = trace
        .residuals
        .iter()
        .flat_map(|r| r.row(t - 1).iter().copied())
        .collect();
    let x = g.constant(Tensor::new([trace.residuals.len(), d], last_rows)?);
    let lens = unembed(&mut g, model, &params, x)?;
    let vals = g.value(lens);
    let mut entries = Vec::new();
    let mut logits = Vec::new();
    for layer in 0..trace.residuals.len() {
        let row: Vec<f64> = vals.row(layer).iter().map(|x| x.to_f64_lossy()).collect();
        entries.push(LensEntry {
            layer,
            logit_sub: row[y_sub],
            logit_dom: row[y_dom],
            rank_sub: rank_of(&row, y_sub),
            rank_dom: rank_of(&row, y_dom),
        });
        logits.push(row);
    }
    Ok(LogitLensReport {
        y_sub,
        y_dom,
        entries,
        logits,
    })
}
