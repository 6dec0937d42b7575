use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nanoformer::{forward, rank_of, Model, PAD, PLACEHOLDER};
use crate::ndtensor::Scalar;

/// How a contrast prompt removes one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastMode {
    /// Drop the token; the prompt gets one shorter.
    Delete,
    /// Replace the token by the placeholder id; length is kept. Default,
    /// since deleting shifts every later absolute position.
    #[default]
    Mask,
    /// Drop the token and left-pad, so later tokens keep their positions.
    PadDelete,
}

pub fn contrast_prompt(prompt: &[usize], pos: usize, mode: ContrastMode) -> Vec<usize> {
    let mut p = prompt.to_vec();
    match mode {
        ContrastMode::Delete => {
            p.remove(pos);
        }
        ContrastMode::Mask => p[pos] = PLACEHOLDER,
        ContrastMode::PadDelete => {
            p.remove(pos);
            p.insert(0, PAD);
        }
    }
    p
}

/// Final-position log-probabilities.
pub fn next_token_log_probs<T: Scalar>(model: &Model<T>, prompt: &[usize]) -> Result<Vec<f64>> {
    let (logits, _) = forward(model, prompt)?;
    let row: Vec<f64> = logits.row(prompt.len() - 1).iter().map(|x| x.to_f64_lossy()).collect();
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(row.iter().map(|x| x - lse).collect())
}

/// Ids of the `k` most probable tokens, most probable first (ties by id).
pub fn top_k(log_probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..log_probs.len()).collect();
    idx.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpmiTerm {
    pub token: usize,
    pub rpmi: f64,
    pub weight: f64,
}

/// One contrast prompt and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpmiRow {
    pub position: usize,
    pub token: usize,
    pub contrast: Vec<usize>,
    pub top: Vec<usize>,
    /// R-PMI on the intersection of both top-k sets.
    pub terms: Vec<RpmiTerm>,
    pub s_plain: f64,
    pub s_weighted: f64,
    /// The two top-k sets are disjoint; scores default to 0.
    pub empty_intersection: bool,
    #[serde(skip)]
    pub log_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpmiTable {
    pub prompt: Vec<usize>,
    pub k: usize,
    pub mode: ContrastMode,
    pub top: Vec<usize>,
    pub rows: Vec<RpmiRow>,
    /// Position whose contrast minimizes the weighted sum.
    pub x_sub_position: usize,
    #[serde(skip)]
    pub log_probs: Vec<f64>,
}

impl RpmiTable {
    pub fn x_sub_token(&self) -> usize {
        self.prompt[self.x_sub_position]
    }
}

/// `log p(y | P) − log p(y | P')`.
pub fn rpmi(log_p: f64, log_p_contrast: f64) -> f64 {
    log_p - log_p_contrast
}

/// Sum of the negative parts of `values`, each scaled by its weight.
pub fn clamped_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v.min(0.0) * w).sum()
}

fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

pub fn rpmi_identify<T: Scalar>(model: &Model<T>, prompt: &[usize], k: usize, mode: ContrastMode) -> Result<RpmiTable> {
    if k < 2 {
        return Err(Error::Input(format!("top-k size {k} < 2")));
    }
    if prompt.len() < 2 {
        return Err(Error::Input("R-PMI needs a prompt of at least two tokens".into()));
    }
    let base = next_token_log_probs(model, prompt)?;
    let top = top_k(&base, k);
    let contrasts: Vec<(Vec<usize>, Vec<f64>)> = (0..prompt.len())
        .map(|pos| {
            let c = contrast_prompt(prompt, pos, mode);
            let lp = next_token_log_probs(model, &c)?;
            Ok((c, lp))
        })
        .collect::<Result<_>>()?;
    // Variance over contrasts of each token's log-probability change.
    let var: Vec<f64> = (0..base.len())
        .map(|y| {
            let d: Vec<f64> = contrasts.iter().map(|(_, lp)| rpmi(base[y], lp[y])).collect();
            variance(&d)
        })
        .collect();
    let mut rows = Vec::with_capacity(prompt.len());
    for (pos, (contrast, lp)) in contrasts.into_iter().enumerate() {
        let ctop = top_k(&lp, k);
        let terms: Vec<RpmiTerm> = top
            .iter()
            .filter(|y| ctop.contains(y))
            .map(|&y| RpmiTerm {
                token: y,
                rpmi: rpmi(base[y], lp[y]),
                weight: var[y],
            })
            .collect();
        let vals: Vec<f64> = terms.iter().map(|t| t.rpmi).collect();
        let ws: Vec<f64> = terms.iter().map(|t| t.weight).collect();
        rows.push(RpmiRow {
            position: pos,
            token: prompt[pos],
            contrast,
            top: ctop,
            s_plain: clamped_sum(&vals, &vec![1.0; vals.len()]),
            s_weighted: clamped_sum(&vals, &ws),
            empty_intersection: terms.is_empty(),
            terms,
            log_probs: lp,
        });
    }
    let x_sub_position = rows
        .iter()
        .min_by(|a, b| a.s_weighted.total_cmp(&b.s_weighted).then(a.position.cmp(&b.position)))
        .map(|r| r.position)
        .expect("prompt has positions");
    Ok(RpmiTable {
        prompt: prompt.to_vec(),
        k,
        mode,
        top,
        rows,
        x_sub_position,
        log_probs: base,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScores {
    pub token: usize,
    pub original_rank: usize,
    pub mean_elevation: f64,
    pub weighted_elevation: f64,
    pub mean_contrast_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identified {
    pub x_sub_position: usize,
    pub x_sub: usize,
    pub y_sub: usize,
    pub y_dom: usize,
    pub candidates: Vec<TargetScores>,
}

/// Picks `y_sub` by weighted rank elevation under the non-subordinate
/// contrasts and `y_dom` by best mean rank over all contrasts. Both are drawn
/// from the top-k of the original prompt.
pub fn identify_targets(table: &RpmiTable) -> Result<Identified> {
    let k = table.k as f64;
    let others: Vec<&RpmiRow> = table
        .rows
        .iter()
        .filter(|r| r.position != table.x_sub_position)
        .collect();
    let candidates: Vec<TargetScores> = table
        .top
        .iter()
        .map(|&y| {
            let original_rank = rank_of(&table.log_probs, y);
            let elev: Vec<f64> = others
                .iter()
                .map(|r| original_rank as f64 - rank_of(&r.log_probs, y) as f64)
                .collect();
            let mean_elevation = if elev.is_empty() {
                0.0
            } else {
                elev.iter().sum::<f64>() / elev.len() as f64
            };
            let ranks: Vec<f64> = table.rows.iter().map(|r| rank_of(&r.log_probs, y) as f64).collect();
            TargetScores {
                token: y,
                original_rank,
                mean_elevation,
                weighted_elevation: (k - original_rank as f64) * mean_elevation,
                mean_contrast_rank: ranks.iter().sum::<f64>() / ranks.len() as f64,
            }
        })
        .collect();
    let y_sub = candidates
        .iter()
        .max_by(|a, b| {
            a.weighted_elevation
                .total_cmp(&b.weighted_elevation)
                .then(b.original_rank.cmp(&a.original_rank))
        })
        .map(|c| c.token)
        .expect("k ≥ 2");
    let y_dom = candidates
        .iter()
        .min_by(|a, b| {
            a.mean_contrast_rank
                .total_cmp(&b.mean_contrast_rank)
                .then(a.original_rank.cmp(&b.original_rank))
        })
        .map(|c| c.token)
        .expect("k ≥ 2");
    if y_sub == y_dom {
        return Err(Error::Input(format!(
            "target identification is ambiguous: token {y_sub} wins both rules"
        )));
    }
    Ok(Identified {
        x_sub_position: table.x_sub_position,
        x_sub: table.x_sub_token(),
        y_sub,
        y_dom,
        candidates,
    })
}
