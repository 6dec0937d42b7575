use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{compute_lp, LossLedger};
use crate::error::{Error, Result};
use crate::nanoformer::{argmax, forward_batch, Model};
use crate::ndtensor::Scalar;
use crate::shadowgen::{Dataset, EvalSplit, PromptRecord};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OvershadowCounts {
    /// Subordinate prompts answered with their group's dominant answer.
    pub m_sub: usize,
    pub n_sub: usize,
    /// Dominant prompts answered correctly.
    pub m_dom: usize,
    pub n_dom: usize,
}

impl OvershadowCounts {
    pub fn ao(&self) -> f64 {
        ratio(self.m_sub, self.n_sub)
    }

    pub fn r_dom(&self) -> f64 {
        ratio(self.m_dom, self.n_dom)
    }

    /// `None` when no dominant prompt was recalled.
    pub fn ro(&self) -> Option<f64> {
        (self.m_dom > 0).then(|| self.ao() / self.r_dom())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Popularity of a group: dominant over subordinate record count.
pub fn popularity(n_dom: usize, n_sub: usize) -> Option<f64> {
    (n_sub > 0).then(|| n_dom as f64 / n_sub as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ao: f64,
    pub r_dom: f64,
    pub ro: Option<f64>,
    /// Absent for the untrained evaluation row.
    pub lp: Option<f64>,
    pub mean_loss: Option<f64>,
    pub m_sub: usize,
    pub n_sub: usize,
    pub m_dom: usize,
    pub n_dom: usize,
}

impl EpochMetrics {
    pub fn new(epoch: usize, c: OvershadowCounts, ledger: Option<&LossLedger>) -> Self {
        EpochMetrics {
            epoch,
            ao: c.ao(),
            r_dom: c.r_dom(),
            ro: c.ro(),
            lp: ledger.map(|l| compute_lp(l).lp),
            mean_loss: ledger.and_then(LossLedger::mean_loss),
            m_sub: c.m_sub,
            n_sub: c.n_sub,
            m_dom: c.m_dom,
            n_dom: c.n_dom,
        }
    }

    pub fn counts(&self) -> OvershadowCounts {
        OvershadowCounts {
            m_sub: self.m_sub,
            n_sub: self.n_sub,
            m_dom: self.m_dom,
            n_dom: self.n_dom,
        }
    }
}

/// Greedy answer for each prompt.
pub fn predict<T: Scalar>(model: &Model<T>, prompts: &[&PromptRecord]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(prompts.len());
    let v = model.config().vocab_size;
    for chunk in prompts.chunks(EVAL_CHUNK) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|r| r.tokens.clone()).collect();
        let t = seqs[0].len();
        let logits = forward_batch(model, &seqs)?;
        for b in 0..chunk.len() {
            let row = &logits.data()[(b * t + t - 1) * v..(b * t + t) * v];
            out.push(argmax(row));
        }
    }
    Ok(out)
}

pub fn overshadowing_counts<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    split: &EvalSplit,
) -> Result<OvershadowCounts> {
    if split.dominant.is_empty() && split.subordinate.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let y_dom = |r: &PromptRecord| {
        ds.group(r.group)
            .map(|g| g.y_dom)
            .ok_or_else(|| Error::Input(format!("record refers to unknown group {}", r.group)))
    };
    let mut c = OvershadowCounts {
        n_sub: split.subordinate.len(),
        n_dom: split.dominant.len(),
        ..Default::default()
    };
    let doms: Vec<&PromptRecord> = split.dominant.iter().collect();
    for (r, p) in doms.iter().zip(predict(model, &doms)?) {
        c.m_dom += usize::from(p == y_dom(r)?);
    }
    let subs: Vec<&PromptRecord> = split.subordinate.iter().collect();
    for (r, p) in subs.iter().zip(predict(model, &subs)?) {
        c.m_sub += usize::from(p == y_dom(r)?);
    }
    Ok(c)
}

pub fn evaluate_overshadowing<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    split: &EvalSplit,
    epoch: usize,
    ledger: Option<&LossLedger>,
) -> Result<EpochMetrics> {
    Ok(EpochMetrics::new(epoch, overshadowing_counts(model, ds, split)?, ledger))
}

pub const METRICS_HEADER: [&str; 10] = [
    "epoch", "AO", "R_dom", "RO", "LP", "mean_loss", "M_sub", "N_sub", "M_dom", "N_dom",
];

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_metrics_csv<W: Write>(rows: &[EpochMetrics], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Input(format!("metrics csv: {e}"));
    out.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.ao.to_string(),
            r.r_dom.to_string(),
            opt(r.ro),
            opt(r.lp),
            opt(r.mean_loss),
            r.m_sub.to_string(),
            r.n_sub.to_string(),
            r.m_dom.to_string(),
            r.n_dom.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<EpochMetrics>> {
    let mut rdr = csv::Reader::from_reader(r);
    let bad = |m: String| Error::Input(format!("metrics csv: {m}"));
    let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().ne(METRICS_HEADER) {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |k: usize| -> Result<f64> {
            rec[k]
                .parse()
                .map_err(|_| bad(format!("row {}: bad {} value {:?}", i + 1, METRICS_HEADER[k], &rec[k])))
        };
        let n = |k: usize| f(k).map(|x| x as usize);
        let o = |k: usize| -> Result<Option<f64>> {
            if &rec[k] == "NA" {
                Ok(None)
            } else {
                f(k).map(Some)
            }
        };
        rows.push(EpochMetrics {
            epoch: n(0)?,
            ao: f(1)?,
            r_dom: f(2)?,
            ro: o(3)?,
            lp: o(4)?,
            mean_loss: o(5)?,
            m_sub: n(6)?,
            n_sub: n(7)?,
            m_dom: n(8)?,
            n_dom: n(9)?,
        });
    }
    Ok(rows)
}
