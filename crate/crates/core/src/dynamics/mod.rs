//! Training loop and overshadowing-dynamics instrumentation.

mod metrics;
mod phases;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nanoformer::{run, Checkpoint, Model, RunOptions};
use crate::ndtensor::{Graph, Scalar, Tensor};
use crate::shadowgen::{Dataset, PromptRecord};

pub use metrics::{
    popularity, predict,
    evaluate_overshadowing, overshadowing_counts, read_metrics_csv, write_metrics_csv, EpochMetrics,
    OvershadowCounts, METRICS_HEADER,
};
pub use phases::{segment_phases, PhaseReport, PhaseThresholds};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub eval_dom: usize,
    pub eval_sub: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_dom: 500,
            eval_sub: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Shuffle seed for one epoch, derived from the master seed.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        self.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &TrainConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::lit(self.lr);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Loss of one record in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub loss: f64,
    pub subordinate: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLedger {
    pub entries: Vec<LedgerEntry>,
}

impl LossLedger {
    pub fn push(&mut self, loss: f64, subordinate: bool) {
        self.entries.push(LedgerEntry { loss, subordinate });
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.loss).sum()
    }

    pub fn mean_loss(&self) -> Option<f64> {
        (!self.entries.is_empty()).then(|| self.total() / self.entries.len() as f64)
    }
}

/// Subordinate share of an epoch's loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossProportion {
    pub lp: f64,
    /// Total loss was zero; `lp` is reported as 0.
    pub degenerate: bool,
}

pub fn compute_lp(ledger: &LossLedger) -> LossProportion {
    let total = ledger.total();
    if total == 0.0 {
        return LossProportion {
            lp: 0.0,
            degenerate: true,
        };
    }
    let sub: f64 = ledger
        .entries
        .iter()
        .filter(|e| e.subordinate)
        .map(|e| e.loss)
        .sum();
    LossProportion {
        lp: sub / total,
        degenerate: false,
    }
}

/// Next-token targets for a full record sequence; the final position has none.
fn targets(seq: &[usize]) -> Vec<Option<usize>> {
    seq[1..].iter().map(|&t| Some(t)).chain(std::iter::once(None)).collect()
}

/// Summed next-token loss of every record in `batch`, plus parameter
/// gradients of the batch-mean loss when `with_grads` is set.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    batch: &[&PromptRecord],
    with_grads: bool,
) -> Result<(Vec<f64>, Option<Vec<Tensor<T>>>)> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|r| r.sequence()).collect();
    let t = seqs[0].len();
    let mut g = Graph::new();
    let params = model.bind(&mut g, with_grads);
    let out = run(&mut g, model, &params, &seqs, RunOptions::plain())?;
    let tg: Vec<Option<usize>> = seqs.iter().flat_map(|s| targets(s)).collect();
    let rows = g.cross_entropy(out.logits, &tg)?;
    let per_record: Vec<f64> = g
        .value(rows)
        .data()
        .chunks(t)
        .map(|c| c.iter().map(|x| x.to_f64_lossy()).sum())
        .collect();
    if !with_grads {
        return Ok((per_record, None));
    }
    let total = g.sum(rows);
    let loss = g.scale(total, T::lit(1.0 / batch.len() as f64));
    let mut grads = g.backward(loss)?;
    let gs = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((per_record, Some(gs)))
}

/// Model plus optimizer state; the unit that is checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: Adam<T>,
    pub config: TrainConfig,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let opt = Adam::new(&config, model.params());
        Ok(Trainer {
            model,
            opt,
            config,
            epoch: 0,
        })
    }

    /// One shuffled pass over the dataset.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<LossLedger> {
        let vocab = self.model.config().vocab_size;
        if vocab < ds.spec.vocab_size {
            return Err(Error::Config(format!(
                "model vocab {vocab} < dataset vocab {}",
                ds.spec.vocab_size
            )));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..ds.records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.epoch_seed(epoch)));
        let mut ledger = LossLedger::default();
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&PromptRecord> = chunk.iter().map(|&i| &ds.records[i]).collect();
            let (losses, grads) = batch_loss(&self.model, &batch, true)?;
            let sum: f64 = losses.iter().sum();
            if !sum.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    lr: self.config.learning_rate,
                    loss: sum,
                });
            }
            for (l, r) in losses.iter().zip(&batch) {
                ledger.push(*l, r.is_subordinate());
            }
            self.opt.step(self.model.params_mut(), &grads.expect("requested"));
        }
        self.epoch = epoch;
        Ok(ledger)
    }

    /// Weights, optimizer moments and progress in one checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        for (i, name) in self.model.layout().names.iter().enumerate() {
            ck.push(format!("adam.m.{name}"), &self.opt.m[i]);
            ck.push(format!("adam.v.{name}"), &self.opt.v[i]);
        }
        ck.meta = serde_json::json!({
            "epoch": self.epoch,
            "adam_t": self.opt.t,
            "train": self.config,
        });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        if ck.dtype != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, run uses {}",
                ck.dtype,
                T::PRECISION
            )));
        }
        let model: Model<T> = ck.to_model()?;
        let mut trainer = Trainer::new(model, config)?;
        let meta = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks `{k}`")))
        };
        trainer.epoch = meta("epoch")? as usize;
        trainer.opt.t = meta("adam_t")?;
        for (i, name) in trainer.model.layout().names.clone().iter().enumerate() {
            for (kind, slot) in [("m", &mut trainer.opt.m[i]), ("v", &mut trainer.opt.v[i])] {
                let t = ck
                    .tensor(&format!("adam.{kind}.{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state for {name}")))?;
                *slot = t.cast();
            }
        }
        Ok(trainer)
    }
}
