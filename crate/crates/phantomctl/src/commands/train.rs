use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use phantom_core::dynamics::{
    evaluate_overshadowing, read_metrics_csv, segment_phases, write_metrics_csv, EpochMetrics, LossLedger,
    PhaseReport, Trainer,
};
use phantom_core::nanoformer::{Checkpoint, Model};
use phantom_core::probes::{append_attention_series, attention_on_span};
use phantom_core::shadowgen::{generate, read_jsonl, sample_eval, write_jsonl, Dataset, ENTITY_POS};
use phantom_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest;

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ATTENTION_FILE: &str = "attention_series.csv";
pub const PHASES_FILE: &str = "phases.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Checkpoints in a run directory, by epoch.
pub fn list_checkpoints(out: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let dir = out.join(CHECKPOINT_DIR);
    let mut found = Vec::new();
    if !dir.exists() {
        return Ok(found);
    }
    for entry in fs::read_dir(&dir)? {
        let p = entry?.path();
        let epoch = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            found.push((e, p));
        }
    }
    found.sort();
    Ok(found)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| CliError::Usage(format!("cannot open dataset {}: {e}", path.display())))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(ds, &mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

/// Reuses the run directory's dataset when it matches the config.
fn prepare_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let path = out.join(DATASET_FILE);
    let spec = cfg.dataset.spec();
    if path.exists() {
        let ds = load_dataset(&path)?;
        if ds.spec != spec {
            return Err(CliError::Runtime(format!(
                "{} was generated from a different dataset spec",
                path.display()
            )));
        }
        return Ok(ds);
    }
    let ds = generate(&spec)?;
    save_dataset(&ds, &path)?;
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub phases: PhaseReport,
    pub final_ro: Option<f64>,
}

fn eval_seed(cfg: &RunConfig, epoch: usize) -> u64 {
    cfg.train.epoch_seed(epoch).rotate_left(17) ^ 0xA5A5
}

fn settled(rows: &[EpochMetrics], cfg: &RunConfig) -> bool {
    let Some(k) = cfg.schedule.settle_patience else {
        return false;
    };
    let trained: Vec<&EpochMetrics> = rows.iter().filter(|r| r.epoch > 0).collect();
    k > 0
        && trained.len() >= k
        && trained[trained.len() - k..]
            .iter()
            .all(|r| r.ro.is_some_and(|ro| ro <= cfg.probe.low))
}

struct Probe {
    sub: Vec<Vec<usize>>,
    dom: Vec<Vec<usize>>,
}

impl Probe {
    fn new(ds: &Dataset, n: usize) -> Self {
        Probe {
            sub: ds.subordinate().take(n).map(|r| r.tokens.clone()).collect(),
            dom: ds.dominant().take(n).map(|r| r.tokens.clone()).collect(),
        }
    }

    fn record<T: Scalar>(&self, model: &Model<T>, epoch: usize, path: &Path) -> Result<()> {
        if self.sub.is_empty() || self.dom.is_empty() {
            return Ok(());
        }
        let on_sub = attention_on_span(model, &self.sub, &[ENTITY_POS])?;
        let on_dom = attention_on_span(model, &self.dom, &[ENTITY_POS])?;
        let fresh = !path.exists();
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        append_attention_series(f, epoch, &on_sub, &on_dom, fresh)?;
        Ok(())
    }
}

/// Drops attention rows past `epoch` (resume).
fn truncate_attention(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut ck = trainer.to_checkpoint();
    ck.meta["run_hash"] = serde_json::json!(cfg.identity_hash());
    ck.save(&out.join(CHECKPOINT_DIR).join(checkpoint_name(trainer.epoch)))?;
    Ok(())
}

/// Trains (or resumes) the run described by `cfg` into `out`.
pub fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    let mut effective = cfg.clone();
    effective.output_dir = Some(out.to_path_buf());
    fs::write(out.join(CONFIG_FILE), effective.to_json())?;
    let ds = prepare_dataset(cfg, out)?;
    crate::dispatch!(cfg.model.precision, T => train_typed::<T>(cfg, out, &ds, resume))
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out: &Path, ds: &Dataset, resume: bool) -> Result<TrainSummary> {
    let metrics_path = out.join(METRICS_FILE);
    let attention_path = out.join(ATTENTION_FILE);
    let probe = Probe::new(ds, cfg.probe.probe_set);
    let evaluate = |model: &Model<T>, epoch: usize, ledger: Option<&LossLedger>| -> Result<EpochMetrics> {
        let split = sample_eval(ds, cfg.train.eval_dom, cfg.train.eval_sub, eval_seed(cfg, epoch))?;
        Ok(evaluate_overshadowing(model, ds, &split, epoch, ledger)?)
    };

    let latest = if resume { list_checkpoints(out)?.pop() } else { None };
    let (mut trainer, mut rows) = match latest {
        Some((epoch, path)) => {
            let ck = Checkpoint::load(&path)?;
            let hash = ck.meta.get("run_hash").and_then(|h| h.as_str()).unwrap_or_default();
            if hash != cfg.identity_hash() {
                return Err(CliError::Runtime(format!(
                    "{} was written by a different run configuration",
                    path.display()
                )));
            }
            let trainer = Trainer::<T>::from_checkpoint(&ck, cfg.train.clone())?;
            let rows: Vec<EpochMetrics> = match File::open(&metrics_path) {
                Ok(f) => read_metrics_csv(f)?.into_iter().filter(|r| r.epoch <= epoch).collect(),
                Err(_) => Vec::new(),
            };
            if rows.len() != epoch + 1 || rows.iter().enumerate().any(|(i, r)| r.epoch != i) {
                return Err(CliError::Runtime(format!(
                    "{METRICS_FILE} does not cover epochs 0..={epoch}; cannot resume"
                )));
            }
            truncate_attention(&attention_path, epoch)?;
            (trainer, rows)
        }
        None => {
            for (_, p) in list_checkpoints(out)? {
                fs::remove_file(p)?;
            }
            if attention_path.exists() {
                fs::remove_file(&attention_path)?;
            }
            let model = Model::<T>::init(cfg.model.config(ds.spec.vocab_size))?;
            let trainer = Trainer::new(model, cfg.train.clone())?;
            let rows = vec![evaluate(&trainer.model, 0, None)?];
            probe.record(&trainer.model, 0, &attention_path)?;
            write_metrics_csv(&rows, File::create(&metrics_path)?)?;
            save_checkpoint(&trainer, cfg, out)?;
            (trainer, rows)
        }
    };

    let mut stopped_early = false;
    while trainer.epoch < cfg.train.epochs {
        if settled(&rows, cfg) {
            stopped_early = true;
            break;
        }
        let ledger = trainer.train_epoch(ds)?;
        let e = trainer.epoch;
        rows.push(evaluate(&trainer.model, e, Some(&ledger))?);
        probe.record(&trainer.model, e, &attention_path)?;
        write_metrics_csv(&rows, File::create(&metrics_path)?)?;
        let last = e == cfg.train.epochs || settled(&rows, cfg);
        if e % cfg.schedule.checkpoint_every == 0 || last {
            save_checkpoint(&trainer, cfg, out)?;
        }
    }

    let series: Vec<Option<f64>> = rows.iter().map(|r| r.ro).collect();
    let phases = segment_phases(&series, cfg.probe.thresholds());
    fs::write(out.join(PHASES_FILE), serde_json::to_vec_pretty(&phases)?)?;

    let checkpoints = list_checkpoints(out)?;
    manifest::update(out, |m| {
        m.config_hash = Some(cfg.hash());
        m.files.retain(|f| !f.path.starts_with(CHECKPOINT_DIR));
        for f in [CONFIG_FILE, DATASET_FILE, METRICS_FILE, PHASES_FILE, ATTENTION_FILE] {
            if out.join(f).exists() {
                m.track(out, f)?;
            }
        }
        for (e, _) in &checkpoints {
            m.track(out, Path::new(CHECKPOINT_DIR).join(checkpoint_name(*e)))?;
        }
        Ok(())
    })?;

    Ok(TrainSummary {
        out: out.to_path_buf(),
        epochs_run: trainer.epoch,
        stopped_early,
        final_ro: rows.last().and_then(|r| r.ro),
        phases,
    })
}
