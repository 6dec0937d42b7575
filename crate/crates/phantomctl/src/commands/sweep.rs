use std::fs::{self, File};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{train, TrainSummary};
use crate::config::{Preset, RunConfig};
use crate::error::Result;
use crate::manifest;

pub const AGGREGATE_FILE: &str = "aggregate.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub preset: Preset,
    pub popularity: usize,
    pub target_tokens: usize,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}_P{}_D{}", self.preset.name(), self.popularity, self.target_tokens)
    }

    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.preset = Some(self.preset);
        c.dataset.popularity = self.popularity;
        c.dataset.target_tokens = self.target_tokens;
        c
    }
}

/// Cells in deterministic order: preset, then P, then D, each as given.
pub fn grid(presets: &[Preset], ps: &[usize], ds: &[usize]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &preset in presets {
        for &popularity in ps {
            for &target_tokens in ds {
                out.push(Cell {
                    preset,
                    popularity,
                    target_tokens,
                });
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub outcome: std::result::Result<TrainSummary, String>,
}

const AGGREGATE_HEADER: [&str; 13] = [
    "cell",
    "preset",
    "P",
    "D",
    "status",
    "epochs",
    "onset",
    "duration",
    "recovery",
    "onset_rate",
    "recovery_rate",
    "final_RO",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

/// Trains every cell under `out/cells/<name>`; a failing cell is recorded
/// and the sweep moves on.
pub fn sweep(base: &RunConfig, cells: &[Cell], out: &Path, resume: bool) -> Result<Vec<CellResult>> {
    fs::create_dir_all(out.join("cells"))?;
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let dir = out.join("cells").join(cell.name());
        let outcome = train(&cell.config(base), &dir, resume).map_err(|e| e.to_string());
        results.push(CellResult {
            cell: cell.clone(),
            outcome,
        });
        write_aggregate(&results, &out.join(AGGREGATE_FILE))?;
    }
    write_aggregate(&results, &out.join(AGGREGATE_FILE))?;
    manifest::update(out, |m| m.track(out, AGGREGATE_FILE))?;
    Ok(results)
}

fn write_aggregate(results: &[CellResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(AGGREGATE_HEADER)?;
    for r in results {
        let c = &r.cell;
        let mut row = vec![
            c.name(),
            c.preset.name().to_string(),
            c.popularity.to_string(),
            c.target_tokens.to_string(),
        ];
        match &r.outcome {
            Ok(s) => {
                let p = &s.phases;
                row.extend([
                    "ok".to_string(),
                    s.epochs_run.to_string(),
                    opt(p.onset),
                    opt(p.duration),
                    opt(p.recovery),
                    opt(p.onset_rate),
                    opt(p.recovery_rate),
                    opt(s.final_ro),
                    String::new(),
                ]);
            }
            Err(e) => {
                row.extend(["failed".to_string()]);
                row.extend(std::iter::repeat_n("NA".to_string(), 7));
                row.push(e.clone());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
