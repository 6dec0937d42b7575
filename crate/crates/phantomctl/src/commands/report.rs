use std::fs::{self, File};
use std::path::Path;

use phantom_core::dynamics::{read_metrics_csv, EpochMetrics, PhaseReport};
use serde::{Deserialize, Serialize};

use super::train::{METRICS_FILE, PHASES_FILE};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub epochs: usize,
    pub phases: Option<PhaseReport>,
    pub peak_ro: Option<(usize, f64)>,
    pub last: Option<EpochMetrics>,
    pub manifest_files: usize,
}

/// Summarizes a run directory after checking its manifest.
pub fn report(run: &Path) -> Result<RunReport> {
    if !run.is_dir() {
        return Err(CliError::Usage(format!("{} is not a run directory", run.display())));
    }
    let manifest = RunManifest::load_or_new(run)?;
    manifest.validate(run)?;
    let rows = match File::open(run.join(METRICS_FILE)) {
        Ok(f) => read_metrics_csv(f)?,
        Err(_) => Vec::new(),
    };
    let phases = match fs::read(run.join(PHASES_FILE)) {
        Ok(b) => Some(serde_json::from_slice(&b)?),
        Err(_) => None,
    };
    let peak_ro = rows
        .iter()
        .filter_map(|r| r.ro.map(|ro| (r.epoch, ro)))
        .fold(None, |best: Option<(usize, f64)>, x| match best {
            Some(b) if b.1 >= x.1 => Some(b),
            _ => Some(x),
        });
    Ok(RunReport {
        epochs: rows.last().map_or(0, |r| r.epoch),
        phases,
        peak_ro,
        last: rows.last().cloned(),
        manifest_files: manifest.files.len(),
    })
}

impl RunReport {
    pub fn text(&self) -> String {
        let f = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
        let mut s = format!("epochs: {}\n", self.epochs);
        if let Some((e, ro)) = self.peak_ro {
            s += &format!("peak RO: {ro:.3} at epoch {e}\n");
        }
        if let Some(last) = &self.last {
            s += &format!(
                "final: AO {:.3}  R_dom {:.3}  RO {}\n",
                last.ao,
                last.r_dom,
                last.ro.map_or("NA".into(), |r| format!("{r:.3}"))
            );
        }
        if let Some(p) = &self.phases {
            s += &format!(
                "onset {}  duration {}  recovery {}\n",
                f(p.onset),
                f(p.duration),
                f(p.recovery)
            );
        }
        s += &format!("manifest: {} files verified\n", self.manifest_files);
        s
    }
}
