use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: Option<String>,
    pub code_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub files: Vec<FileEntry>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn load_or_new(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        if p.exists() {
            Ok(serde_json::from_slice(&std::fs::read(&p)?)?)
        } else {
            let t = now();
            Ok(RunManifest {
                config_hash: None,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                created_unix: t,
                updated_unix: t,
                files: Vec::new(),
            })
        }
    }

    /// Records (or refreshes) the byte length of `rel`, which must exist.
    pub fn track(&mut self, dir: &Path, rel: impl AsRef<Path>) -> Result<()> {
        let rel = rel.as_ref();
        let bytes = std::fs::metadata(dir.join(rel))?.len();
        match self.files.iter_mut().find(|f| f.path == rel) {
            Some(f) => f.bytes = bytes,
            None => self.files.push(FileEntry {
                path: rel.to_path_buf(),
                bytes,
            }),
        }
        Ok(())
    }

    pub fn forget(&mut self, rel: &Path) {
        self.files.retain(|f| f.path != rel);
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated_unix = now();
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Every listed file must exist with its recorded length.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let p = dir.join(&f.path);
            let len = std::fs::metadata(&p)
                .map_err(|_| CliError::Runtime(format!("manifest lists missing file {}", f.path.display())))?
                .len();
            if len != f.bytes {
                return Err(CliError::Runtime(format!(
                    "{} is {len} bytes, manifest records {}",
                    f.path.display(),
                    f.bytes
                )));
            }
        }
        Ok(())
    }
}

/// Loads, applies `f`, saves.
pub fn update(dir: &Path, f: impl FnOnce(&mut RunManifest) -> Result<()>) -> Result<()> {
    let mut m = RunManifest::load_or_new(dir)?;
    f(&mut m)?;
    m.save(dir)
}
