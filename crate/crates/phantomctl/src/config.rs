use std::path::{Path, PathBuf};

use phantom_core::dynamics::{PhaseThresholds, TrainConfig};
use phantom_core::nanoformer::ModelConfig;
use phantom_core::probes::HIGH_ATTENTION;
use phantom_core::recovery::RecoveryConfig;
use phantom_core::shadowgen::DatasetSpec;
use phantom_core::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Overrides the output directory of every command.
pub const OUT_ENV: &str = "PHANTOM_OUT";
pub const DEFAULT_OUT: &str = "phantom-out";

/// Model-size presets standing in for the model-scale axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Preset {
    #[value(name = "S", alias = "s")]
    S,
    #[value(name = "M", alias = "m")]
    M,
    #[value(name = "L", alias = "l")]
    L,
}

impl Preset {
    /// (layers, heads, d_model)
    pub fn shape(self) -> (usize, usize, usize) {
        match self {
            Preset::S => (2, 4, 64),
            Preset::M => (4, 4, 128),
            Preset::L => (6, 8, 256),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::S => "S",
            Preset::M => "M",
            Preset::L => "L",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub popularity: usize,
    pub target_tokens: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Grow the vocabulary when the entity pool does not fit.
    pub fit_vocab: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            popularity: 100,
            target_tokens: 20_000,
            vocab_size: 512,
            seed: 0,
            fit_vocab: true,
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        let s = DatasetSpec::new(self.popularity, self.target_tokens, self.vocab_size, self.seed);
        if self.fit_vocab {
            s.fit_vocab()
        } else {
            s
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// When set, wins over the explicit shape below.
    pub preset: Option<Preset>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            preset: Some(Preset::S),
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.preset
            .map(Preset::shape)
            .unwrap_or((self.n_layers, self.n_heads, self.d_model))
    }

    pub fn config(&self, vocab: usize) -> ModelConfig {
        let (l, h, d) = self.shape();
        ModelConfig {
            precision: self.precision,
            ..ModelConfig::new(l, h, d, vocab).with_seed(self.seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    /// Save a checkpoint every k epochs (the last epoch is always saved).
    pub checkpoint_every: usize,
    /// Stop once RO has stayed at or below the low threshold this many
    /// consecutive epochs.
    pub settle_patience: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            checkpoint_every: 1,
            settle_patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub high: f64,
    pub low: f64,
    pub attention_threshold: f64,
    pub probe_set: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let th = PhaseThresholds::default();
        ProbeConfig {
            high: th.high,
            low: th.low,
            attention_threshold: HIGH_ATTENTION,
            probe_set: 32,
        }
    }
}

impl ProbeConfig {
    pub fn thresholds(&self) -> PhaseThresholds {
        PhaseThresholds {
            high: self.high,
            low: self.low,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub schedule: Schedule,
    pub probe: ProbeConfig,
    pub recovery: RecoveryConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            schedule: Schedule::default(),
            probe: ProbeConfig::default(),
            recovery: RecoveryConfig::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hash of everything that determines the trained weights. Epoch count,
    /// schedule, probes and output location are excluded so a run can be
    /// extended or re-probed.
    pub fn identity_hash(&self) -> String {
        let mut train = self.train.clone();
        train.epochs = 0;
        let key = serde_json::json!({
            "dataset": self.dataset,
            "model": self.model,
            "train": train,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hex::encode(Sha256::digest(c.to_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.spec().validate()?;
        let (l, h, d) = self.model.shape();
        if l == 0 || h == 0 || d == 0 || d % h != 0 {
            return Err(CliError::Usage(format!("invalid model shape {l}×{h}×{d}")));
        }
        if self.schedule.checkpoint_every == 0 {
            return Err(CliError::Usage("checkpoint_every must be ≥ 1".into()));
        }
        if !(self.probe.low < self.probe.high) {
            return Err(CliError::Usage("probe thresholds need low < high".into()));
        }
        Ok(())
    }
}

/// Flag, then environment, then config, then the default.
pub fn resolve_out(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}
