//! Experiment driver: dataset generation, training sweeps, circuit analysis
//! and recovery, each writing into a run directory with a manifest.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use phantom_core::circuits::PruneCriterion;
use phantom_core::dynamics::{evaluate_overshadowing, EpochMetrics};
use phantom_core::nanoformer::{Checkpoint, Model};
use phantom_core::recovery::ContrastMode;
use phantom_core::shadowgen::{generate, sample_eval, DatasetSpec};
use phantom_core::{Precision, Scalar};

use commands::{circuit, report, sweep, train};
use config::{resolve_out, Preset, RunConfig};
use error::{CliError, Result};

/// Runs `$body` with `$T` bound to the scalar type for `$prec`.
#[macro_export]
macro_rules! dispatch {
    ($prec:expr, $T:ident => $body:expr) => {
        match $prec {
            phantom_core::Precision::F32 => {
                type $T = f32;
                $body
            }
            phantom_core::Precision::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}

#[derive(Debug, Parser)]
#[command(name = "phantomctl", version, about = "Knowledge-overshadowing lab on tiny transformers")]
pub struct Cli {
    /// Output directory (default: $PHANTOM_OUT, then the config, then ./phantom-out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic overshadowing dataset.
    Gen(GenArgs),
    /// Train one model and track overshadowing per epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train every cell of a P × D × model grid.
    Sweep(SweepArgs),
    /// Knowledge-circuit analysis of a checkpoint.
    #[command(subcommand)]
    Circuit(CircuitCommand),
    /// Summarize a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dominant prompts per knowledge group.
    #[arg(long = "p")]
    pub popularity: usize,
    /// Target dataset size in tokens.
    #[arg(long = "d")]
    pub tokens: usize,
    #[arg(long, default_value_t = 512)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fail instead of growing the vocabulary when entities do not fit.
    #[arg(long)]
    pub strict_vocab: bool,
    #[arg(long, default_value = train::DATASET_FILE)]
    pub name: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// JSON run config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "p")]
    pub popularity: Option<usize>,
    #[arg(long = "d")]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training seed (shuffling and evaluation sampling); also seeds the model.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Stop after RO stays recovered this many epochs.
    #[arg(long)]
    pub settle: Option<usize>,
}

impl Overrides {
    pub fn apply(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.popularity {
            c.dataset.popularity = v;
        }
        if let Some(v) = self.tokens {
            c.dataset.target_tokens = v;
        }
        if let Some(v) = self.vocab {
            c.dataset.vocab_size = v;
        }
        if let Some(v) = self.data_seed {
            c.dataset.seed = v;
        }
        if self.layers.is_some() || self.heads.is_some() || self.d_model.is_some() {
            let (l, h, d) = c.model.shape();
            c.model.preset = None;
            c.model.n_layers = self.layers.unwrap_or(l);
            c.model.n_heads = self.heads.unwrap_or(h);
            c.model.d_model = self.d_model.unwrap_or(d);
        }
        if let Some(p) = self.preset {
            c.model.preset = Some(p);
        }
        if let Some(p) = self.precision {
            c.model.precision = p.into();
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.lr {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.train.seed = v;
            c.model.seed = v;
        }
        if let Some(v) = self.checkpoint_every {
            c.schedule.checkpoint_every = v;
        }
        if let Some(v) = self.settle {
            c.schedule.settle_patience = Some(v);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Continue from the newest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n_dom: usize,
    #[arg(long, default_value_t = 500)]
    pub n_sub: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long = "grid-p", value_delimiter = ',', required = true)]
    pub grid_p: Vec<usize>,
    #[arg(long = "grid-d", value_delimiter = ',', required = true)]
    pub grid_d: Vec<usize>,
    #[arg(long = "grid-preset", value_delimiter = ',', value_enum, default_value = "S")]
    pub grid_preset: Vec<Preset>,
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct PairSource {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose subordinate prompts form the pair set.
    #[arg(long, conflicts_with = "pairs")]
    pub dataset: Option<PathBuf>,
    /// JSON list of prompt pairs.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub n_pairs: usize,
    /// Keep only pairs the model currently gets wrong (dominant answer).
    #[arg(long)]
    pub overshadowed: bool,
    #[arg(long, default_value_t = 5)]
    pub ig_steps: usize,
}

#[derive(Debug, Subcommand)]
pub enum CircuitCommand {
    /// Score edges with EAP-IG and optionally prune.
    Build {
        #[command(flatten)]
        src: PairSource,
        #[arg(long, conflicts_with = "top_n")]
        threshold: Option<f64>,
        #[arg(long)]
        top_n: Option<usize>,
    },
    /// Search the edge count that maximizes the metric.
    Optimize {
        #[command(flatten)]
        src: PairSource,
        /// Scored circuit to start from (default: build one).
        #[arg(long)]
        circuit: Option<PathBuf>,
    },
    /// Attention, logit-lens and structure report for a circuit.
    Probe {
        #[command(flatten)]
        src: PairSource,
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long, default_value_t = phantom_core::probes::HIGH_ATTENTION)]
        threshold: f64,
        #[arg(long, default_value_t = 4)]
        lens: usize,
    },
    /// Knock out the most attentive circuit heads.
    Ablate {
        #[command(flatten)]
        src: PairSource,
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1")]
        proportions: Vec<f64>,
    },
    /// Identify the overshadowed entity and recover with an optimized circuit.
    Recover {
        #[command(flatten)]
        src: PairSource,
        /// Comma-separated token ids (instead of dataset pairs).
        #[arg(long, value_delimiter = ',')]
        prompt: Option<Vec<usize>>,
        /// Use the dataset's entity position and answers.
        #[arg(long)]
        known_targets: bool,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_enum)]
        contrast: Option<ContrastArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ContrastArg {
    Delete,
    Mask,
    PadDelete,
}

impl From<ContrastArg> for ContrastMode {
    fn from(c: ContrastArg) -> Self {
        match c {
            ContrastArg::Delete => ContrastMode::Delete,
            ContrastArg::Mask => ContrastMode::Mask,
            ContrastArg::PadDelete => ContrastMode::PadDelete,
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory (default: the output directory).
    #[arg(long)]
    pub run: Option<PathBuf>,
}

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("phantomctl: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let flag_out = cli.out.as_deref();
    match cli.command {
        Command::Gen(a) => {
            let out = resolve_out(flag_out, None);
            fs::create_dir_all(&out)?;
            let mut spec = DatasetSpec::new(a.popularity, a.tokens, a.vocab, a.seed);
            if !a.strict_vocab {
                spec = spec.fit_vocab();
            }
            let ds = generate(&spec)?;
            checked_name(&a.name)?;
            train::save_dataset(&ds, &out.join(&a.name))?;
            manifest::update(&out, |m| m.track(&out, &a.name))?;
            println!(
                "{}: {} groups, {} records, {} tokens, vocab {}",
                out.join(&a.name).display(),
                ds.groups.len(),
                ds.records.len(),
                ds.token_count(),
                ds.spec.vocab_size
            );
        }
        Command::Train(a) => {
            let cfg = a.overrides.apply()?;
            let out = resolve_out(flag_out, cfg.output_dir.as_deref());
            let s = train::train(&cfg, &out, a.resume)?;
            println!(
                "{}: {} epochs{}, final RO {}",
                out.display(),
                s.epochs_run,
                if s.stopped_early { " (settled)" } else { "" },
                s.final_ro.map_or("NA".into(), |r| format!("{r:.3}"))
            );
        }
        Command::Eval(a) => {
            let out = resolve_out(flag_out, None);
            fs::create_dir_all(&out)?;
            let ck = Checkpoint::load(&a.checkpoint)?;
            let ds = train::load_dataset(&a.dataset)?;
            let split = sample_eval(&ds, a.n_dom, a.n_sub, a.seed)?;
            let epoch = ck.meta.get("epoch").and_then(|e| e.as_u64()).unwrap_or(0) as usize;
            let m: EpochMetrics = dispatch!(ck.dtype, T => {
                let model: Model<T> = ck.to_model()?;
                evaluate_overshadowing(&model, &ds, &split, epoch, None)?
            });
            circuit::write_json(&out, "eval.json", &m)?;
            manifest::update(&out, |mf| mf.track(&out, "eval.json"))?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Sweep(a) => {
            let base = a.overrides.apply()?;
            let out = resolve_out(flag_out, base.output_dir.as_deref());
            let cells = sweep::grid(&a.grid_preset, &a.grid_p, &a.grid_d);
            let results = sweep::sweep(&base, &cells, &out, a.resume)?;
            let failed = results.iter().filter(|r| r.outcome.is_err()).count();
            println!("{} cells, {failed} failed; see {}", results.len(), out.join(sweep::AGGREGATE_FILE).display());
            if failed > 0 {
                return Err(CliError::Runtime(format!("{failed} sweep cell(s) failed")));
            }
        }
        Command::Circuit(c) => run_circuit_command(c, flag_out)?,
        Command::Report(a) => {
            let dir = a.run.unwrap_or_else(|| resolve_out(flag_out, None));
            let r = report::report(&dir)?;
            circuit::write_json(&dir, report::REPORT_FILE, &r)?;
            print!("{}", r.text());
        }
    }
    Ok(())
}

fn checked_name(name: &str) -> Result<()> {
    let p = Path::new(name);
    if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Err(CliError::Usage(format!("output name `{name}` must stay inside the output directory")));
    }
    Ok(())
}

fn source_pairs<T: Scalar>(model: &Model<T>, src: &PairSource) -> Result<Vec<phantom_core::circuits::PromptPair>> {
    let pairs = match (&src.dataset, &src.pairs) {
        (Some(d), _) => {
            let ds = train::load_dataset(d)?;
            if src.overshadowed {
                circuit::overshadowed_pairs(model, &ds, src.n_pairs)?
            } else {
                circuit::pairs_from_dataset(&ds, src.n_pairs)?
            }
        }
        (None, Some(p)) => circuit::read_pairs(p)?.into_iter().take(src.n_pairs).collect(),
        (None, None) => return Err(CliError::Usage("give --dataset or --pairs".into())),
    };
    if pairs.is_empty() {
        return Err(CliError::Runtime("pair source yielded no prompt pairs".into()));
    }
    Ok(pairs)
}

fn run_circuit_command(cmd: CircuitCommand, flag_out: Option<&Path>) -> Result<()> {
    let out = resolve_out(flag_out, None);
    fs::create_dir_all(&out)?;
    let src = match &cmd {
        CircuitCommand::Build { src, .. }
        | CircuitCommand::Optimize { src, .. }
        | CircuitCommand::Probe { src, .. }
        | CircuitCommand::Ablate { src, .. }
        | CircuitCommand::Recover { src, .. } => src,
    };
    let ck = Checkpoint::load(&src.checkpoint)?;
    let written: Vec<&str> = dispatch!(ck.dtype, T => {
        let model: Model<T> = ck.to_model()?;
        circuit_typed(&model, &cmd, &out)?
    });
    manifest::update(&out, |m| {
        for f in &written {
            m.track(&out, f)?;
        }
        Ok(())
    })?;
    for f in written {
        println!("{}", out.join(f).display());
    }
    Ok(())
}

fn circuit_typed<T: Scalar>(model: &Model<T>, cmd: &CircuitCommand, out: &Path) -> Result<Vec<&'static str>> {
    use circuit::*;
    match cmd {
        CircuitCommand::Build { src, threshold, top_n } => {
            let pairs = source_pairs(model, src)?;
            let criterion = threshold
                .map(PruneCriterion::Threshold)
                .or(top_n.map(PruneCriterion::TopN));
            let g = build(model, &pairs, src.ig_steps, criterion)?;
            save_circuit(&g, out, CIRCUIT_FILE, CIRCUIT_DOT)?;
            Ok(vec![CIRCUIT_FILE, CIRCUIT_DOT])
        }
        CircuitCommand::Optimize { src, circuit } => {
            let pairs = source_pairs(model, src)?;
            let scored = match circuit {
                Some(p) => load_circuit(p)?,
                None => build(model, &pairs, src.ig_steps, None)?,
            };
            let (g, curve, rep) = optimize(model, &scored, &pairs)?;
            save_circuit(&g, out, OPT_FILE, OPT_DOT)?;
            curve.write_csv(fs::File::create(out.join(CURVE_FILE))?)?;
            write_json(out, OPTIMIZE_FILE, &rep)?;
            Ok(vec![OPT_FILE, OPT_DOT, CURVE_FILE, OPTIMIZE_FILE])
        }
        CircuitCommand::Probe {
            src,
            circuit,
            threshold,
            lens,
        } => {
            let pairs = source_pairs(model, src)?;
            let g = load_circuit(circuit)?;
            let rep = probe(model, &g, &pairs, *threshold, *lens)?;
            write_json(out, PROBE_FILE, &rep)?;
            Ok(vec![PROBE_FILE])
        }
        CircuitCommand::Ablate {
            src,
            circuit,
            proportions,
        } => {
            let pairs = source_pairs(model, src)?;
            let g = load_circuit(circuit)?;
            let rep = ablate(model, &g, &pairs, proportions)?;
            write_json(out, ABLATION_FILE, &rep)?;
            Ok(vec![ABLATION_FILE])
        }
        CircuitCommand::Recover {
            src,
            prompt,
            known_targets,
            top_k,
            contrast,
        } => {
            let mut cfg = phantom_core::recovery::RecoveryConfig {
                ig_steps: src.ig_steps,
                ..Default::default()
            };
            if let Some(k) = top_k {
                cfg.top_k = *k;
            }
            if let Some(c) = contrast {
                cfg.contrast = (*c).into();
            }
            let cases = match prompt {
                Some(p) => {
                    if *known_targets {
                        return Err(CliError::Usage("--known-targets needs dataset pairs".into()));
                    }
                    vec![recover_prompt(model, p, &cfg)?]
                }
                None => recover_pairs(model, &source_pairs(model, src)?, &cfg, *known_targets)?,
            };
            write_json(out, RECOVERY_FILE, &cases)?;
            Ok(vec![RECOVERY_FILE])
        }
    }
}
