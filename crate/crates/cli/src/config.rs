//! Run configuration: every module's settings in one JSON document, plus the
//! command-line overrides for the ablation axes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use qptad_core::decoder::DecoderConfig;
use qptad_core::evaluator::EvalConfig;
use qptad_core::pipeline::windows::{validate_beta, validate_overlap};
use qptad_core::pipeline::SynthConfig;
use qptad_core::trainer::{MatchCostWeights, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    /// Window length in frames.
    #[serde(default = "WindowConfig::beta")]
    pub beta: usize,
    #[serde(default = "WindowConfig::train_overlap")]
    pub train_overlap: f64,
}

impl WindowConfig {
    fn beta() -> usize {
        128
    }
    fn train_overlap() -> f64 {
        0.75
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { beta: Self::beta(), train_overlap: Self::train_overlap() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Total optimizer steps; `schedule.epochs` passes over the windows when
    /// absent.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default = "TrainRunConfig::checkpoint_every")]
    pub checkpoint_every: u64,
}

impl TrainRunConfig {
    fn checkpoint_every() -> u64 {
        500
    }
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self { max_steps: None, checkpoint_every: Self::checkpoint_every() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory written by `gen-synth`.
    #[serde(default = "PathsConfig::data")]
    pub data: PathBuf,
    /// Training output: checkpoint, loss log, config echo.
    #[serde(default = "PathsConfig::run")]
    pub run: PathBuf,
}

impl PathsConfig {
    fn data() -> PathBuf {
        "data".into()
    }
    fn run() -> PathBuf {
        "run".into()
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data: Self::data(), run: Self::run() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "RunConfig::decoder")]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(rename = "match", default)]
    pub matching: MatchCostWeights,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub train: TrainRunConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Decoder defaults with the input width of the default synthetic data.
    fn decoder() -> DecoderConfig {
        DecoderConfig { d_in: SynthConfig::default().d_in, ..DecoderConfig::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.schedule.validate()?;
        self.matching.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        validate_beta(self.window.beta, qptad_core::pipeline::features::DEFAULT_STRIDE as usize)
            .context("window.beta")?;
        validate_overlap(self.window.train_overlap).context("window.train_overlap")?;
        if self.train.checkpoint_every == 0 {
            bail!("invalid configuration: train.checkpoint_every: must be positive");
        }
        if self.train.max_steps == Some(0) {
            bail!("invalid configuration: train.max_steps: must be positive");
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            decoder: Self::decoder(),
            schedule: TrainSchedule::default(),
            matching: MatchCostWeights::default(),
            eval: EvalConfig::default(),
            window: WindowConfig::default(),
            synth: SynthConfig::default(),
            train: TrainRunConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Flags shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Window length in frames.
    #[arg(long, global = true)]
    pub beta: Option<usize>,
    /// Number of queries.
    #[arg(long, global = true)]
    pub nq: Option<usize>,
    /// Points per query.
    #[arg(long, global = true)]
    pub ns: Option<usize>,
    /// Decoder layers.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Mamba blocks per layer.
    #[arg(long = "mamba-blocks", global = true)]
    pub mamba_blocks: Option<usize>,
}

impl CommonArgs {
    /// Loads the config file (or defaults), applies overrides and validates.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.beta {
            cfg.window.beta = v;
        }
        if let Some(v) = self.nq {
            cfg.decoder.num_queries = v;
        }
        if let Some(v) = self.ns {
            cfg.decoder.num_points = v;
        }
        if let Some(v) = self.layers {
            cfg.decoder.layers = v;
        }
        if let Some(v) = self.mamba_blocks {
            cfg.decoder.mamba.blocks = v;
        }
    }
}
