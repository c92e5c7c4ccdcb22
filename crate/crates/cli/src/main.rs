//! `qptad`: synthetic data, training, inference, evaluation, gradient
//! checking and the scan benchmark.

mod commands;
mod config;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::{TrainArgs, CHECKPOINT_DIR, PREDICTIONS_FILE};
use config::CommonArgs;

#[derive(Debug, Parser)]
#[command(name = "qptad", version, about = "Query-point temporal action detection")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved run configuration and the model's parameter count.
    Config,
    /// Write a synthetic dataset (features, ground truth, manifest) to --out.
    GenSynth,
    /// Train on a dataset; writes checkpoint, loss.csv and config.json to --out.
    Train {
        /// Dataset directory (default: paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Total optimizer steps (default: train.max_steps, else schedule.epochs passes).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Detect instances in every video of a dataset; writes a prediction file to --out.
    Infer {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory (default: paths.run/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a prediction file against ground truth; writes a JSON report to --out.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth file (default: paths.data/annotations.json).
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Finite-difference check of the tiny decoder's loss gradients.
    Gradcheck {
        /// Number of consecutive seeds, starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Test hook: corrupt the ReLU backward rule so the check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Time the recurrent scan against kernel plus convolution.
    BenchScan {
        /// Sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        n_state: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
}

/// Caps rayon's pool at `QPTAD_THREADS` when set.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QPTAD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("QPTAD_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    let cfg = cli.common.resolve()?;
    let out = cli.common.out.clone();
    match cli.command {
        Command::Config => commands::show_config(&cfg)?,
        Command::GenSynth => commands::gen_synth(&cfg, out.as_deref().unwrap_or(&cfg.paths.data))?,
        Command::Train { data, steps, resume } => {
            let args = TrainArgs {
                data: data.unwrap_or_else(|| cfg.paths.data.clone()),
                out: out.unwrap_or_else(|| cfg.paths.run.clone()),
                steps,
                resume,
            };
            commands::train(&cfg, &args)?;
        }
        Command::Infer { data, checkpoint } => {
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.run.join(CHECKPOINT_DIR));
            let out = out.unwrap_or_else(|| cfg.paths.run.join(PREDICTIONS_FILE));
            commands::infer(&data, &checkpoint, &out)?;
        }
        Command::Eval { pred, gt } => {
            let gt = gt.unwrap_or_else(|| commands::default_gt(&cfg.paths.data));
            let out = out.unwrap_or_else(|| cfg.paths.run.join("report.json"));
            commands::eval(&cfg, &pred, &gt, &out)?;
        }
        Command::Gradcheck { seeds, inject_fault } => {
            if !commands::gradcheck(cfg.seed, seeds, inject_fault, out.as_deref())? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::BenchScan { lengths, n_state, repeats } => {
            let rows = commands::bench_scan(cfg.seed, &lengths, n_state, repeats)?;
            commands::print_bench(&rows);
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
