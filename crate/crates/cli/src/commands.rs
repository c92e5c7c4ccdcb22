//! Command implementations.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::Rng;
use serde::Serialize;

use qptad_core::decoder::{Decoder, DecoderConfig};
use qptad_core::evaluator::{evaluate_files, write_report};
use qptad_core::infer::infer_corpus;
use qptad_core::numerics::autodiff::set_backward_fault;
use qptad_core::numerics::{GradCheckReport, ParamStore};
use qptad_core::pipeline::{synth_generate, write_predictions};
use qptad_core::rng::{stream, streams};
use qptad_core::seqblocks::{conv_apply, discretize, kernel, scan, SsmParams};
use qptad_core::trainer::{
    build_samples, load_optimizer, load_params, loss_grad_check, read_meta, save_checkpoint, suite_grad_check_config,
    CheckpointMeta, StepLog, Trainer,
};

use crate::config::RunConfig;
use crate::dataset::{load_dataset, load_features_only, write_dataset, ANNOTATIONS_FILE};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_LOG: &str = "loss.csv";
pub const CONFIG_ECHO: &str = "config.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const LOSS_HEADER: &str = "step,epoch,lr,total,cls,l1,iou,grad_norm";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    config: &'a RunConfig,
    parameters: usize,
}

/// Builds the model the config describes and prints the resolved config with
/// its parameter count.
pub fn show_config(cfg: &RunConfig) -> Result<()> {
    let mut store = ParamStore::new();
    Decoder::new(&mut store, &cfg.decoder, &mut stream(cfg.seed, streams::WEIGHTS))?;
    println!("{}", serde_json::to_string_pretty(&ConfigEcho { config: cfg, parameters: store.num_scalars() })?);
    Ok(())
}

pub fn gen_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let videos = synth_generate(cfg.seed, &cfg.synth)?;
    let manifest = write_dataset(out, cfg.seed, &cfg.synth, &videos)?;
    let instances: usize = videos.iter().map(|(_, a)| a.instances.len()).sum();
    eprintln!("wrote {} videos, {instances} instances, {} files to {}", videos.len(), manifest.files().len(), out.display());
    Ok(())
}

fn log_row(log: &StepLog) -> String {
    let l = &log.loss;
    format!("{},{},{},{},{},{},{},{}", log.step, log.epoch, log.lr, l.total, l.cls, l.l1, l.iou, log.grad_norm)
}

/// Keeps the header and the rows up to `step`, so a resumed run continues the
/// log where the checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step);
        if keep {
            kept.push(line);
        }
    }
    fs::write(path, kept.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub steps: Option<u64>,
    pub resume: bool,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let videos = load_dataset(&args.data)?;
    if let Some((f, _)) = videos.iter().find(|(f, _)| f.width != cfg.decoder.d_in) {
        bail!("invalid configuration: decoder.D_in: is {} but {} has {} channels", cfg.decoder.d_in, f.video_id, f.width);
    }
    let samples = build_samples(&videos, cfg.window.beta, cfg.window.train_overlap)?;
    if samples.is_empty() {
        bail!("{}: dataset has no training windows", args.data.display());
    }
    let max_steps = args.steps.or(cfg.train.max_steps).unwrap_or(cfg.schedule.epochs as u64 * samples.len() as u64);

    let mut trainer = Trainer::new(&cfg.decoder, cfg.schedule, cfg.matching, cfg.seed)?;
    let ckpt = args.out.join(CHECKPOINT_DIR);
    let log_path = args.out.join(LOSS_LOG);
    if args.resume {
        let meta = read_meta(&ckpt)?;
        let saved: RunConfig = serde_json::from_value(meta.config).context("checkpoint config")?;
        if saved.decoder != cfg.decoder || saved.seed != cfg.seed {
            bail!("checkpoint {} was trained with a different decoder config or seed", ckpt.display());
        }
        load_params(&ckpt, &mut trainer.store)?;
        load_optimizer(&ckpt, &trainer.store, &mut trainer.opt)?;
        truncate_log(&log_path, trainer.step())?;
    } else {
        fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        fs::write(&log_path, format!("{LOSS_HEADER}\n")).with_context(|| format!("writing {}", log_path.display()))?;
    }
    write_json(&args.out.join(CONFIG_ECHO), cfg)?;

    let file = fs::OpenOptions::new().append(true).open(&log_path).with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let config = serde_json::to_value(cfg)?;
    let n = samples.len() as u64;
    let save = |t: &Trainer| {
        let meta = CheckpointMeta { step: t.step(), epoch: (t.step() / n) as usize, config: config.clone() };
        save_checkpoint(&ckpt, &t.store, Some(&t.opt), &meta)
    };
    let start = Instant::now();
    let every = cfg.train.checkpoint_every;
    let result = trainer.fit(&samples, max_steps, cfg.seed, |row, t| {
        writeln!(log, "{}", log_row(row)).map_err(|e| qptad_core::Error::io(&log_path, e))?;
        if row.step % every == 0 {
            log.flush().map_err(|e| qptad_core::Error::io(&log_path, e))?;
            save(t)?;
        }
        if row.step % 100 == 0 {
            eprintln!("step {} epoch {} lr {} loss {:.4} ({:.1?})", row.step, row.epoch, row.lr, row.loss.total, start.elapsed());
        }
        Ok(())
    });
    log.flush().with_context(|| format!("writing {}", log_path.display()))?;
    result.context("training aborted")?;
    save(&trainer)?;
    eprintln!("trained to step {} in {:.1?}; checkpoint at {}", trainer.step(), start.elapsed(), ckpt.display());
    Ok(())
}

pub fn infer(data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let meta = read_meta(checkpoint)?;
    let saved: RunConfig = serde_json::from_value(meta.config).context("checkpoint config")?;
    let mut store = ParamStore::new();
    let decoder = Decoder::new(&mut store, &saved.decoder, &mut stream(saved.seed, streams::WEIGHTS))?;
    load_params(checkpoint, &mut store)?;
    let features = load_features_only(data)?;
    let preds = infer_corpus(&decoder, &store, &features, saved.window.beta)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_predictions(out, &preds)?;
    let n: usize = preds.iter().map(|p| p.instances.len()).sum();
    eprintln!("wrote {n} detections for {} videos to {}", preds.len(), out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let report = evaluate_files(pred, gt, &cfg.eval)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_report(out, &report)?;
    println!(
        "tp {} fp {} fn {}  precision {:.2}  recall {:.2}  F1@{} {:.2}",
        report.tp, report.fp, report.fn_, report.precision, report.recall, report.tiou_threshold, report.f1
    );
    Ok(())
}

pub fn default_gt(data: &Path) -> PathBuf {
    data.join(ANNOTATIONS_FILE)
}

#[derive(Serialize)]
struct SeedResult {
    seed: u64,
    passed: bool,
    report: GradCheckReport,
}

/// Finite-difference check of the tiny decoder's training loss over
/// `seeds` consecutive seeds. Returns whether every seed passed.
pub fn gradcheck(first_seed: u64, seeds: u64, inject_fault: bool, out: Option<&Path>) -> Result<bool> {
    let cfg = DecoderConfig::tiny();
    let gc = suite_grad_check_config();
    set_backward_fault(inject_fault);
    let mut results = Vec::new();
    for seed in first_seed..first_seed + seeds {
        let report = loss_grad_check(&cfg, seed, &gc)?;
        let worst = report.worst().map_or("-".to_string(), |w| format!("{}[{}]", w.name, w.worst_index));
        let passed = report.passed();
        println!(
            "seed {seed}: max rel err {:.3e} (tolerance {:.0e}), worst {worst}: {}",
            report.max_rel_error(),
            gc.tolerance,
            if passed { "PASS" } else { "FAIL" }
        );
        results.push(SeedResult { seed, passed, report });
    }
    set_backward_fault(false);
    let all = results.iter().all(|r| r.passed);
    println!("gradcheck {}", if all { "PASS" } else { "FAIL" });
    if let Some(path) = out {
        write_json(path, &results)?;
    }
    Ok(all)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub t: usize,
    pub scan_us: f64,
    pub conv_us: f64,
    pub max_abs_diff: f64,
}

/// Largest scan/convolution disagreement tolerated before timing.
pub const BENCH_AGREEMENT: f64 = 1e-9;

fn time_us(repeats: usize, mut f: impl FnMut() -> Vec<f64>) -> (f64, Vec<f64>) {
    let start = Instant::now();
    let mut y = Vec::new();
    for _ in 0..repeats {
        y = std::hint::black_box(f());
    }
    (start.elapsed().as_secs_f64() * 1e6 / repeats as f64, y)
}

pub fn bench_scan(seed: u64, lengths: &[usize], n_state: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        bail!("invalid configuration: repeats: must be at least 1");
    }
    if n_state == 0 {
        bail!("invalid configuration: n_state: must be at least 1");
    }
    let mut rng = stream(seed, streams::BENCH);
    let mut rows = Vec::new();
    for &t in lengths {
        if t == 0 {
            bail!("invalid configuration: lengths: every T must be at least 1");
        }
        let b: Vec<f64> = (0..n_state).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n_state).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = discretize(&SsmParams::stable_diagonal(b, c.clone(), 0.1))?;
        let (scan_us, ys) = time_us(repeats, || scan(&d, &c, &u));
        let (conv_us, yc) = time_us(repeats, || conv_apply(&u, &kernel(&d, &c, t)).expect("equal lengths"));
        let max_abs_diff = ys.iter().zip(&yc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if max_abs_diff > BENCH_AGREEMENT {
            bail!("T = {t}: scan and convolution disagree by {max_abs_diff:e}");
        }
        rows.push(BenchRow { t, scan_us, conv_us, max_abs_diff });
    }
    Ok(rows)
}

pub fn print_bench(rows: &[BenchRow]) {
    println!("{:>8} {:>14} {:>14} {:>14}", "T", "scan_us", "conv_us", "max_abs_diff");
    for r in rows {
        println!("{:>8} {:>14.2} {:>14.2} {:>14.3e}", r.t, r.scan_us, r.conv_us, r.max_abs_diff);
    }
}
