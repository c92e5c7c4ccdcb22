//! Set-prediction training: per-layer matching, the composite loss, AdamW
//! with clipping and the epoch-halving schedule.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod matching;
pub mod optim;

pub use checkpoint::{load_optimizer, load_params, read_meta, save_checkpoint, CheckpointMeta};
pub use data::{build_samples, targets_from_instances, TrainSample};
pub use loss::{compute_loss, match_layers, validate_targets, LossBreakdown};
pub use matching::{cost_matrix, hungarian_match, pair_cost, span_iou, MatchCostWeights, MatchResult, Target};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, TrainSchedule, GRAD_CLIP};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::decoder::{Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{grad_check, init, GradCheckConfig, GradCheckReport, ParamStore, Tape};
use crate::rng::{stream, streams};

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub decoder: Decoder,
    pub store: ParamStore,
    pub opt: AdamW,
    pub schedule: TrainSchedule,
    pub weights: MatchCostWeights,
}

impl Trainer {
    /// Fresh model with weights drawn from the seed's weight stream.
    pub fn new(cfg: &DecoderConfig, schedule: TrainSchedule, weights: MatchCostWeights, seed: u64) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        weights.validate()?;
        let mut store = ParamStore::new();
        let decoder = Decoder::new(&mut store, cfg, &mut stream(seed, streams::WEIGHTS))?;
        let opt = AdamW::new(&store, AdamWConfig::default());
        Ok(Self { decoder, store, opt, schedule, weights })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Forward, match, loss and backward for one window; gradients are left
    /// in the store. A non-finite loss is reported by component before any
    /// gradient is computed.
    pub fn loss_and_grad(&mut self, sample: &TrainSample) -> Result<LossBreakdown> {
        validate_targets(&sample.targets, self.decoder.cfg.num_classes)?;
        let t_len = sample.features.rows();
        self.store.zero_grad();
        let mut tape = Tape::new();
        let f = tape.constant(sample.features.clone());
        let outputs = self.decoder.forward(&mut tape, &self.store, f)?;
        let matches = match_layers(&tape, &outputs, &sample.targets, t_len, &self.weights)?;
        let (total, parts) = compute_loss(&mut tape, &outputs, &sample.targets, &matches, t_len, &self.weights)?;
        parts.check_finite()?;
        tape.backward(total, &mut self.store)?;
        Ok(parts)
    }

    /// One optimizer step at the learning rate of `epoch`.
    pub fn train_step(&mut self, sample: &TrainSample, epoch: usize) -> Result<StepLog> {
        let loss = self.loss_and_grad(sample)?;
        let grad_norm = clip_grad_norm(&mut self.store, GRAD_CLIP);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let lr = self.schedule.lr(epoch);
        self.opt.update(&mut self.store, lr);
        Ok(StepLog { step: self.opt.step, epoch, lr, grad_norm, loss })
    }

    /// Trains until `max_steps` optimizer steps have been taken in total,
    /// one window per step. An epoch is one pass over `samples` in an order
    /// fixed by `(seed, epoch)`, so a resumed run continues the same sequence.
    pub fn fit(
        &mut self,
        samples: &[TrainSample],
        max_steps: u64,
        seed: u64,
        mut on_step: impl FnMut(&StepLog, &Trainer) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::config("train", "no training windows"));
        }
        let n = samples.len() as u64;
        let mut order = Vec::new();
        let mut order_epoch = usize::MAX;
        while self.opt.step < max_steps {
            let epoch = (self.opt.step / n) as usize;
            if epoch != order_epoch {
                order = epoch_order(samples.len(), seed, epoch);
                order_epoch = epoch;
            }
            let log = self.train_step(&samples[order[(self.opt.step % n) as usize]], epoch)?;
            on_step(&log, self)?;
        }
        Ok(())
    }
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = stream(seed, streams::SHUFFLE);
    rng.set_word_pos((epoch as u128) << 40);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Synthetic window and targets for the gradient suite.
fn probe_sample<R: Rng>(rng: &mut R, cfg: &DecoderConfig, t_len: usize, num_targets: usize) -> TrainSample {
    let features = init::uniform(rng, &[t_len, cfg.d_in], 1.0);
    let targets = (0..num_targets)
        .map(|_| {
            let start = rng.random_range(0.0..t_len as f64 * 0.6);
            let len = rng.random_range(1.5..t_len as f64 * 0.4);
            Target { start, end: start + len, class_id: rng.random_range(0..cfg.num_classes) }
        })
        .collect();
    let window = crate::pipeline::WindowSpec {
        video_id: "probe".into(),
        start_frame: 0,
        length: t_len,
        valid_frames: t_len,
        feature_start: 0,
        feature_len: t_len,
    };
    TrainSample { window, features, targets }
}

/// Finite-difference check of the full training loss for a freshly
/// initialised model, with the per-layer matching computed once and held
/// fixed.
pub fn loss_grad_check(cfg: &DecoderConfig, seed: u64, gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut trainer = Trainer::new(cfg, TrainSchedule::default(), MatchCostWeights::default(), seed)?;
    let sample = probe_sample(&mut stream(seed, streams::DATA), cfg, 16, 2);
    let t_len = sample.features.rows();
    let matches = {
        let mut tape = Tape::new();
        let f = tape.constant(sample.features.clone());
        let outputs = trainer.decoder.forward(&mut tape, &trainer.store, f)?;
        match_layers(&tape, &outputs, &sample.targets, t_len, &trainer.weights)?
    };
    let (decoder, weights) = (&trainer.decoder, trainer.weights);
    grad_check(
        |tape: &mut Tape, store: &ParamStore| {
            let f = tape.constant(sample.features.clone());
            let outputs = decoder.forward(tape, store, f)?;
            Ok(compute_loss(tape, &outputs, &sample.targets, &matches, t_len, &weights)?.0)
        },
        &mut trainer.store,
        &GradCheckConfig { seed, ..*gc },
    )
}

/// Settings the gradient suite runs with: Ridders-extrapolated central
/// differences from a step of `1e-1` on frozen pieces.
pub fn suite_grad_check_config() -> GradCheckConfig {
    GradCheckConfig { step: 1e-1, tolerance: 1e-4, max_coords: 32, seed: 0, freeze_pieces: true, extrapolate: true }
}
