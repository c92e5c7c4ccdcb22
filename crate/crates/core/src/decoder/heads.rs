use rand::Rng;

use crate::error::Result;
use crate::numerics::{sigmoid, ParamStore, Tape, Tensor, Var};
use crate::pipeline::{grid_to_frames, ActionInstance, WindowSpec};
use crate::seqblocks::Dense;

/// Prior foreground probability the class bias starts at.
pub const CLASS_PRIOR: f64 = 0.01;

/// Output of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    /// `N_q × N_s` timestamps in feature steps, window-local.
    pub points: Tensor,
    /// `N_q × K`.
    pub class_logits: Tensor,
    pub layer_index: usize,
}

/// Two-layer FFN from query vectors to per-class logits.
#[derive(Debug, Clone, Copy)]
pub struct ClassHead {
    pub hidden: Dense,
    pub out: Dense,
}

impl ClassHead {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, num_classes: usize, rng: &mut R) -> Result<Self> {
        let hidden = Dense::new(store, &format!("{prefix}.fc1"), d_model, d_model, rng)?;
        let w = crate::numerics::init::fan_in_uniform(rng, d_model, num_classes);
        let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
        let out = Dense::with_values(store, &format!("{prefix}.fc2"), w, Tensor::full(&[num_classes], prior))?;
        Ok(Self { hidden, out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, queries)?;
        let h = tape.relu(h);
        self.out.forward(tape, store, h)
    }
}

/// Per query: span `[min, max]` of its points mapped to frames (×`stride`),
/// clamped to the window's real frames and shifted to global frames; class
/// and score from the best sigmoid. Keeps only `score ≥ score_thresh` and
/// positive length.
pub fn decode_instances(pred: &RawPrediction, window: &WindowSpec, stride: usize, score_thresh: f64) -> Vec<ActionInstance> {
    let limit = window.valid_frames as f64;
    let mut out = Vec::new();
    for i in 0..pred.points.rows() {
        let row = pred.points.row(i);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = grid_to_frames(lo, stride).clamp(0.0, limit);
        let end = grid_to_frames(hi, stride).clamp(0.0, limit);
        let logits = pred.class_logits.row(i);
        let (class_id, logit) = logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best });
        let score = sigmoid(logit);
        if score >= score_thresh && end > start {
            out.push(ActionInstance::new(window.to_global(start), window.to_global(end), class_id, score));
        }
    }
    out
}
