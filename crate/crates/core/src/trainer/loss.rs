//! Set-prediction loss: per-layer matching, background-aware BCE and span
//! regression over matched pairs.

use serde::Serialize;

use super::matching::{cost_matrix, hungarian_match, MatchCostWeights, MatchResult, Target};
use crate::decoder::LayerOutput;
use crate::error::{Error, Result};
use crate::numerics::branch::picks;
use crate::numerics::{sigmoid, softplus, CustomBackward, Tape, Tensor, Var};

/// Loss components summed over layers. `total = cls + λ_L1·l1 + λ_iou·iou`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub l1: f64,
    pub iou: f64,
}

impl LossBreakdown {
    /// First non-finite component, by name.
    pub fn check_finite(&self) -> Result<()> {
        for (component, value) in [("cls", self.cls), ("l1", self.l1), ("iou", self.iou), ("total", self.total)] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { component, value });
            }
        }
        Ok(())
    }
}

/// Validates targets against the window length and class count.
pub fn validate_targets(targets: &[Target], num_classes: usize) -> Result<()> {
    for (i, t) in targets.iter().enumerate() {
        if !(t.end > t.start) || !t.start.is_finite() || !t.end.is_finite() {
            return Err(Error::config(format!("target[{i}]"), format!("empty or non-finite span [{}, {}]", t.start, t.end)));
        }
        if t.class_id >= num_classes {
            return Err(Error::config(format!("target[{i}]"), format!("class {} out of range (K = {num_classes})", t.class_id)));
        }
    }
    Ok(())
}

fn spans_of(points: &Tensor) -> Vec<(f64, f64)> {
    (0..points.rows())
        .map(|i| {
            let row = points.row(i);
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect()
}

/// Matches every layer's detached predictions to `targets`.
pub fn match_layers(
    tape: &Tape,
    outputs: &[LayerOutput],
    targets: &[Target],
    t_len: usize,
    w: &MatchCostWeights,
) -> Result<Vec<MatchResult>> {
    outputs
        .iter()
        .map(|o| {
            let spans = spans_of(tape.value(o.points));
            let cost = cost_matrix(&spans, tape.value(o.logits), targets, t_len as f64, w);
            hungarian_match(&cost)
        })
        .collect()
}

/// `Σ softplus(x) − x·y` over all entries.
struct BceWithLogits {
    targets: Tensor,
}

impl CustomBackward for BceWithLogits {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let gx = inputs[0]
            .zip_map(&self.targets, "bce_with_logits", |x, y| g * (sigmoid(x) - y))
            .expect("shape checked in forward");
        vec![Some(gx)]
    }
}

pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: Tensor) -> Result<Var> {
    let x = tape.value(logits);
    let v = x.zip_map(&targets, "bce_with_logits", |x, y| softplus(x) - x * y)?.sum();
    Ok(tape.custom(&[logits], Tensor::scalar(v), Box::new(BceWithLogits { targets })))
}

/// Matched pair: query row, target span.
#[derive(Debug, Clone, Copy)]
struct Pair {
    query: usize,
    start: f64,
    end: f64,
}

fn pairs_of(m: &MatchResult, targets: &[Target]) -> Vec<Pair> {
    m.pairs
        .iter()
        .map(|&(q, g)| Pair { query: q, start: targets[g].start, end: targets[g].end })
        .collect()
}

/// `Σ |lo_q − start| + |hi_q − end|` over pairs, scaled by `1/T'`.
struct SpanL1 {
    pairs: Vec<Pair>,
    /// Bit 0: `lo ≥ start`; bit 1: `hi ≥ end`.
    signs: Vec<u32>,
    inv_t: f64,
}

fn sign(bit: bool) -> f64 {
    if bit {
        1.0
    } else {
        -1.0
    }
}

impl CustomBackward for SpanL1 {
    fn name(&self) -> &'static str {
        "span_l1"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item() * self.inv_t;
        let mut g_lo = Tensor::zeros(inputs[0].shape());
        let mut g_hi = Tensor::zeros(inputs[1].shape());
        for (p, &s) in self.pairs.iter().zip(&self.signs) {
            g_lo.data_mut()[p.query] += g * sign(s & 1 == 1);
            g_hi.data_mut()[p.query] += g * sign(s & 2 == 2);
        }
        vec![Some(g_lo), Some(g_hi)]
    }
}

fn span_l1(tape: &mut Tape, lo: Var, hi: Var, pairs: Vec<Pair>, t_len: f64) -> Var {
    let (lv, hv) = (tape.value(lo), tape.value(hi));
    let signs = picks(pairs.len(), |k| {
        let p = pairs[k];
        (lv.data()[p.query] >= p.start) as u32 | (((hv.data()[p.query] >= p.end) as u32) << 1)
    });
    let inv_t = 1.0 / t_len;
    let v: f64 = pairs
        .iter()
        .zip(&signs)
        .map(|(p, &s)| {
            sign(s & 1 == 1) * (lv.data()[p.query] - p.start) + sign(s & 2 == 2) * (hv.data()[p.query] - p.end)
        })
        .sum::<f64>()
        * inv_t;
    tape.custom(&[lo, hi], Tensor::scalar(v), Box::new(SpanL1 { pairs, signs, inv_t }))
}

/// `Σ (1 − tIoU)` over pairs.
struct SpanIou {
    pairs: Vec<Pair>,
    /// Bit 0: prediction end is the inner end; bit 1: prediction start is
    /// the inner start; bit 2: the spans overlap.
    pieces: Vec<u32>,
}

/// Intersection and union on the given piece.
fn iou_parts(lo: f64, hi: f64, p: &Pair, piece: u32) -> (f64, f64) {
    let inner_end = if piece & 1 == 1 { hi } else { p.end };
    let inner_start = if piece & 2 == 2 { lo } else { p.start };
    let inter = if piece & 4 == 4 { inner_end - inner_start } else { 0.0 };
    (inter, (hi - lo) + (p.end - p.start) - inter)
}

impl CustomBackward for SpanIou {
    fn name(&self) -> &'static str {
        "span_iou"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let (lv, hv) = (inputs[0].data(), inputs[1].data());
        let mut g_lo = Tensor::zeros(inputs[0].shape());
        let mut g_hi = Tensor::zeros(inputs[1].shape());
        for (p, &piece) in self.pairs.iter().zip(&self.pieces) {
            let (lo, hi) = (lv[p.query], hv[p.query]);
            let (inter, union) = iou_parts(lo, hi, p, piece);
            if union <= 0.0 {
                continue;
            }
            // d iou = dI·(U + I)/U² − (I/U²)·(d hi − d lo)
            let d_inter = (union + inter) / (union * union);
            let d_union = inter / (union * union);
            let overlap = piece & 4 == 4;
            let di_dhi = if overlap && piece & 1 == 1 { 1.0 } else { 0.0 };
            let di_dlo = if overlap && piece & 2 == 2 { -1.0 } else { 0.0 };
            g_hi.data_mut()[p.query] -= g * (d_inter * di_dhi - d_union);
            g_lo.data_mut()[p.query] -= g * (d_inter * di_dlo + d_union);
        }
        vec![Some(g_lo), Some(g_hi)]
    }
}

fn span_iou_loss(tape: &mut Tape, lo: Var, hi: Var, pairs: Vec<Pair>) -> Var {
    let (lv, hv) = (tape.value(lo), tape.value(hi));
    let pieces = picks(pairs.len(), |k| {
        let p = pairs[k];
        let (lo, hi) = (lv.data()[p.query], hv.data()[p.query]);
        let end_inner = hi <= p.end;
        let start_inner = lo >= p.start;
        let overlap = hi.min(p.end) > lo.max(p.start);
        end_inner as u32 | ((start_inner as u32) << 1) | ((overlap as u32) << 2)
    });
    let v: f64 = pairs
        .iter()
        .zip(&pieces)
        .map(|(p, &piece)| {
            let (inter, union) = iou_parts(lv.data()[p.query], hv.data()[p.query], p, piece);
            1.0 - if union > 0.0 { inter / union } else { 0.0 }
        })
        .sum();
    tape.custom(&[lo, hi], Tensor::scalar(v), Box::new(SpanIou { pairs, pieces }))
}

/// Sum over layers of `BCE + λ_L1·L1 + λ_iou·(1 − tIoU)`, each term summed
/// over its entries and divided by `max(N_g, 1)`. Unmatched queries and
/// windows without targets train every class toward zero.
pub fn compute_loss(
    tape: &mut Tape,
    outputs: &[LayerOutput],
    targets: &[Target],
    matches: &[MatchResult],
    t_len: usize,
    w: &MatchCostWeights,
) -> Result<(Var, LossBreakdown)> {
    if matches.len() != outputs.len() {
        return Err(Error::ShapeMismatch { op: "compute_loss", left: vec![outputs.len()], right: vec![matches.len()] });
    }
    let norm = 1.0 / targets.len().max(1) as f64;
    let mut parts = LossBreakdown::default();
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (o, m) in outputs.iter().zip(matches) {
        let logits = tape.value(o.logits);
        let mut y = Tensor::zeros(logits.shape());
        for &(q, g) in &m.pairs {
            let k = logits.cols();
            y.data_mut()[q * k + targets[g].class_id] = 1.0;
        }
        let cls = bce_with_logits(tape, o.logits, y)?;
        let lo = tape.row_min(o.points);
        let hi = tape.row_max(o.points);
        let l1 = span_l1(tape, lo, hi, pairs_of(m, targets), t_len as f64);
        let iou = span_iou_loss(tape, lo, hi, pairs_of(m, targets));
        parts.cls += tape.value(cls).item() * norm;
        parts.l1 += tape.value(l1).item() * norm;
        parts.iou += tape.value(iou).item() * norm;

        let l1 = tape.scale(l1, w.lambda_l1);
        let iou = tape.scale(iou, w.lambda_iou);
        let layer = tape.add(cls, l1)?;
        let layer = tape.add(layer, iou)?;
        let layer = tape.scale(layer, norm);
        total = tape.add(total, layer)?;
    }
    parts.total = tape.value(total).item();
    Ok((total, parts))
}
