//! Deformable point-level feature extraction.
//!
//! Each query predicts 4 temporal offsets and 4 softmax weights from its
//! vector. Every point `t` of the query reads the features at the sub-points
//! `t + Δp_j` by linear interpolation and combines them with the weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::branch::picks;
use crate::numerics::ops::interp_site;
use crate::numerics::{init, CustomBackward, ParamStore, Tape, Tensor, Var};
use crate::seqblocks::Dense;

pub const NUM_OFFSETS: usize = 4;

/// Initial sub-point offsets in feature steps, covering a small
/// neighbourhood around each point.
pub const INIT_OFFSETS: [f64; NUM_OFFSETS] = [-1.5, -0.5, 0.5, 1.5];

#[derive(Debug, Clone, Copy)]
struct Site {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Interpolation sites in `(query, point, offset)` order. The pick per site
/// is its lower row and whether it interpolates at all (`hi > lo`).
fn sites(t_len: usize, points: &Tensor, offsets: &Tensor) -> Vec<Site> {
    let (nq, ns) = (points.rows(), points.cols());
    let time = |k: usize| {
        let (i, p, j) = (k / (ns * NUM_OFFSETS), (k / NUM_OFFSETS) % ns, k % NUM_OFFSETS);
        points.at(i, p) + offsets.at(i, j)
    };
    let codes = picks(nq * ns * NUM_OFFSETS, |k| {
        let s = interp_site(t_len, time(k));
        ((s.lo as u32) << 1) | (s.hi > s.lo) as u32
    });
    codes
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let lo = (c >> 1) as usize;
            if c & 1 == 1 {
                Site { lo, hi: lo + 1, frac: time(k) - lo as f64 }
            } else {
                Site { lo, hi: lo, frac: 0.0 }
            }
        })
        .collect()
}

fn sample(features: &Tensor, sites: &[Site], weights: &Tensor, nq: usize, ns: usize) -> Tensor {
    let d = features.cols();
    let mut out = vec![0.0; nq * ns * d];
    for (k, s) in sites.iter().enumerate() {
        let (row, j) = (k / NUM_OFFSETS, k % NUM_OFFSETS);
        let w = weights.at(row / ns, j);
        let (a, b) = (features.row(s.lo), features.row(s.hi));
        for (c, dst) in out[row * d..(row + 1) * d].iter_mut().enumerate() {
            *dst += w * ((1.0 - s.frac) * a[c] + s.frac * b[c]);
        }
    }
    Tensor::from_parts(vec![nq * ns, d], out)
}

/// `(N_q·N_s) × D` samples; row `i·N_s + p` belongs to point `p` of query `i`.
pub fn deform_sample_values(features: &Tensor, points: &Tensor, offsets: &Tensor, weights: &Tensor) -> Tensor {
    let s = sites(features.rows(), points, offsets);
    sample(features, &s, weights, points.rows(), points.cols())
}

struct DeformSample {
    sites: Vec<Site>,
}

impl CustomBackward for DeformSample {
    fn name(&self) -> &'static str {
        "deform_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (features, points, offsets, weights) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let d = features.cols();
        let ns = points.cols();
        let mut g_feat = Tensor::zeros(features.shape());
        let mut g_points = Tensor::zeros(points.shape());
        let mut g_offsets = Tensor::zeros(offsets.shape());
        let mut g_weights = Tensor::zeros(weights.shape());
        for (k, s) in self.sites.iter().enumerate() {
            let (row, j) = (k / NUM_OFFSETS, k % NUM_OFFSETS);
            let (i, p) = (row / ns, row % ns);
            let g = grad.row(row);
            let w = weights.at(i, j);
            let (a, b) = (features.row(s.lo), features.row(s.hi));
            let mut sampled_dot = 0.0;
            let mut slope_dot = 0.0;
            for c in 0..d {
                sampled_dot += g[c] * ((1.0 - s.frac) * a[c] + s.frac * b[c]);
                slope_dot += g[c] * (b[c] - a[c]);
            }
            g_weights.row_mut(i)[j] += sampled_dot;
            if s.hi > s.lo {
                g_points.row_mut(i)[p] += w * slope_dot;
                g_offsets.row_mut(i)[j] += w * slope_dot;
            }
            let gf = g_feat.data_mut();
            for c in 0..d {
                gf[s.lo * d + c] += w * (1.0 - s.frac) * g[c];
                gf[s.hi * d + c] += w * s.frac * g[c];
            }
        }
        vec![Some(g_feat), Some(g_points), Some(g_offsets), Some(g_weights)]
    }
}

/// Records the fused sampling op on the tape.
pub fn deform_sample(tape: &mut Tape, features: Var, points: Var, offsets: Var, weights: Var) -> Result<Var> {
    let (f, p, o, w) = (tape.value(features), tape.value(points), tape.value(offsets), tape.value(weights));
    if f.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let expected = [p.rows(), NUM_OFFSETS];
    if o.shape() != expected || w.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "deform_sample",
            left: o.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let s = sites(f.rows(), p, o);
    let out = sample(f, &s, w, p.rows(), p.cols());
    Ok(tape.custom(&[features, points, offsets, weights], out, Box::new(DeformSample { sites: s })))
}

/// Offset and weight projections of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct PointExtractor {
    pub offsets: Dense,
    pub weights: Dense,
}

impl PointExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut R) -> Result<Self> {
        let w = init::fan_in_uniform(rng, d_model, NUM_OFFSETS).scale(0.1);
        let offsets = Dense::with_values(store, &format!("{prefix}.offsets"), w, Tensor::vector(INIT_OFFSETS.to_vec()))?;
        let weights = Dense::with_values(
            store,
            &format!("{prefix}.weights"),
            Tensor::zeros(&[d_model, NUM_OFFSETS]),
            Tensor::zeros(&[NUM_OFFSETS]),
        )?;
        Ok(Self { offsets, weights })
    }

    /// `X` with shape `(N_q·N_s) × D` from `features` (`T' × D`), the points
    /// (`N_q × N_s`) and query vectors (`N_q × D`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, points: Var, queries: Var) -> Result<Var> {
        let offsets = self.offsets.forward(tape, store, queries)?;
        let logits = self.weights.forward(tape, store, queries)?;
        let weights = tape.softmax(logits);
        deform_sample(tape, features, points, offsets, weights)
    }
}
