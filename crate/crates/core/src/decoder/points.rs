//! Query-point initialization, refinement and the point FFN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::seqblocks::Dense;

/// Span floor (feature steps) used by the refinement step.
pub const MIN_SPAN: f64 = 1.0;

/// `N_q × N_s` points at `T'/2` spread symmetrically over `±spread·T'`.
pub fn init_points(num_queries: usize, num_points: usize, t_len: usize, spread: f64) -> Result<Tensor> {
    if t_len < 2 {
        return Err(Error::config("T'", format!("need at least 2 feature steps, got {t_len}")));
    }
    let t = t_len as f64;
    let row: Vec<f64> = (0..num_points)
        .map(|j| {
            let u = if num_points > 1 { 2.0 * j as f64 / (num_points - 1) as f64 - 1.0 } else { 0.0 };
            t / 2.0 + spread * t * u
        })
        .collect();
    let data = (0..num_queries).flat_map(|_| row.iter().copied()).collect();
    Ok(Tensor::from_parts(vec![num_queries, num_points], data))
}

/// Range every point is held to after an update.
pub fn point_bounds(t_len: usize) -> (f64, f64) {
    (-(t_len as f64), 2.0 * t_len as f64)
}

/// `t + 0.5·Δt·max(max(P_i) − min(P_i), 1)` per query row.
pub fn refine_points(points: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if points.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            op: "refine_points",
            left: points.shape().to_vec(),
            right: delta.shape().to_vec(),
        });
    }
    let mut out = points.clone();
    for i in 0..points.rows() {
        let row = points.row(i);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let s = (hi - lo).max(MIN_SPAN);
        for (p, d) in out.row_mut(i).iter_mut().zip(delta.row(i)) {
            *p += 0.5 * d * s;
        }
    }
    Ok(out)
}

/// Tape version of [`refine_points`].
pub fn refine_points_tape(tape: &mut Tape, points: Var, delta: Var) -> Result<Var> {
    let hi = tape.row_max(points);
    let lo = tape.row_min(points);
    let span = tape.sub(hi, lo)?;
    let span = tape.clamp_min(span, MIN_SPAN);
    let step = tape.mul_col(delta, span)?;
    let step = tape.scale(step, 0.5);
    tape.add(points, step)
}

/// Two-layer residual FFN over each query's `N_s` coordinates, applied in
/// units of the window length: `P + T'·W2(relu(W1(P/T')))`. The second
/// layer starts at zero so the update starts as the identity.
#[derive(Debug, Clone, Copy)]
pub struct PointFfn {
    pub hidden: Dense,
    pub out: Dense,
}

impl PointFfn {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, num_points: usize, rng: &mut R) -> Result<Self> {
        let hidden = Dense::new(store, &format!("{prefix}.fc1"), num_points, num_points, rng)?;
        let out = Dense::with_values(
            store,
            &format!("{prefix}.fc2"),
            Tensor::zeros(&[num_points, num_points]),
            Tensor::zeros(&[num_points]),
        )?;
        Ok(Self { hidden, out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, points: Var, t_len: usize) -> Result<Var> {
        let t = t_len as f64;
        let x = tape.scale(points, 1.0 / t);
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        let d = self.out.forward(tape, store, h)?;
        let d = tape.scale(d, t);
        tape.add(points, d)
    }
}
