//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::autodiff::{Tape, Var};
use super::branch;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference half step `h`.
    pub step: f64,
    pub tolerance: f64,
    /// Upper bound on checked coordinates per parameter; larger tensors are
    /// sub-sampled without replacement.
    pub max_coords: usize,
    pub seed: u64,
    /// Evaluate perturbed points on the pieces (ReLU masks, clamp sides,
    /// arg-max rows, interpolation cells) selected at the unperturbed point.
    pub freeze_pieces: bool,
    /// Refine each central difference by Ridders' polynomial extrapolation
    /// over the steps `step, step/1.4, step/1.4², …`, keeping the estimate
    /// with the smallest internal error.
    pub extrapolate: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-6, tolerance: 1e-4, max_coords: 64, seed: 0, freeze_pieces: true, extrapolate: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(fragment: &mut F, store: &ParamStore, pieces: Option<&[u32]>) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut run = || {
        let mut tape = Tape::new();
        let out = fragment(&mut tape, store)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarOutput(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    match pieces {
        None => run(),
        Some(log) => {
            let (v, in_sync) = branch::replay(log, run);
            if !in_sync {
                return Err(Error::GradCheck("fragment took a different op sequence under perturbation".into()));
            }
            v
        }
    }
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_TABLE: usize = 16;

/// Ridders' extrapolation of `central(h)` towards `h = 0`, returning the
/// tableau entry whose neighbours disagree least.
fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, step: f64) -> Result<f64> {
    let shrink2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut h = step;
    let mut prev = vec![central(h)?];
    let mut best = prev[0];
    let mut best_err = f64::INFINITY;
    for i in 1..RIDDERS_TABLE {
        h /= RIDDERS_SHRINK;
        let mut row = Vec::with_capacity(i + 1);
        row.push(central(h)?);
        let mut fac = shrink2;
        for j in 1..=i {
            let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= shrink2;
            let err = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = v;
            }
            row.push(v);
        }
        prev = row;
    }
    Ok(best)
}

/// Compares the tape gradient of a scalar-valued `fragment` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every parameter in `store`.
///
/// With `freeze_pieces`, the perturbed evaluations reuse the piece selections
/// of the unperturbed one, so the difference quotient measures the same
/// smooth piece the analytic gradient was taken on.
///
/// Parameter values are restored before returning; gradients in `store` are
/// left holding the analytic gradient.
pub fn grad_check<F>(mut fragment: F, store: &mut ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let (out, log) = branch::record(|| fragment(&mut tape, store));
    let out = out?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarOutput(tape.value(out).shape().to_vec()));
    }
    tape.backward(out, store)?;
    drop(tape);
    let pieces = cfg.freeze_pieces.then_some(log.as_slice());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &k in &coords {
            let original = store.get(id).value.data()[k];
            let mut central = |h: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[k] = original + h;
                let plus = eval(&mut fragment, store, pieces);
                store.value_mut(id).data_mut()[k] = original - h;
                let minus = eval(&mut fragment, store, pieces);
                store.value_mut(id).data_mut()[k] = original;
                Ok((plus? - minus?) / (2.0 * h))
            };
            let numeric = if cfg.extrapolate { ridders(&mut central, cfg.step)? } else { central(cfg.step)? };
            let analytic = store.get(id).grad.data()[k];
            let err = relative_error(analytic, numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_index = k;
                check.analytic = analytic;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { tolerance: cfg.tolerance, params })
}
