//! Forward kernels shared by the pure API and the autodiff tape.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y = x·W + b`, with `x` folded to `rows × I`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if weight.shape().len() != 2 || x.cols() != weight.shape()[0] || bias.len() != weight.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let mut y = x.matmul(weight)?;
    add_row_bias_in_place(&mut y, bias.data());
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = weight.shape()[1];
    Ok(Tensor::from_parts(shape, y.into_data()))
}

pub(crate) fn add_row_bias_in_place(y: &mut Tensor, bias: &[f64]) {
    let c = y.cols();
    for row in y.data_mut().chunks_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Row statistics kept for the backward pass.
pub(crate) struct NormStats {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_stats(x: &Tensor, eps: f64) -> NormStats {
    let d = x.cols();
    let mut normalized = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        normalized.extend(row.iter().map(|v| (v - mean) * is));
    }
    NormStats { normalized, inv_std }
}

/// Normalizes each row over the last extent, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, eps: f64, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let stats = layer_norm_stats(x, eps);
    let mut out = stats.normalized;
    for row in out.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Row-wise softmax over the last extent, max-subtracted.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}

/// Position of a continuous time `t` on a grid of `len` rows: the lower row,
/// the upper row, the weight of the upper row, and whether `t` was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct InterpSite {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
    pub clamped: bool,
}

pub(crate) fn interp_site(len: usize, t: f64) -> InterpSite {
    let last = (len - 1) as f64;
    if !(t > 0.0) {
        // also catches NaN
        return InterpSite { lo: 0, hi: 0, frac: 0.0, clamped: true };
    }
    if t >= last {
        let i = len - 1;
        return InterpSite { lo: i, hi: i, frac: 0.0, clamped: t > last };
    }
    let lo = t.floor() as usize;
    InterpSite {
        lo,
        hi: lo + 1,
        frac: t - lo as f64,
        clamped: false,
    }
}

/// Linear interpolation of `seq` (`T'×D`) at continuous time `t`, clamped to
/// the boundary rows outside `[0, T'-1]`.
pub fn interp_sample(seq: &Tensor, t: f64) -> Result<Vec<f64>> {
    if seq.is_empty() || seq.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let site = interp_site(seq.rows(), t);
    let (a, b) = (seq.row(site.lo), seq.row(site.hi));
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (1.0 - site.frac) * x + site.frac * y)
        .collect())
}
