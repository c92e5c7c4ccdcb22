//! Reverse-mode differentiation on a linear tape.
//!
//! Every op evaluates eagerly and records its inputs plus whatever it needs to
//! propagate cotangents. `Tape::backward` walks the tape once in reverse and
//! accumulates parameter gradients into the owning [`ParamStore`].

use std::cell::Cell;

use super::branch::picks;
use super::ops::{self, LAYER_NORM_EPS};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static BACKWARD_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: while enabled on the current thread, the ReLU backward rule
/// returns a scaled (wrong) gradient. Used to prove the gradient checker can fail.
#[doc(hidden)]
pub fn set_backward_fault(enabled: bool) {
    BACKWARD_FAULT.with(|f| f.set(enabled));
}

fn backward_fault() -> bool {
    BACKWARD_FAULT.with(Cell::get)
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Backward rule for ops implemented outside the tape (fused kernels, losses).
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    /// Returns one cotangent per input, in input order (`None` for inputs
    /// that receive no gradient).
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol(Var, Var),
    AddCol(Var, Var),
    Relu { x: Var, on: Vec<u32> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RowArg { x: Var, arg: Vec<usize> },
    Clamp { x: Var, side: Vec<u32> },
    Sum(Var),
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient flows out of it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).scale(s);
        self.push(y, Op::Scale(a, s))
    }

    fn check_col(&self, op: &'static str, x: Var, col: Var) -> Result<()> {
        if self.value(col).len() != self.value(x).rows() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.value(x).shape().to_vec(),
                right: self.value(col).shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `y[i, j] = x[i, j] * col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.check_col("mul_col", x, col)?;
        let (xv, cv) = (self.value(x), self.value(col));
        let c = xv.cols();
        let data = xv.data().iter().enumerate().map(|(k, v)| v * cv.data()[k / c]).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(y, Op::MulCol(x, col)))
    }

    /// `y[i, j] = x[i, j] + col[i]`.
    pub fn add_col(&mut self, x: Var, col: Var) -> Result<Var> {
        self.check_col("add_col", x, col)?;
        let (xv, cv) = (self.value(x), self.value(col));
        let c = xv.cols();
        let data = xv.data().iter().enumerate().map(|(k, v)| v + cv.data()[k / c]).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(y, Op::AddCol(x, col)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let on = picks(xv.len(), |k| (xv.data()[k] > 0.0) as u32);
        let data = xv.data().iter().zip(&on).map(|(&v, &m)| if m == 1 { v } else { 0.0 }).collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(y, Op::Relu { x, on })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax(self.value(x));
        self.push(y, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: self.value(gain).shape().to_vec(),
            });
        }
        let stats = ops::layer_norm_stats(xv, LAYER_NORM_EPS);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = stats.normalized.clone();
        for row in out.chunks_mut(d) {
            for k in 0..d {
                row[k] = row[k] * g[k] + b[k];
            }
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(
            y,
            Op::LayerNorm { x, gain, bias, normalized: stats.normalized, inv_std: stats.inv_std },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let y = self.value(x).transpose();
        self.push(y, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                if v.rows() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        left: self.value(parts[0]).shape().to_vec(),
                        right: v.shape().to_vec(),
                    });
                }
                data.extend_from_slice(v.row(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols;
        Ok(self.push(Tensor::from_parts(vec![rows, cols], data), Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).flat_map(|r| xv.row(r)[start..start + len].iter().copied()).collect();
        let y = Tensor::from_parts(vec![xv.rows(), len], data);
        self.push(y, Op::SliceCols { x, start })
    }

    fn row_arg(&mut self, x: Var, pick_max: bool) -> Var {
        let xv = self.value(x);
        let arg: Vec<usize> = picks(xv.rows(), |r| {
            let row = xv.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if (pick_max && v > row[best]) || (!pick_max && v < row[best]) {
                    best = k;
                }
            }
            best as u32
        })
        .into_iter()
        .map(|a| a as usize)
        .collect();
        let out: Vec<f64> = arg.iter().enumerate().map(|(r, &a)| xv.row(r)[a]).collect();
        let n = out.len();
        self.push(Tensor::from_parts(vec![n, 1], out), Op::RowArg { x, arg })
    }

    /// Per-row maximum as an `rows × 1` column.
    pub fn row_max(&mut self, x: Var) -> Var {
        self.row_arg(x, true)
    }

    /// Per-row minimum as an `rows × 1` column.
    pub fn row_min(&mut self, x: Var) -> Var {
        self.row_arg(x, false)
    }

    /// `max(x, floor)` elementwise.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.clamp(x, floor, f64::INFINITY)
    }

    /// `min(max(x, lo), hi)` elementwise; the gradient is zero where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let xv = self.value(x);
        let side = picks(xv.len(), |k| {
            let v = xv.data()[k];
            if v <= lo {
                1
            } else if v >= hi {
                2
            } else {
                0
            }
        });
        let data = xv
            .data()
            .iter()
            .zip(&side)
            .map(|(&v, &s)| match s {
                1 => lo,
                2 => hi,
                _ => v,
            })
            .collect();
        let y = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(y, Op::Clamp { x, side })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), rule })
    }

    /// Propagates from the scalar `loss` and adds parameter cotangents into
    /// `store`'s gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarOutput(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (r, i, o) = (xv.rows(), xv.cols(), wv.cols());
                    let gx = matmul_raw(g.data(), wv.transpose().data(), r, o, i);
                    let gw = matmul_raw(xv.transpose().data(), g.data(), i, r, o);
                    let mut gb = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                    accumulate(&mut grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
                    let bshape = self.value(*b).shape().to_vec();
                    accumulate(&mut grads, *b, Tensor::from_parts(bshape, gb));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let ga = matmul_raw(g.data(), bv.transpose().data(), m, n, k);
                    let gb = matmul_raw(av.transpose().data(), g.data(), k, m, n);
                    accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                    accumulate(&mut grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::MulCol(x, col) => {
                    let (xv, cv) = (self.value(*x), self.value(*col));
                    let c = xv.cols();
                    let gx = g.data().iter().enumerate().map(|(k, v)| v * cv.data()[k / c]).collect();
                    let mut gc = vec![0.0; cv.len()];
                    for (k, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                        gc[k / c] += gv * xv;
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                    accumulate(&mut grads, *col, Tensor::from_parts(cv.shape().to_vec(), gc));
                }
                Op::AddCol(x, col) => {
                    let cv = self.value(*col);
                    let c = g.cols();
                    let mut gc = vec![0.0; cv.len()];
                    for (k, gv) in g.data().iter().enumerate() {
                        gc[k / c] += gv;
                    }
                    accumulate(&mut grads, *col, Tensor::from_parts(cv.shape().to_vec(), gc));
                    accumulate(&mut grads, *x, g);
                }
                Op::Relu { x, on } => {
                    let slope = if backward_fault() { 1.5 } else { 1.0 };
                    let gx = g.data().iter().zip(on).map(|(&gv, &m)| if m == 1 { gv * slope } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            out[k] = yr[k] * (gr[k] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
                }
                Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                    let gainv = self.value(*gain).data();
                    let d = gainv.len();
                    let mut ggain = vec![0.0; d];
                    let mut gbias = vec![0.0; d];
                    let mut gx = vec![0.0; normalized.len()];
                    for (r, ((nr, gr), out)) in normalized
                        .chunks(d)
                        .zip(g.data().chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut sum_gn = 0.0;
                        let mut sum_gn_n = 0.0;
                        for k in 0..d {
                            ggain[k] += gr[k] * nr[k];
                            gbias[k] += gr[k];
                            let gn = gr[k] * gainv[k];
                            sum_gn += gn;
                            sum_gn_n += gn * nr[k];
                        }
                        let scale = inv_std[r] / d as f64;
                        for k in 0..d {
                            let gn = gr[k] * gainv[k];
                            out[k] = scale * (d as f64 * gn - sum_gn - nr[k] * sum_gn_n);
                        }
                    }
                    let xshape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(xshape, gx));
                    let gshape = self.value(*gain).shape().to_vec();
                    accumulate(&mut grads, *gain, Tensor::from_parts(gshape, ggain));
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *bias, Tensor::from_parts(bshape, gbias));
                }
                Op::Transpose(x) => {
                    let xshape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(xshape, g.transpose().into_data()));
                }
                Op::Reshape(x) => {
                    let xshape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::from_parts(xshape, g.into_data()));
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        let data = (0..rows).flat_map(|r| g.row(r)[offset..offset + c].iter().copied()).collect();
                        accumulate(&mut grads, p, Tensor::from_parts(pv.shape().to_vec(), data));
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let n = pv.len();
                        let data = g.data()[offset..offset + n].to_vec();
                        accumulate(&mut grads, p, Tensor::from_parts(pv.shape().to_vec(), data));
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    gx[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let (c, len) = (xv.cols(), g.cols());
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..xv.rows() {
                        gx[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                Op::RowArg { x, arg } => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for (r, &k) in arg.iter().enumerate() {
                        gx[r * c + k] += g.data()[r];
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
                }
                Op::Clamp { x, side } => {
                    let gx = g.data().iter().zip(side).map(|(&gv, &s)| if s == 0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), gx));
                }
                Op::Sum(x) => {
                    let xshape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, Tensor::full(&xshape, g.item()));
                }
                Op::Custom { inputs, rule } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = rule.backward(&ins, &node.value, &g);
                    for (&v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            accumulate(&mut grads, v, gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
