use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{init, ParamId, ParamStore, Tape, Tensor, Var};

/// Dense layer weights: `W` (`in × out`) and `b` (`out`).
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init::fan_in_uniform(rng, fan_in, fan_out))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    /// Explicit initial values.
    pub fn with_values(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), weight)?;
        let bias = store.add(format!("{name}.bias"), bias)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product self-attention over the rows of its input,
/// followed by a residual connection and layer norm. No positional encoding,
/// so the map is permutation-equivariant in the rows.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub heads: usize,
    pub d_model: usize,
    pub query: Dense,
    /// Key projection without bias: a key bias only shifts each query's
    /// scores by a constant, which softmax ignores.
    pub key: ParamId,
    pub value: Dense,
    pub output: Dense,
    pub norm: Norm,
}

impl Mhsa {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(d_model, heads)?;
        Ok(Self {
            heads,
            d_model,
            query: Dense::new(store, &format!("{prefix}.query"), d_model, d_model, rng)?,
            key: store.add(format!("{prefix}.key.weight"), init::fan_in_uniform(rng, d_model, d_model))?,
            value: Dense::new(store, &format!("{prefix}.value"), d_model, d_model, rng)?,
            output: Dense::new(store, &format!("{prefix}.output"), d_model, d_model, rng)?,
            norm: Norm::new(store, &format!("{prefix}.norm"), d_model)?,
        })
    }

    /// Concatenated head outputs projected by `W_O`, before residual and norm.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let q = self.query.forward(tape, store, x)?;
        let wk = tape.param(store, self.key);
        let k = tape.matmul(x, wk)?;
        let v = self.value.forward(tape, store, x)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores);
            outs.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        self.output.forward(tape, store, cat)
    }

    /// `LN(X + attend(X))`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attend(tape, store, x)?;
        let r = tape.add(x, a)?;
        self.norm.forward(tape, store, r)
    }
}

pub(crate) fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::config("heads", format!("D = {d_model} is not divisible by heads = {heads}")));
    }
    Ok(())
}
