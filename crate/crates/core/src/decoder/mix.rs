//! Instance-level mixing with per-query dynamic weights.
//!
//! From each query vector `q` three linear maps generate `θ_f` (`N_s×N_s`),
//! `θ_c1` (`D×D'`) and `θ_c2` (`D'×D`). With `X` the query's `N_s×D` samples:
//!
//! ```text
//! x_f = relu(LN(Xᵀ θ_f))                       D × N_s
//! x_c = relu(LN(relu(LN(X θ_c1)) θ_c2))        N_s × D
//! q'  = q + W · flatten([x_fᵀ | x_c]) + b
//! ```

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamStore, Tape, Var};
use crate::seqblocks::{Dense, Norm};

#[derive(Debug, Clone)]
pub struct InstanceMixer {
    pub num_points: usize,
    pub d_model: usize,
    pub d_mix: usize,
    pub theta_frame: Dense,
    pub theta_chan1: Dense,
    pub theta_chan2: Dense,
    pub norm_frame: Norm,
    pub norm_chan1: Norm,
    pub norm_chan2: Norm,
    pub out: Dense,
}

impl InstanceMixer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        num_points: usize,
        d_model: usize,
        d_mix: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (ns, d, dm) = (num_points, d_model, d_mix);
        Ok(Self {
            num_points,
            d_model,
            d_mix,
            theta_frame: Dense::new(store, &format!("{prefix}.theta_f"), d, ns * ns, rng)?,
            theta_chan1: Dense::new(store, &format!("{prefix}.theta_c1"), d, d * dm, rng)?,
            theta_chan2: Dense::new(store, &format!("{prefix}.theta_c2"), d, dm * d, rng)?,
            norm_frame: Norm::new(store, &format!("{prefix}.ln_f"), ns)?,
            norm_chan1: Norm::new(store, &format!("{prefix}.ln_c1"), dm)?,
            norm_chan2: Norm::new(store, &format!("{prefix}.ln_c2"), d)?,
            out: Dense::new(store, &format!("{prefix}.out"), 2 * ns * d, d, rng)?,
        })
    }

    /// `samples` is `(N_q·N_s) × D`, `queries` is `N_q × D`; returns the
    /// updated `N_q × D` queries.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, samples: Var, queries: Var) -> Result<Var> {
        let (ns, d, dm) = (self.num_points, self.d_model, self.d_mix);
        let nq = tape.value(queries).rows();
        let theta_f = self.theta_frame.forward(tape, store, queries)?;
        let theta_c1 = self.theta_chan1.forward(tape, store, queries)?;
        let theta_c2 = self.theta_chan2.forward(tape, store, queries)?;

        let mut flat = Vec::with_capacity(nq);
        for i in 0..nq {
            let x = tape.slice_rows(samples, i * ns, ns);
            let tf = tape.slice_rows(theta_f, i, 1);
            let tf = tape.reshape(tf, &[ns, ns])?;
            let xt = tape.transpose(x);
            let xf = tape.matmul(xt, tf)?;
            let xf = self.norm_frame.forward(tape, store, xf)?;
            let xf = tape.relu(xf);

            let t1 = tape.slice_rows(theta_c1, i, 1);
            let t1 = tape.reshape(t1, &[d, dm])?;
            let h = tape.matmul(x, t1)?;
            let h = self.norm_chan1.forward(tape, store, h)?;
            let h = tape.relu(h);
            let t2 = tape.slice_rows(theta_c2, i, 1);
            let t2 = tape.reshape(t2, &[dm, d])?;
            let xc = tape.matmul(h, t2)?;
            let xc = self.norm_chan2.forward(tape, store, xc)?;
            let xc = tape.relu(xc);

            let xft = tape.transpose(xf);
            let cat = tape.concat_cols(&[xft, xc])?;
            flat.push(tape.reshape(cat, &[1, 2 * ns * d])?);
        }
        let flat = tape.concat_rows(&flat)?;
        let update = self.out.forward(tape, store, flat)?;
        tape.add(queries, update)
    }
}
