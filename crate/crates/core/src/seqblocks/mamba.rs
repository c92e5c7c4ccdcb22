//! Per-channel diagonal SSM block over the query axis.
//!
//! Every channel `d` of the `N_q × D` query matrix is an independent SISO
//! sequence running through its own diagonal SSM with `A = -exp(a_log)`.
//! The scan and its backward pass are one fused tape op.

use rand::Rng;

use super::ssm::{DiscreteSsm, SsmParams};
use crate::error::Result;
use crate::numerics::ops::{sigmoid, softplus};
use crate::numerics::{init, CustomBackward, ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_DELTA: f64 = 0.1;

/// `(e^z - 1) / z` and its derivative, with series near zero.
fn phi(z: f64) -> (f64, f64) {
    if z.abs() < 1e-2 {
        let z2 = z * z;
        let p = 1.0 + z / 2.0 + z2 / 6.0 + z2 * z / 24.0 + z2 * z2 / 120.0;
        let dp = 0.5 + z / 3.0 + z2 / 8.0 + z2 * z / 30.0 + z2 * z2 / 144.0;
        (p, dp)
    } else {
        let e = z.exp();
        ((e - 1.0) / z, (z * e - e + 1.0) / (z * z))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MambaParams {
    pub a_log: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    /// `log Δ` per channel in LTI mode, the softplus bias in selective mode.
    pub dt: ParamId,
    /// Per-channel input weight of the selective step size.
    pub dt_weight: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct MambaBlock {
    pub params: MambaParams,
    pub d_model: usize,
    pub d_state: usize,
    pub selective: bool,
}

impl MambaBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_state: usize,
        selective: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let a_log: Vec<f64> = (0..d_model)
            .flat_map(|_| (0..d_state).map(|k| (1.0 + k as f64).ln()))
            .collect();
        let bound = 1.0 / (d_state as f64).sqrt();
        let a_log = store.add(format!("{prefix}.a_log"), Tensor::from_parts(vec![d_model, d_state], a_log))?;
        let b = store.add(format!("{prefix}.b"), init::uniform(rng, &[d_model, d_state], bound))?;
        let c = store.add(format!("{prefix}.c"), init::uniform(rng, &[d_model, d_state], bound))?;
        let (dt, dt_weight) = if selective {
            let inv_softplus = DEFAULT_DELTA.exp_m1().ln();
            let dt = store.add(format!("{prefix}.dt_bias"), Tensor::full(&[d_model], inv_softplus))?;
            let w = store.add(format!("{prefix}.dt_weight"), Tensor::zeros(&[d_model]))?;
            (dt, Some(w))
        } else {
            let dt = store.add(format!("{prefix}.log_dt"), Tensor::full(&[d_model], DEFAULT_DELTA.ln()))?;
            (dt, None)
        };
        Ok(Self {
            params: MambaParams { a_log, b, c, dt, dt_weight },
            d_model,
            d_state,
            selective,
        })
    }

    /// Continuous parameters of channel `d` (LTI mode).
    pub fn channel_params(&self, store: &ParamStore, d: usize) -> SsmParams {
        let n = self.d_state;
        let row = |id: ParamId| store.value(id).row(d).to_vec();
        let a_diag: Vec<f64> = row(self.params.a_log).iter().map(|v| -v.exp()).collect();
        let mut a = Tensor::zeros(&[n, n]);
        for (k, v) in a_diag.iter().enumerate() {
            a.data_mut()[k * n + k] = *v;
        }
        let delta = store.value(self.params.dt).data()[d].exp();
        SsmParams { a, b: row(self.params.b), c: row(self.params.c), delta }
    }

    /// Discretized parameters of channel `d` (LTI mode), straight from the
    /// diagonal closed form.
    pub fn channel_discrete(&self, store: &ParamStore, d: usize) -> DiscreteSsm {
        let p = self.channel_params(store, d);
        let n = self.d_state;
        let mut a = Tensor::zeros(&[n, n]);
        let mut b = vec![0.0; n];
        for k in 0..n {
            let z = p.delta * p.a.at(k, k);
            a.data_mut()[k * n + k] = z.exp();
            b[k] = p.delta * p.b[k] * phi(z).0;
        }
        DiscreteSsm { a, b }
    }

    /// `out = Q + SSM(Q)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var) -> Result<Var> {
        let y = self.ssm(tape, store, q);
        tape.add(q, y)
    }

    /// The SSM branch alone.
    pub fn ssm(&self, tape: &mut Tape, store: &ParamStore, q: Var) -> Var {
        let mut inputs = vec![
            q,
            tape.param(store, self.params.a_log),
            tape.param(store, self.params.b),
            tape.param(store, self.params.c),
            tape.param(store, self.params.dt),
        ];
        if let Some(w) = self.params.dt_weight {
            inputs.push(tape.param(store, w));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| tape.value(v)).collect();
        let (out, rule) = ScanOp::forward(&vals, self.d_state, self.selective);
        tape.custom(&inputs, out, Box::new(rule))
    }
}

/// Saved forward state of the fused diagonal scan.
struct ScanOp {
    len: usize,
    d_model: usize,
    d_state: usize,
    selective: bool,
    /// `Δ` per `(t, d)`.
    delta: Vec<f64>,
    /// Pre-softplus input per `(t, d)` in selective mode.
    pre: Vec<f64>,
    /// States `h_t` per `(t, d, n)`.
    states: Vec<f64>,
}

impl ScanOp {
    fn forward(inputs: &[&Tensor], d_state: usize, selective: bool) -> (Tensor, Self) {
        let u = inputs[0];
        let (len, d_model) = (u.rows(), u.cols());
        let (a_log, b, c, dt) = (inputs[1].data(), inputs[2].data(), inputs[3].data(), inputs[4].data());
        let mut delta = vec![0.0; len * d_model];
        let mut pre = Vec::new();
        if selective {
            let w = inputs[5].data();
            pre = vec![0.0; len * d_model];
            for t in 0..len {
                for d in 0..d_model {
                    let p = w[d] * u.at(t, d) + dt[d];
                    pre[t * d_model + d] = p;
                    delta[t * d_model + d] = softplus(p);
                }
            }
        } else {
            for t in 0..len {
                for d in 0..d_model {
                    delta[t * d_model + d] = dt[d].exp();
                }
            }
        }

        let n = d_state;
        let mut states = vec![0.0; len * d_model * n];
        let mut y = vec![0.0; len * d_model];
        for d in 0..d_model {
            let a: Vec<f64> = (0..n).map(|k| -a_log[d * n + k].exp()).collect();
            for t in 0..len {
                let dl = delta[t * d_model + d];
                let ut = u.at(t, d);
                let mut acc = 0.0;
                for k in 0..n {
                    let z = dl * a[k];
                    let bar_a = z.exp();
                    let bar_b = dl * b[d * n + k] * phi(z).0;
                    let prev = if t == 0 { 0.0 } else { states[((t - 1) * d_model + d) * n + k] };
                    let h = bar_a * prev + bar_b * ut;
                    states[(t * d_model + d) * n + k] = h;
                    acc += c[d * n + k] * h;
                }
                y[t * d_model + d] = acc;
            }
        }
        let out = Tensor::from_parts(vec![len, d_model], y);
        (out, Self { len, d_model, d_state, selective, delta, pre, states })
    }
}

impl CustomBackward for ScanOp {
    fn name(&self) -> &'static str {
        "diagonal_ssm_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (len, dm, n) = (self.len, self.d_model, self.d_state);
        let u = inputs[0];
        let (a_log, b, c) = (inputs[1].data(), inputs[2].data(), inputs[3].data());
        let mut gu = vec![0.0; len * dm];
        let mut ga_log = vec![0.0; dm * n];
        let mut gb = vec![0.0; dm * n];
        let mut gc = vec![0.0; dm * n];
        let mut gdt = vec![0.0; dm];
        let mut gw = vec![0.0; dm];
        let w = if self.selective { Some(inputs[5].data()) } else { None };

        for d in 0..dm {
            let a: Vec<f64> = (0..n).map(|k| -a_log[d * n + k].exp()).collect();
            let mut ga = vec![0.0; n];
            let mut gh = vec![0.0; n];
            let mut carry_bar_a = vec![0.0; n];
            for t in (0..len).rev() {
                let gy = grad.at(t, d);
                let dl = self.delta[t * dm + d];
                let ut = u.at(t, d);
                let mut gdelta = 0.0;
                for k in 0..n {
                    // cotangent of h_t: readout plus what flowed back from h_{t+1}
                    gh[k] = c[d * n + k] * gy + carry_bar_a[k] * gh[k];
                    let h = self.states[(t * dm + d) * n + k];
                    let prev = if t == 0 { 0.0 } else { self.states[((t - 1) * dm + d) * n + k] };
                    gc[d * n + k] += gy * h;

                    let z = dl * a[k];
                    let bar_a = z.exp();
                    let (p, dp) = phi(z);
                    let bk = b[d * n + k];
                    let bar_b = dl * bk * p;

                    let g_bar_a = gh[k] * prev;
                    let g_bar_b = gh[k] * ut;
                    gu[t * dm + d] += gh[k] * bar_b;

                    ga[k] += g_bar_a * dl * bar_a + g_bar_b * dl * dl * bk * dp;
                    gb[d * n + k] += g_bar_b * dl * p;
                    gdelta += g_bar_a * a[k] * bar_a + g_bar_b * bk * bar_a;
                    carry_bar_a[k] = bar_a;
                }
                match w {
                    Some(w) => {
                        let gpre = gdelta * sigmoid(self.pre[t * dm + d]);
                        gdt[d] += gpre;
                        gw[d] += gpre * ut;
                        gu[t * dm + d] += gpre * w[d];
                    }
                    None => gdt[d] += gdelta * dl,
                }
            }
            for k in 0..n {
                ga_log[d * n + k] = ga[k] * a[k];
            }
        }

        let mut out = vec![
            Some(Tensor::from_parts(u.shape().to_vec(), gu)),
            Some(Tensor::from_parts(vec![dm, n], ga_log)),
            Some(Tensor::from_parts(vec![dm, n], gb)),
            Some(Tensor::from_parts(vec![dm, n], gc)),
            Some(Tensor::from_parts(vec![dm], gdt)),
        ];
        if self.selective {
            out.push(Some(Tensor::from_parts(vec![dm], gw)));
        }
        out
    }
}
