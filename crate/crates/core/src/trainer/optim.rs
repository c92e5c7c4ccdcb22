//! AdamW with global gradient-norm clipping and the step-halving schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    #[serde(default = "defaults::initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "defaults::halving_period")]
    pub halving_period: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
}

mod defaults {
    pub fn initial_lr() -> f64 {
        1e-4
    }
    pub fn halving_period() -> usize {
        10
    }
    pub fn epochs() -> usize {
        50
    }
    pub fn batch_size() -> usize {
        1
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            initial_lr: defaults::initial_lr(),
            halving_period: defaults::halving_period(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::config("schedule.initial_lr", format!("must be positive, got {}", self.initial_lr)));
        }
        for (field, v) in [
            ("schedule.halving_period", self.halving_period),
            ("schedule.epochs", self.epochs),
            ("schedule.batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.batch_size != 1 {
            return Err(Error::config("schedule.batch_size", "only batch size 1 is supported"));
        }
        Ok(())
    }

    /// `initial_lr · 0.5^⌊epoch / halving_period⌋`.
    pub fn lr(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.halving_period).min(i32::MAX as usize) as i32;
        self.initial_lr * 0.5f64.powi(halvings)
    }
}

pub const GRAD_CLIP: f64 = 1.0;

/// Rescales every gradient so the global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (theta, g) = (p.value.data_mut(), p.grad.data());
            for k in 0..theta.len() {
                let mk = &mut m.data_mut()[k];
                *mk = c.beta1 * *mk + (1.0 - c.beta1) * g[k];
                let vk = &mut v.data_mut()[k];
                *vk = c.beta2 * *vk + (1.0 - c.beta2) * g[k] * g[k];
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                theta[k] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_rule() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(9), 1e-4);
        assert_eq!(s.lr(10), 5e-5);
        assert_eq!(s.lr(25), 2.5e-5);
        assert_eq!(s.lr(49), 6.25e-6);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        let bad = TrainSchedule { halving_period: 0, ..Default::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("halving_period"));
        let bad = TrainSchedule { initial_lr: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        let b = s.add("b", Tensor::zeros(&[1])).unwrap();
        s.get_mut(a).grad = Tensor::vector(vec![3.0, 0.0]);
        s.get_mut(b).grad = Tensor::vector(vec![4.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-15);
        assert_eq!(s.get(b).grad.data(), &[0.8]);
        assert_eq!(clip_grad_norm(&mut s, 2.0), s.grad_norm());
        assert_eq!(s.get(b).grad.data(), &[0.8]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, -2.0])).unwrap();
        s.get_mut(a).grad = Tensor::vector(vec![0.5, -3.0]);
        let mut opt = AdamW::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.update(&mut s, 0.1);
        // bias-corrected first step is lr·sign(g) up to ε
        assert!((s.value(a).data()[0] - 0.9).abs() < 1e-6);
        assert!((s.value(a).data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![2.0])).unwrap();
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.update(&mut s, 0.5);
        assert!((s.value(a).data()[0] - (2.0 - 0.5 * 1e-4 * 2.0)).abs() < 1e-15);
    }
}
