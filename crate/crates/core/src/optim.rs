//! AdamW with global-norm clipping and the warmup / linear-decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to `end_lr` at
/// `total_steps`. Steps are counted from 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be below total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.end_lr < self.peak_lr) || self.end_lr < 0.0 {
            return Err(Error::Config(format!(
                "end lr {} must be non-negative and below peak lr {}",
                self.end_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.peak_lr;
            }
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.peak_lr * (1.0 - t) + self.end_lr * t
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// Global L2 norm over a gradient set.
pub fn grad_norm<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    /// One update of every parameter that has a gradient. Matrices are
    /// weight-decayed, vectors are not. Returns the pre-clip gradient norm.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<f64> {
        let norm = grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at step {}", self.step + 1)));
        }
        let c = self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let decay = if p.shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi.as_f64() * clip;
                let mn = c.beta1 * mi.as_f64() + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * vi.as_f64() + (1.0 - c.beta2) * gi * gi;
                *mi = T::from_f64_lossy(mn);
                *vi = T::from_f64_lossy(vn);
                let upd = (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                let pv = pi.as_f64();
                *pi = T::from_f64_lossy(pv - lr * (upd + decay * pv));
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            peak_lr: 1e-4,
            end_lr: 1e-6,
            warmup_steps: 40,
            total_steps: 400,
        };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(40), 1e-4);
        assert_eq!(s.lr(400), 1e-6);
        assert!((s.lr(1) - 1e-4 / 40.0).abs() < 1e-20);
        assert!((s.lr(220) - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn schedule_rejects_bad_shapes() {
        let mut s = Schedule {
            peak_lr: 1e-3,
            end_lr: 1e-5,
            warmup_steps: 10,
            total_steps: 10,
        };
        assert!(s.validate().is_err());
        s.total_steps = 11;
        assert!(s.validate().is_ok());
        s.end_lr = 1e-3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(&[2], &[1.0, -1.0]));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::from_f64(&[2], &[0.3, -0.02]));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.update(&mut p, &g, 0.01).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
    }
}
