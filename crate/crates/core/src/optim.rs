//! AdamW with a warmup-then-cosine learning rate.

use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::Scalar;
use serde::{Deserialize, Serialize};

/// Linear warmup to `peak`, then cosine decay to `floor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub warmup_fraction: f64,
    pub peak: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { warmup_fraction: 0.05, peak: 1e-3, floor: 1e-5 }
    }
}

impl LrSchedule {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("{prefix}.lr.warmup_fraction must lie in [0, 1)")));
        }
        if !(self.peak >= 0.0 && self.floor >= 0.0 && self.floor <= self.peak) {
            return Err(Error::Config(format!("{prefix}.lr needs 0 <= floor <= peak")));
        }
        Ok(())
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1);
        let warmup = (self.warmup_fraction * total as f64).round() as usize;
        if step < warmup {
            return self.peak * (step + 1) as f64 / warmup as f64;
        }
        let span = (total - warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to weight matrices (names ending in `.w`).
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, grad_clip: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    cfg: AdamConfig,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    decay: Vec<bool>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamConfig, names: &[String], params: &[Mat<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect(),
            decay: names.iter().map(|n| n.ends_with(".w")).collect(),
            step: 0,
        }
    }

    /// Global L2 norm of a gradient set.
    pub fn grad_norm(grads: &[Mat<T>]) -> T {
        grads.iter().map(|g| g.sum_sq()).sum::<T>().sqrt()
    }

    /// One update. A zero learning rate leaves `params` bitwise unchanged.
    pub fn update(&mut self, params: &mut [Mat<T>], grads: &[Mat<T>], lr: f64) {
        self.step += 1;
        let c = &self.cfg;
        let norm = Self::grad_norm(grads).as_f64();
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip { c.grad_clip / norm } else { 1.0 };
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr_t, eps, clip_t) = (T::lit(lr), T::lit(c.eps), T::lit(clip));
        for i in 0..params.len() {
            let wd = if self.decay[i] { T::lit(c.weight_decay) } else { T::zero() };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, (p, &g)) in params[i].data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g * clip_t;
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let upd = (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps) + wd * *p;
                if lr_t != T::zero() {
                    *p = *p - lr_t * upd;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { warmup_fraction: 0.1, peak: 1.0, floor: 0.0 };
        assert!((s.at(0, 100) - 0.1).abs() < 1e-12);
        assert!((s.at(9, 100) - 1.0).abs() < 1e-12);
        assert!((s.at(10, 100) - 1.0).abs() < 1e-12);
        assert!(s.at(99, 100) < 0.01);
        assert!((s.at(55, 100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op_and_adam_moves_against_gradient() {
        let names = vec!["a.w".to_string()];
        let mut p = vec![Mat::from_vec(1, 2, vec![1.0f64, -2.0])];
        let g = vec![Mat::from_vec(1, 2, vec![0.5, -0.5])];
        let mut opt = AdamW::new(AdamConfig::default(), &names, &p);
        let before = p.clone();
        opt.update(&mut p, &g, 0.0);
        assert_eq!(p, before);
        opt.update(&mut p, &g, 0.1);
        assert!(p[0].get(0, 0) < 1.0 && p[0].get(0, 1) > -2.0);
    }
}
