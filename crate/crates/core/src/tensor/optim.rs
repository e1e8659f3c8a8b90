use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::nn::Parameter;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
///
/// Moments are keyed by parameter name, so the same optimizer can be applied
/// to a subset of a model's parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter that holds a gradient. Parameters
    /// without a gradient are left untouched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params {
            let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            let n = p.tensor.len();
            let m = self.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return Err(Error::dim(format!(
                    "optimizer state for `{}` has {} entries, parameter has {n}",
                    p.name,
                    m.len()
                )));
            }
            for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                *x -= c.lr * c.weight_decay * *x;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to `base · floor` over `total` epochs.
pub fn cosine_lr(base: f64, epoch: usize, total: usize, floor: f64) -> f64 {
    let frac = if total <= 1 { 0.0 } else { epoch as f64 / (total - 1) as f64 };
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(value: f64, grad: f64) -> Parameter {
        let mut p = Parameter::new("p", Tensor::vector(vec![value]).unwrap());
        p.tensor.accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = param(0.7, 0.0);
        opt.step([&mut p]).unwrap();
        assert_eq!(p.tensor.data(), &[0.7]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() };
        for g in [-3.0, -0.01, 0.5, 2.0] {
            let mut opt = AdamW::new(cfg).unwrap();
            let mut p = param(1.0, g);
            opt.step([&mut p]).unwrap();
            // m_hat = g and v_hat = g^2 after bias correction.
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p.tensor.data()[0] - expected).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg).unwrap();
        let mut p = param(1.0, 0.0);
        opt.step([&mut p]).unwrap();
        assert!((p.tensor.data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0.1), 1.0);
        assert!((cosine_lr(1.0, 9, 10, 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(cosine_lr(2.0, 0, 1, 0.1), 2.0);
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(AdamW::new(AdamWConfig { beta1: 1.0, ..Default::default() }).is_err());
    }
}
