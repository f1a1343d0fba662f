//! AdamW with decoupled weight decay, plus the linear-warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = m.clone();
        Self { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently accumulated in `params`.
    ///
    /// A non-finite gradient rejects the whole step: nothing is modified and
    /// the step counter does not advance.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {}", bad.name)));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let theta = p.value.data_mut();
            for j in 0..theta.len() {
                let g = p.grad[j];
                theta[j] -= lr * weight_decay * theta[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `base` over `warmup` steps (1-based), constant afterwards.
pub fn warmup_lr(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(values: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(values)).unwrap();
        s.get_mut(id).grad = grad;
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(vec![1.0, -2.0, 0.5], vec![0.3, -4.0, 1e-3]);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, 0.01).unwrap();
        let got = s.iter().next().unwrap().value.data().to_vec();
        let want = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store(vec![1.0, 2.0], vec![0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &s);
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut s = store(vec![1.0, -3.0], vec![0.0, 0.0]);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..Default::default() }, &s);
        opt.step(&mut s, 0.5).unwrap();
        let f = 1.0 - 0.5 * 0.1;
        let got = s.iter().next().unwrap().value.data().to_vec();
        assert!((got[0] - f).abs() < 1e-15 && (got[1] + 3.0 * f).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store(vec![1.0], vec![f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(matches!(opt.step(&mut s, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(opt.steps_taken(), 0);
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        assert_eq!(warmup_lr(1e-3, 500, 250), 1e-3 * 250.0 / 500.0);
        assert_eq!(warmup_lr(1e-3, 500, 500), 1e-3);
        assert_eq!(warmup_lr(1e-3, 500, 9000), 1e-3);
        assert_eq!(warmup_lr(1e-3, 0, 1), 1e-3);
    }
}
