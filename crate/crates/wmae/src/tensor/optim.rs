//! AdamW with decoupled weight decay.

use super::{Scalar, Tensor};
use crate::error::{Result, WmaeError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, weight_decay: 0.05, eps: 1e-8 }
    }
}

/// Optimizer state: first/second moments per parameter plus a step count.
/// The moment layout mirrors the parameter list passed at construction.
pub struct AdamW<T: Scalar> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamW {
            cfg,
            m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restore moments and step count (checkpoint resume).
    pub fn restore(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(WmaeError::Checkpoint(format!(
                "optimizer state has {} moment tensors, model has {}",
                m.len(),
                self.m.len()
            )));
        }
        for (i, (mm, vv)) in m.iter().zip(&v).enumerate() {
            if mm.len() != self.m[i].len() || vv.len() != self.v[i].len() {
                return Err(WmaeError::Checkpoint(format!(
                    "optimizer moment {i} has {} elements, expected {}",
                    mm.len(),
                    self.m[i].len()
                )));
            }
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// One update. `grads[i]` is the gradient of `params[i]` (a missing
    /// gradient counts as zero). Weight decay is applied to the parameter
    /// directly, not folded into the gradient.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(String, Tensor<T>)],
        grads: &[Option<&[T]>],
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::one() - b1;
        let one_m_b2 = T::one() - b2;
        let eps = T::from_f64(self.cfg.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.cfg.weight_decay);

        for (i, (name, p)) in params.iter_mut().enumerate() {
            if let Some(g) = grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(WmaeError::NonFinite(format!("gradient of parameter {name}")));
                }
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i].map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                pd[j] = pd[j] - lr_t * (m_hat / (v_hat.sqrt() + eps)) - decay * pd[j];
            }
        }
        Ok(())
    }
}
