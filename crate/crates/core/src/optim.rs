//! AdamW with decoupled weight decay and the poly learning-rate schedule.

use std::collections::BTreeMap;

use evseg_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to tensors of rank 2 and up; biases, norm affines and scalars
    /// are not decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched.
    pub fn update<'a>(
        &mut self,
        store: &mut ParamStore,
        grads: impl IntoIterator<Item = (&'a str, Tensor)>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::Data(format!("gradient for unknown parameter {name}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!(
                    "{name}: gradient {:?} for parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let decay = if param.rank() >= 2 { weight_decay } else { 0.0 };
            let n = param.len();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *p -= lr * decay * *p;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `base * (1 - iter / total)^power`, zero from `total` on.
pub fn poly_lr(base: f64, iter: u64, total: u64, power: f64) -> f64 {
    if total == 0 || iter >= total {
        return 0.0;
    }
    base * (1.0 - iter as f64 / total as f64).powf(power)
}
