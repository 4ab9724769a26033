//! Adam optimizer with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected update over every named parameter. Each parameter
    /// must carry a populated gradient.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params {
            let grad = p.grad().ok_or_else(|| {
                Error::Contract(format!("adam step: parameter `{name}` has no gradient"))
            })?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::DimensionMismatch {
                    context: format!("adam moments for `{name}`"),
                    left: vec![m.len()],
                    right: vec![grad.len()],
                });
            }
            p.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i] + c.weight_decay * data[i];
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            });
        }
        Ok(())
    }
}


/// Scale all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(params: &[(String, Tensor)], max_norm: f64) {
    let mut total = 0.0;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            total += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = total.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = max_norm / norm;
    for (_, p) in params {
        let mut n = p.inner.borrow_mut();
        if let Some(g) = n.grad.as_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
}
