use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Number of updates applied to this parameter.
    pub t: u64,
}

/// Adam optimizer state keyed by parameter name.
///
/// Step counters live with each parameter's moments, so parameters that sit
/// out an update (frozen ones) keep their state untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    entries: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            entries: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &Moments)> {
        self.entries.iter()
    }

    pub fn insert(&mut self, name: String, moments: Moments) {
        self.entries.insert(name, moments);
    }

    /// Applies one bias-corrected Adam update to every `(name, param, grad)`.
    ///
    /// All gradients are validated before any parameter is touched.
    pub fn step(&mut self, updates: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<(), DiffError> {
        for (name, param, grad) in updates.iter() {
            if param.shape() != grad.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![param.shape().to_vec(), grad.shape().to_vec()],
                });
            }
            if !grad.is_finite() {
                return Err(DiffError::InvalidArgument(format!(
                    "adam_step: non-finite gradient for {name}"
                )));
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        for (name, param, grad) in updates.iter_mut() {
            let entry = self.entries.entry((*name).to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(param.shape()),
                v: Tensor::zeros(param.shape()),
                t: 0,
            });
            if entry.m.shape() != param.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![entry.m.shape().to_vec(), param.shape().to_vec()],
                });
            }
            entry.t += 1;
            let bc1 = 1.0 - beta1.powi(entry.t as i32);
            let bc2 = 1.0 - beta2.powi(entry.t as i32);
            let m = entry.m.data_mut();
            let v = entry.v.data_mut();
            let p = param.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                if lr != 0.0 {
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}
