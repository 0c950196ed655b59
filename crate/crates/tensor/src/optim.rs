//! First-order parameter updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::{OptState, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    RmsProp { alpha: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::RmsProp {
                alpha: 0.99,
                eps: 1e-8,
            },
            learning_rate,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TensorError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TensorError::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Applies one update to every trainable tensor in `params`.
///
/// Updated values are rounded back to each tensor's own dtype; optimizer
/// memory is kept in f64.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    config: &OptimizerConfig,
) -> Result<()> {
    config.validate()?;
    let names = params.trainable_names();
    for n in &names {
        if !grads.contains_key(n) {
            return Err(TensorError::MissingGradient(n.clone()));
        }
    }
    params.step += 1;
    let t = params.step as i32;
    let lr = config.learning_rate;
    for name in names {
        let grad = grads[&name].to_f64_vec();
        let current = params.require(&name)?;
        let (shape, dtype) = (current.shape().to_vec(), current.dtype());
        let mut w = current.to_f64_vec();
        if grad.len() != w.len() {
            return Err(TensorError::ParamShape {
                name,
                expected: shape,
                actual: vec![grad.len()],
            });
        }
        match config.kind {
            OptimizerKind::Sgd => {
                for (wi, gi) in w.iter_mut().zip(&grad) {
                    *wi -= lr * gi;
                }
            }
            OptimizerKind::RmsProp { alpha, eps } => {
                let st = params
                    .state
                    .entry(name.clone())
                    .or_insert_with(|| OptState::RmsProp {
                        square_avg: vec![0.0; grad.len()],
                    });
                let OptState::RmsProp { square_avg } = st else {
                    return Err(TensorError::InvalidConfig(format!(
                        "optimizer changed mid-training for `{name}`"
                    )));
                };
                for ((wi, gi), si) in w.iter_mut().zip(&grad).zip(square_avg.iter_mut()) {
                    *si = alpha * *si + (1.0 - alpha) * gi * gi;
                    *wi -= lr * gi / (si.sqrt() + eps);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let st = params
                    .state
                    .entry(name.clone())
                    .or_insert_with(|| OptState::Adam {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                    });
                let OptState::Adam { m, v } = st else {
                    return Err(TensorError::InvalidConfig(format!(
                        "optimizer changed mid-training for `{name}`"
                    )));
                };
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..w.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    w[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        let updated = Tensor::from_values(shape, dtype, &w)?;
        params.replace_values(&name, updated)?;
    }
    Ok(())
}
