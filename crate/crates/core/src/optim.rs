//! SGD and Adam parameter updates.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerConfig {
    pub fn sgd(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Stateful optimizer over a fixed parameter set. Parameters are identified
/// by tensor id, so the same optimizer must be fed the same tensors on every
/// step.
pub struct Optimizer {
    pub config: OptimizerConfig,
    state: HashMap<u64, Moments>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            state: HashMap::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter and zeroes the gradients.
    /// Errors if any parameter is missing its gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<(), TensorError>
    where
        I: IntoIterator<Item = (&'a str, &'a Tensor)>,
    {
        let params: Vec<(&str, &Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if p.grad().is_none() {
                return Err(TensorError::MissingGrad {
                    name: (*name).to_string(),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        for (_, p) in &params {
            let grad = p.grad().unwrap();
            let mut data = p.to_vec();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (d, g) in data.iter_mut().zip(&grad) {
                        *d -= self.config.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let OptimizerConfig {
                        lr,
                        beta1,
                        beta2,
                        eps,
                        ..
                    } = self.config;
                    let moments = self.state.entry(p.id()).or_insert_with(|| Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                    });
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    for i in 0..grad.len() {
                        let g = grad[i];
                        moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
                        moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
                        let mhat = moments.m[i] / bc1;
                        let vhat = moments.v[i] / bc2;
                        data[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            p.set_data(data);
            p.zero_grad();
        }
        Ok(())
    }
}
