// SPDX-License-Identifier: MIT OR Apache-2.0

//! First-order optimizers with optional box constraints on parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer kind and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Plain gradient descent.
    Sgd { lr: f64 },
    /// Adaptive moments (Adam).
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Default for mask search.
    pub fn mask_default() -> Self {
        Self::adam(1e-2)
    }

    /// Default for fine-tuning baselines.
    pub fn baseline_default() -> Self {
        Self::adam(1e-3)
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    bounds: Vec<Option<(f64, f64)>>,
    steps: u64,
    lr_scale: f64,
}

impl Optimizer {
    /// State for parameters of the given sizes, all unconstrained.
    pub fn new(config: OptimizerConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            bounds: vec![None; sizes.len()],
            steps: 0,
            lr_scale: 1.0,
        }
    }

    /// Clamp parameter `index` into `[lo, hi]` after every step.
    pub fn with_bounds(mut self, index: usize, lo: f64, hi: f64) -> Self {
        self.bounds[index] = Some((lo, hi));
        self
    }

    /// Multiplies the configured learning rate for subsequent steps.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Fails without touching any parameter when a
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::usage(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.numel() || p.numel() != self.first[i].len() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("param {i} {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {i} at step {}",
                    self.steps
                )));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let scale = self.lr_scale;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match self.config {
                OptimizerConfig::Sgd { lr } => p.axpy(-lr * scale, g),
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((x, &gr), mi), vi) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v)
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gr;
                        *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                        *x -= scale * lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
            if let Some((lo, hi)) = self.bounds[i] {
                p.data_mut().iter_mut().for_each(|x| *x = x.clamp(lo, hi));
            }
        }
        Ok(())
    }
}
