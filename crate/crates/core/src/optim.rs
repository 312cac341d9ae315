//! Adam and SGD with momentum over a model's parameter list.

use serde::{Deserialize, Serialize};

use crate::tensor::{Param, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid optimizer settings {self:?}"))
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3, 1e-4)
    }
}

/// Optimizer state for a fixed parameter list. Weight decay is added to
/// the gradient before the moment updates (L2 regularization).
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients stored in `params`. `lr_scale[i]`
    /// multiplies the learning rate of parameter `i`; parameters with scale 0
    /// are left untouched.
    pub fn step(&mut self, params: &mut [Param<T>], lr_scale: &[f64]) {
        assert_eq!(params.len(), lr_scale.len(), "one lr scale per parameter");
        self.steps += 1;
        let t = self.steps as i32;
        for (i, p) in params.iter_mut().enumerate() {
            if lr_scale[i] == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let values = p.value.data_mut();
            match self.config {
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let lr = lr * lr_scale[i];
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let c1 = T::lit(1.0 - beta1.powi(t));
                    let c2 = T::lit(1.0 - beta2.powi(t));
                    let (lr, eps, wd) = (T::lit(lr), T::lit(eps), T::lit(weight_decay));
                    for j in 0..values.len() {
                        let g = p.grad[j] + wd * values[j];
                        m[j] = b1 * m[j] + (T::one() - b1) * g;
                        v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        values[j] = values[j] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd {
                    lr,
                    momentum,
                    weight_decay,
                } => {
                    let (lr, mu, wd) = (T::lit(lr * lr_scale[i]), T::lit(momentum), T::lit(weight_decay));
                    for j in 0..values.len() {
                        let g = p.grad[j] + wd * values[j];
                        m[j] = mu * m[j] + g;
                        values[j] = values[j] - lr * m[j];
                    }
                }
            }
        }
    }
}
