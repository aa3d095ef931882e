//! Adadelta and Adam over every parameter tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::netops::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adadelta {
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_adadelta_eps")]
        eps: f64,
        #[serde(default = "default_adadelta_lr")]
        lr: f64,
    },
    Adam {
        #[serde(default = "default_adam_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_rho() -> f64 {
    0.9
}
fn default_adadelta_eps() -> f64 {
    1e-6
}
fn default_adadelta_lr() -> f64 {
    1.0
}
fn default_adam_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adadelta() -> Self {
        OptimizerConfig::Adadelta {
            rho: default_rho(),
            eps: default_adadelta_eps(),
            lr: default_adadelta_lr(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum State {
    Adadelta {
        sq_grad: Vec<Tensor>,
        sq_update: Vec<Tensor>,
    },
    Adam {
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        t: i32,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: State,
}

fn zeros_for(params: &impl Parameterized) -> Vec<Tensor> {
    (0..params.tensor_count())
        .map(|i| Tensor::zeros(params.tensor(i).shape()))
        .collect()
}

impl Optimizer {
    pub fn new<P: Parameterized>(config: OptimizerConfig, params: &P) -> Self {
        let state = match config {
            OptimizerConfig::Adadelta { .. } => State::Adadelta {
                sq_grad: zeros_for(params),
                sq_update: zeros_for(params),
            },
            OptimizerConfig::Adam { .. } => State::Adam {
                m: zeros_for(params),
                v: zeros_for(params),
                t: 0,
            },
        };
        Optimizer { config, state }
    }

    /// Apply one update given dense gradients shaped like `params`.
    pub fn step_dense<P: Parameterized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        for t in 0..grads.tensor_count() {
            if !grads.tensor(t).is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", grads.tensor_name(t))));
            }
        }
        match (&self.config, &mut self.state) {
            (&OptimizerConfig::Adadelta { rho, eps, lr }, State::Adadelta { sq_grad, sq_update }) => {
                for t in 0..params.tensor_count() {
                    let g = grads.tensor(t).data();
                    let eg = sq_grad[t].data_mut();
                    let ex = sq_update[t].data_mut();
                    let x = params.tensor_mut(t).data_mut();
                    for i in 0..x.len() {
                        eg[i] = rho * eg[i] + (1.0 - rho) * g[i] * g[i];
                        let delta = -((ex[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g[i];
                        ex[i] = rho * ex[i] + (1.0 - rho) * delta * delta;
                        x[i] += lr * delta;
                    }
                }
            }
            (&OptimizerConfig::Adam { lr, beta1, beta2, eps }, State::Adam { m, v, t: step }) => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for t in 0..params.tensor_count() {
                    let g = grads.tensor(t).data();
                    let m = m[t].data_mut();
                    let v = v[t].data_mut();
                    let x = params.tensor_mut(t).data_mut();
                    for i in 0..x.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer state matches its config"),
        }
        Ok(())
    }

    /// Apply one update to a model; the padding embedding row stays zero.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let dense = grads.to_dense(params);
        self.step_dense(params, &dense)?;
        params.embedding.row_mut(crate::corpus::PAD_ID as usize).fill(0.0);
        Ok(())
    }
}
