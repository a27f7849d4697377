//! First-order optimizers with serialisable state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
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

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    fn slots(&self) -> usize {
        match self {
            OptimizerConfig::Adam { .. } => 2,
            OptimizerConfig::Sgd { .. } => 1,
        }
    }
}

/// Optimizer state for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    step: u64,
    /// `slots[k][i]`: k-th moment buffer of parameter i.
    slots: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Self {
        let slots = (0..config.slots())
            .map(|_| params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect())
            .collect();
        Self {
            config,
            step: 0,
            slots,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn slots(&self) -> &[Vec<Tensor<T>>] {
        &self.slots
    }

    pub(crate) fn restore(&mut self, step: u64, slots: Vec<Vec<Tensor<T>>>) {
        self.step = step;
        self.slots = slots;
    }

    /// Applies one update. Non-finite gradients abort before any parameter
    /// is touched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(Error::Training {
                    step: self.step + 1,
                    phase: "optimizer".into(),
                    msg: format!("non-finite gradient for parameter {}", params.names()[i]),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        match self.config {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                let (lr, eps) = (T::lit(lr), T::lit(eps));
                let (ms, vs) = self.slots.split_at_mut(1);
                for (i, g) in grads.iter().enumerate() {
                    let p = params.get_mut(i).data_mut();
                    let m = ms[0][i].data_mut();
                    let v = vs[0][i].data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = b1 * m[j] + (T::one() - b1) * gj;
                        v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        p[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
                for (i, g) in grads.iter().enumerate() {
                    let p = params.get_mut(i).data_mut();
                    let vel = self.slots[0][i].data_mut();
                    for j in 0..p.len() {
                        let d = g.data()[j] + wd * p[j];
                        vel[j] = mu * vel[j] + d;
                        p[j] -= lr * vel[j];
                    }
                }
            }
        }
        Ok(())
    }
}
