//! SGD and Adam with L2 weight decay and step learning-rate decay.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub step_epochs: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay: Option<StepDecay>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    config: OptimizerConfig,
    lr: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            lr: config.lr,
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies the step schedule for the given (zero-based) epoch.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = match self.config.decay {
            Some(d) if d.step_epochs > 0 => self.config.lr * d.gamma.powi((epoch / d.step_epochs) as i32),
            _ => self.config.lr,
        };
    }

    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(&[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let lr = F::lit(self.lr);
        let wd = F::lit(self.config.weight_decay);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * (gv + wd * *w);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.v = self.m.clone();
                }
                let (b1, b2) = (F::lit(beta1), F::lit(beta2));
                let bc1 = F::lit(1.0 - beta1.powi(self.step as i32));
                let bc2 = F::lit(1.0 - beta2.powi(self.step as i32));
                let eps = F::lit(eps);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let pd = p.data_mut();
                    for i in 0..pd.len() {
                        let gv = g.data()[i] + wd * pd[i];
                        let mi = &mut m.data_mut()[i];
                        *mi = b1 * *mi + (F::one() - b1) * gv;
                        let mhat = *mi / bc1;
                        let vi = &mut v.data_mut()[i];
                        *vi = b2 * *vi + (F::one() - b2) * gv * gv;
                        let vhat = *vi / bc2;
                        pd[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
