use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam()
    }
}

/// Optimizer with per-parameter buffers, allocated on the first step.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub kind: OptimizerKind,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    pub step_count: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimState { kind, first: Vec::new(), second: Vec::new(), step_count: 0 }
    }

    /// SGD: `v = momentum v + g; p -= lr v`. Adam: bias-corrected moments,
    /// `p -= lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[&[T]], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::Contract(format!(
                    "gradient of length {} for parameter {:?}",
                    g.len(),
                    p.shape()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(b, p)| b.len() != p.numel()) {
            return Err(Error::Contract("optimizer buffers do not match the parameters".into()));
        }
        self.step_count += 1;
        let lr_t = T::from_f64(lr);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = T::from_f64(momentum);
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(*g).zip(v.iter_mut()) {
                        *vi = mu * *vi + gi;
                        *pi -= lr_t * *vi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let c1 = T::from_f64(1.0 / (1.0 - beta1.powi(t)));
                let c2 = T::from_f64(1.0 / (1.0 - beta2.powi(t)));
                let (b1, b2, eps) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
                let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = b1 * *mi + one_b1 * gi;
                        *vi = b2 * *vi + one_b2 * gi * gi;
                        let m_hat = *mi * c1;
                        let v_hat = *vi * c2;
                        *pi -= lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
