//! Trainable parameters and the decoupled-weight-decay adaptive optimizer.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor2;

/// A trainable tensor with its gradient accumulator and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Tensor2,
    pub gradient: Tensor2,
    pub moment1: Tensor2,
    pub moment2: Tensor2,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(value: Tensor2) -> Self {
        let (r, c) = value.shape();
        Parameter {
            value,
            gradient: Tensor2::zeros(r, c),
            moment1: Tensor2::zeros(r, c),
            moment2: Tensor2::zeros(r, c),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.gradient.fill(0.0);
    }

    pub fn accumulate(&mut self, grad: &Tensor2) {
        self.gradient.add_assign_scaled(grad, 1.0);
    }
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    /// One optimizer step: bias-corrected moment update plus decoupled weight
    /// decay. Gradients are zeroed afterwards.
    pub fn step(&self, params: &mut [&mut Parameter]) {
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            for i in 0..p.value.len() {
                let g = p.gradient.data()[i];
                let m = self.beta1 * p.moment1.data()[i] + (1.0 - self.beta1) * g;
                let v = self.beta2 * p.moment2.data()[i] + (1.0 - self.beta2) * g * g;
                p.moment1.data_mut()[i] = m;
                p.moment2.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let w = p.value.data()[i];
                p.value.data_mut()[i] =
                    w - self.lr * self.weight_decay * w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
    }
}
