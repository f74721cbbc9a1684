//! Adam with bias correction. One state per parameter tensor.

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(numel: usize, lr: f64) -> AdamState {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: vec![0.0; numel],
            v: vec![0.0; numel],
        }
    }

    /// Apply one update in place. A zero gradient still advances the moment
    /// estimates toward zero, which leaves a zero-initialized state (and the
    /// parameter) unchanged.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.numel(), self.m.len(), "adam state size");
        assert_eq!(grad.numel(), self.m.len(), "adam gradient size");
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..self.m.len() {
            let g = grad.data[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            param.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
