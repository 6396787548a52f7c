//! Adam parameter updates with bias correction.

use super::Tensor;
use crate::error::{contract, Result};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Per-parameter Adam state. Moments start at zero; `step_count`
/// advances by exactly one per update.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(param_len: usize, lr: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one Adam update to `param` in place from its accumulated
    /// gradient. Zeroing the gradient afterwards is the caller's contract.
    pub fn step(&mut self, param: &Tensor) -> Result<()> {
        let grad = param
            .grad()
            .ok_or_else(|| crate::error::Error::contract("adam_step: parameter has no gradient"))?;
        contract!(
            grad.len() == self.first_moment.len(),
            "adam_step: state sized for {} values, parameter has {}",
            self.first_moment.len(),
            grad.len()
        );
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let mut values = param.to_vec();
        for i in 0..grad.len() {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        param.set_data(&values)
    }
}
