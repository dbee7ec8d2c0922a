use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bias-corrected Adam with 64-bit moments stored per named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update steps.
    pub t: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Starts a new update step; call once before the `update`s of that step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update<T: Scalar>(&mut self, name: &str, param: &mut [T], grad: &[T]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape(
                "adam",
                format!("{name}: {} values but {} gradients", param.len(), grad.len()),
            ));
        }
        if self.t == 0 {
            return Err(Error::Invalid("adam update before the first tick".into()));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        if m.len() != param.len() {
            return Err(Error::shape(
                "adam",
                format!("{name}: stored moments have {} values, parameter has {}", m.len(), param.len()),
            ));
        }
        for i in 0..param.len() {
            let g = grad[i].as_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            param[i] = T::of(param[i].as_f64() - step);
        }
        Ok(())
    }

    pub fn update_scalar(&mut self, name: &str, param: &mut f64, grad: f64) -> Result<()> {
        self.update(name, std::slice::from_mut(param), &[grad])
    }
}
