//! Bias-corrected Adam. Moments are kept in 64-bit regardless of the
//! parameter type.

use crate::scalar::Scalar;

use super::model::Param;
use super::NnError;

pub const DEFAULT_LR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    /// One update over `params` using their accumulated gradients. Frozen
    /// parameters keep their moments untouched.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>]) -> Result<(), NnError> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments { name: p.name.clone(), m: vec![0.0; p.value.len()], v: vec![0.0; p.value.len()] })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} parameters, model has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (mom, p) in self.moments.iter().zip(params.iter()) {
            if mom.name != p.name || mom.m.len() != p.value.len() {
                return Err(NnError::Shape(format!(
                    "optimizer state for '{}' does not match parameter '{}'",
                    mom.name, p.name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - self.beta1.powi(t);
        let corr2 = 1.0 - self.beta2.powi(t);
        for (mom, p) in self.moments.iter_mut().zip(params.iter_mut()) {
            let Some(grad) = p.value.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let g = grad[i].as_f64();
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = mom.m[i] / corr1;
                let v_hat = mom.v[i] / corr2;
                let updated = data[i].as_f64() - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                data[i] = T::from_f64_lossy(updated);
            }
        }
        Ok(())
    }
}

/// Convenience wrapper matching the free-function form.
pub fn adam_step<T: Scalar>(params: &mut [&mut Param<T>], state: &mut AdamState) -> Result<(), NnError> {
    state.step(params)
}
