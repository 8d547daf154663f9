//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::{Error, Result};
use crate::net::{GradientBuffer, ParamVector, VelocityNet};

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    /// Toy default: lr 1e-3; weight decay 0.
    pub fn new(n_params: usize, lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected adaptive-moment update over flat parameters.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                format!("{}", self.m.len()),
                format!("{}/{}", params.len(), grads.len()),
                "opt_step",
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient {g} at parameter {i}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }

    /// Update a network in place from a gradient buffer.
    pub fn step_net(&mut self, net: &mut VelocityNet, grads: &GradientBuffer) -> Result<()> {
        let mut p = net.flat_params();
        self.step_flat(&mut p, &grads.to_flat())?;
        net.set_flat_params(&p);
        Ok(())
    }
}
