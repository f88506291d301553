use crate::error::{config_err, Result};
use crate::numerics::ParameterVector;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return config_err(format!("invalid Adam hyperparameters {self:?}"));
        }
        Ok(())
    }
}

/// First/second moment accumulators with bias-corrected updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParameterVector,
    pub v: ParameterVector,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParameterVector) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step_count: 0,
        }
    }

    /// Applies one Adam update to `params` in place.
    pub fn step(&mut self, params: &mut ParameterVector, grads: &ParameterVector) -> Result<()> {
        params.expect_same_layout(grads)?;
        params.expect_same_layout(&self.m)?;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let m_iter = self.m.values_mut();
        let v_iter = self.v.values_mut();
        for (((p, &g), m), v) in params.values_mut().zip(grads.flat().iter()).zip(m_iter).zip(v_iter) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
