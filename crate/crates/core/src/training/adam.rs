use crate::autodiff::Tensor;
use crate::models::ParamSet;

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<(), TrainError> {
        if grads.len() != self.m.len() {
            return Err(TrainError::InvalidConfig(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        if let Some((p, g)) = params.tensors().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
            return Err(TrainError::InvalidConfig(format!(
                "gradient shape {:?} for parameter of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let m = m.data_mut();
            let v = v.data_mut();
            for (k, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
