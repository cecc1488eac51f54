use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
///
/// Moment buffers are sized on construction; every `step` must receive
/// the same parameter list in the same order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u32,
}

impl Adam {
    pub fn new<'t>(config: AdamConfig, params: impl IntoIterator<Item = &'t Tensor>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", config.lr)));
        }
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Ok(Self {
            config,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.first[i].len() || g.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "tensor {i}: optimizer state {} vs param {} vs grad {}",
                    self.first[i].len(),
                    p.numel(),
                    g.len()
                )));
            }
        }
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
