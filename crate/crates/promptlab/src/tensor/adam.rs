//! Adam with bias correction, operating on a fixed-order parameter set.

use super::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: per-parameter first/second moments plus a step counter.
///
/// Moment slots are matched to parameters by position, so the caller must
/// present the same parameter list in the same order on every step.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// Applies one bias-corrected update to every parameter, then clears
    /// the gradients. Every parameter must have a populated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), TensorError> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect();
        }
        for (i, p) in params.iter().enumerate() {
            match p.grad() {
                None => return Err(TensorError::UninitializedGradient { index: i }),
                Some(g) if g.len() != p.len() => {
                    return Err(TensorError::UninitializedGradient { index: i })
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let grad = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
            p.clear_grad();
        }
        Ok(())
    }
}
