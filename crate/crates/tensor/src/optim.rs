//! First-order optimizers over [`Var`] parameters.

use std::collections::HashMap;

use crate::Var;

/// Adam with bias correction. Moment buffers are keyed by parameter name so
/// they can be checkpointed and restored independently of construction order.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &[(String, Var)]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        for (name, var) in params {
            let n = var.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut tensor = var.value_mut();
            let grad = tensor
                .grad()
                .expect("trainable vars carry grad buffers")
                .to_vec();
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
            drop(tensor);
            var.zero_grad();
        }
    }

    /// Moment buffers in a stable parameter order, for checkpointing.
    pub fn export_moments(&self, order: &[(String, Var)]) -> Vec<(String, Vec<f32>, Vec<f32>)> {
        order
            .iter()
            .filter_map(|(name, _)| {
                self.moments
                    .get(name)
                    .map(|(m, v)| (name.clone(), m.clone(), v.clone()))
            })
            .collect()
    }

    pub fn restore_moments(&mut self, step: u64, moments: Vec<(String, Vec<f32>, Vec<f32>)>) {
        self.step = step;
        self.moments = moments
            .into_iter()
            .map(|(name, m, v)| (name, (m, v)))
            .collect();
    }
}
