//! Adam with bias correction.

use crate::param::{GradBuffer, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Moment accumulators for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.step += 1;
        let c = self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let precision = store.precision();
        for (((param, g), m), v) in store
            .values_mut()
            .zip(grads.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &gi), mi), vi) in param.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = precision.round(*p - c.lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Precision, Tensor};

    fn store_with(values: &[f64]) -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new(Precision::F64);
        let id = s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = store_with(&[0.5, -1.0]);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let g = GradBuffer::zeros_like(&store);
        adam.step(&mut store, &g);
        assert_eq!(store.get(id).data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g² after one bias-corrected step, so |Δ| = lr·|g|/(|g|+ε).
        let (mut store, id) = store_with(&[1.0, 1.0]);
        let lr = 0.01;
        let mut adam = Adam::new(&store, AdamConfig::with_lr(lr));
        let mut g = GradBuffer::zeros_like(&store);
        g.get_mut(id).data_mut().copy_from_slice(&[3.0, -0.2]);
        adam.step(&mut store, &g);
        let d = store.get(id).data();
        let want0 = 1.0 - lr * 3.0 / (3.0 + 1e-8);
        let want1 = 1.0 + lr * 0.2 / (0.2 + 1e-8);
        assert!((d[0] - want0).abs() < 1e-15);
        assert!((d[1] - want1).abs() < 1e-15);
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let (mut store, id) = store_with(&[0.1, 0.2, 0.3]);
            let mut adam = Adam::new(&store, AdamConfig::default());
            for k in 0..20 {
                let mut g = GradBuffer::zeros_like(&store);
                for (i, v) in g.get_mut(id).data_mut().iter_mut().enumerate() {
                    *v = ((k * 3 + i) as f64).sin();
                }
                adam.step(&mut store, &g);
            }
            store.get(id).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
