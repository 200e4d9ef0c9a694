//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: each step scales parameters by `1 − lr·weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for ((p, m), v) in store.params_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                *w = *w * decay - c.lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = store();
        let before = s.values();
        s.accumulate_grad(s.id("w").unwrap(), &Tensor::filled(1, 3, 3.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.0,
            weight_decay: 5e-3,
            ..AdamConfig::default()
        });
        for _ in 0..10 {
            opt.step(&mut s);
        }
        assert_eq!(s.values(), before);
    }

    #[test]
    fn decay_shrinks_norm_without_gradient() {
        let mut s = store();
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 5e-3,
            ..AdamConfig::default()
        });
        let mut prev = s.norm();
        for _ in 0..5 {
            opt.step(&mut s);
            assert!(s.norm() < prev);
            prev = s.norm();
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.accumulate_grad(id, &Tensor::from_vec(1, 3, vec![2.0, -0.1, 0.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s);
        let w = s.value(id).data();
        assert!((w[0] - 0.99).abs() < 1e-9);
        assert!((w[1] + 1.99).abs() < 1e-9);
        assert_eq!(w[2], 0.5);
    }
}
