//! Adam optimizer over the parameter store.
//!
//! Updates only trainable entries, asserts frozen entries never carry
//! gradients, and keeps its moment buffers keyed by name so a step is
//! deterministic regardless of how gradients were produced.

use std::collections::BTreeMap;

use crate::num::Scalar;
use crate::tensor::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients in the store, then clears
    /// them. Panics if a frozen parameter carries a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        store.assert_frozen_clean();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let lr = T::from_f64(self.cfg.lr);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(self.cfg.eps);
        for (name, param) in store.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(grad) = param.grad.take() else {
                continue;
            };
            let n = grad.len();
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| vec![T::ZERO; n]);
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| vec![T::ZERO; n]);
            let data = param.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
