use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name, so the
/// update does not depend on registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_real(c.beta1), T::from_real(c.beta2));
        let lr = T::from_real(c.lr);
        let eps = T::from_real(c.eps);
        let bc1 = T::one() - T::from_real(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::from_real(c.beta2.powi(self.t as i32));

        for p in store.iter_mut() {
            let n = p.value.len();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let grads = p.grad.data();
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[k];
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::vector(vec![0.3, -1.2])).unwrap();
        let before = store.clone();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store);
        adam.step(&mut store);
        assert_eq!(store, before);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps)
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::vector(vec![0.0])).unwrap();
        store.get_mut(id).grad.fill(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.001));
        adam.step(&mut store);
        let w = store.value(id).data()[0];
        assert!((w + 0.001 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn registration_order_does_not_matter() {
        let mut a = ParamStore::<f64>::new();
        let a1 = a.add("x", Tensor::vector(vec![1.0])).unwrap();
        let a2 = a.add("y", Tensor::vector(vec![2.0, 3.0])).unwrap();
        let mut b = ParamStore::<f64>::new();
        let b2 = b.add("y", Tensor::vector(vec![2.0, 3.0])).unwrap();
        let b1 = b.add("x", Tensor::vector(vec![1.0])).unwrap();
        let (mut oa, mut ob) = (Adam::new(AdamConfig::default()), Adam::new(AdamConfig::default()));
        for step in 0..5 {
            let g = [0.1 * step as f64, -0.5, 0.25 + step as f64];
            a.get_mut(a1).grad.data_mut()[0] = g[0];
            b.get_mut(b1).grad.data_mut()[0] = g[0];
            a.get_mut(a2).grad.data_mut().copy_from_slice(&g[1..]);
            b.get_mut(b2).grad.data_mut().copy_from_slice(&g[1..]);
            oa.step(&mut a);
            ob.step(&mut b);
        }
        assert_eq!(a.value(a1), b.value(b1));
        assert_eq!(a.value(a2), b.value(b2));
    }
}
