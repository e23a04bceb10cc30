//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, _, p)| {
                p.trainable
                    .then(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            })
            .collect();
        Self {
            cfg,
            step: 0,
            moments,
        }
    }

    /// Applies one update from each parameter's `grad` buffer. Non-trainable
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some((m, v)) = self.moments.get_mut(id.index()).and_then(|m| m.as_mut()) else {
                continue;
            };
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let vhat = *vi / bc2;
                value[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * value[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row_vector(vec![1.0, 2.0]).unwrap(), true);
        let b = store.add("b", Tensor::row_vector(vec![3.0, 4.0]).unwrap(), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        for id in [a, b] {
            store.get_mut(id).grad = Tensor::row_vector(vec![0.5, -0.5]).unwrap();
        }
        let before = store.value(b).clone();
        for _ in 0..10 {
            opt.step(&mut store);
        }
        assert_eq!(store.value(b).data(), before.data());
        assert!(store.value(a).data()[0] < 1.0);
        assert!(store.value(a).data()[1] > 2.0 - 1e-9);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(0.0), true);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        store.get_mut(a).grad = Tensor::scalar(4.0);
        opt.step(&mut store);
        assert!((store.value(a).data()[0] + 1e-3).abs() < 1e-9);
    }
}
