//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::nn::params::ParamStore;
use crate::nn::tape::Mat;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64, grad_clip: Option<f64>) -> AdamW {
        let m = store.ids().map(|id| Mat::zeros(store.value(id).dim())).collect();
        let v = store.ids().map(|id| Mat::zeros(store.value(id).dim())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients currently in the store.
    pub fn step(&mut self, store: &mut ParamStore) {
        if let Some(clip) = self.grad_clip {
            let norm = store.grad_norm();
            if norm > clip {
                store.scale_grads(clip / norm);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids() {
            let idx = id.0;
            let grad = store.grad(id).clone();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(&grad, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(&grad, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let decay = if store.no_decay(id) { 0.0 } else { self.weight_decay };
            let lr = self.lr;
            let eps = self.eps;
            let value = store.value_mut(id);
            for ((val, mi), vi) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *val -= lr * (mhat / (vhat.sqrt() + eps) + decay * *val);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{zeros, ParamStore};

    #[test]
    fn quadratic_converges_to_minimum() {
        // minimize (x - 3)^2 elementwise
        let mut store = ParamStore::new();
        let id = store.register("x", zeros(1, 1), true);
        let mut opt = AdamW::new(&store, 0.1, 0.0, None);
        for _ in 0..500 {
            store.zero_grads();
            let x = store.value(id)[(0, 0)];
            store.accumulate_grad(id, &Mat::from_elem((1, 1), 2.0 * (x - 3.0)));
            opt.step(&mut store);
        }
        assert!((store.value(id)[(0, 0)] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn grad_clip_bounds_the_update() {
        let mut store = ParamStore::new();
        let id = store.register("x", zeros(1, 1), true);
        let mut opt = AdamW::new(&store, 1.0, 0.0, Some(0.5));
        store.accumulate_grad(id, &Mat::from_elem((1, 1), 1e9));
        opt.step(&mut store);
        // after clipping, m/v are built from a 0.5-norm gradient; the very
        // first Adam step has magnitude ~lr regardless, but must be finite
        assert!(store.value(id)[(0, 0)].is_finite());
        assert_eq!(store.grad(id)[(0, 0)], 0.5);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::from_elem((1, 1), 1.0), false);
        let mut opt = AdamW::new(&store, 0.01, 0.1, None);
        for _ in 0..10 {
            store.zero_grads();
            opt.step(&mut store);
        }
        let w = store.value(id)[(0, 0)];
        assert!(w < 1.0 && w > 0.98, "w = {w}");
    }
}
