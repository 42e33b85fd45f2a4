//! Named parameter store with gradient buffers and seeded initializers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::nn::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    value: Mat,
    grad: Mat,
    no_decay: bool,
}

/// Flat container for all trainable tensors of a model, keyed by
/// hierarchical names (`"denoiser.layer0.self_attn.wq"`).
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// `no_decay` exempts the tensor from weight decay (biases, norms, tables).
    pub fn register(&mut self, name: impl Into<String>, value: Mat, no_decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name:?}"
        );
        let grad = Mat::zeros(value.dim());
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Entry {
            name,
            value,
            grad,
            no_decay,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].grad
    }

    pub fn no_decay(&self, id: ParamId) -> bool {
        self.entries[id.0].no_decay
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Mat) {
        self.entries[id.0].grad += delta;
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in &mut self.entries {
            e.grad.mapv_inplace(|g| g * s);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Named snapshot of every tensor, sorted by name (checkpoint order).
    pub fn export(&self) -> Vec<(String, Mat)> {
        let mut out: Vec<(String, Mat)> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Load tensor values by name; every parameter must be present with the
    /// right shape.
    pub fn import(&mut self, tensors: &BTreeMap<String, Mat>) -> crate::Result<()> {
        for e in &mut self.entries {
            let incoming = tensors.get(&e.name).ok_or_else(|| {
                crate::CoreError::Validation(format!("checkpoint missing tensor {:?}", e.name))
            })?;
            if incoming.dim() != e.value.dim() {
                return Err(crate::CoreError::Validation(format!(
                    "tensor {:?}: shape {:?} in checkpoint, expected {:?}",
                    e.name,
                    incoming.dim(),
                    e.value.dim()
                )));
            }
            e.value = incoming.clone();
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Glorot/Xavier uniform init for weight matrices.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Small-normal init for embedding and positional tables.
pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    use rand_distr::Distribution;
    let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Mat {
    Mat::from_elem((rows, cols), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_get_and_grad_roundtrip() {
        let mut store = ParamStore::new();
        let id = store.register("w", zeros(2, 3), false);
        assert_eq!(store.name(id), "w");
        store.accumulate_grad(id, &Mat::from_elem((2, 3), 2.0));
        store.accumulate_grad(id, &Mat::from_elem((2, 3), 1.0));
        assert_eq!(store.grad(id)[(0, 0)], 3.0);
        store.zero_grads();
        assert_eq!(store.grad(id)[(0, 0)], 0.0);
    }

    #[test]
    fn import_rejects_missing_and_misshaped_tensors() {
        let mut store = ParamStore::new();
        store.register("a", zeros(2, 2), false);
        let mut tensors = BTreeMap::new();
        assert!(store.import(&tensors).is_err());
        tensors.insert("a".to_string(), zeros(3, 2));
        assert!(store.import(&tensors).is_err());
        tensors.insert("a".to_string(), ones(2, 2));
        store.import(&tensors).unwrap();
        let id = store.id("a").unwrap();
        assert_eq!(store.value(id)[(1, 1)], 1.0);
    }
}
