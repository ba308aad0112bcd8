//! Named Euclidean parameter tensors and the Adam optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::tape::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Uniform initialisation in `[-scale, scale]`.
pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..=scale))
}

/// Glorot-style uniform initialisation for a `fan_in x fan_out` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Mat {
    let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in, fan_out, scale)
}

/// Adam over every tensor in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient keep their moments.
    pub fn step<'g>(&mut self, store: &mut ParamStore, grads: impl IntoIterator<Item = (ParamId, &'g Mat)>) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (b1, b2) = (self.beta1, self.beta2);
            let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.m[id.0].as_ref().unwrap(), self.v[id.0].as_ref().unwrap());
            let (lr, eps) = (self.lr, self.eps);
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Array2::from_elem((1, 2), 1.0));
        let g = Array2::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.step(&mut store, [(id, &g)]);
        let v = store.value(id);
        assert!((v[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((v[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Array2::from_elem((1, 1), 5.0));
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let g = store.value(id) * 2.0;
            adam.step(&mut store, [(id, &g)]);
        }
        assert!(store.value(id)[[0, 0]].abs() < 1e-2);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Array2::zeros((1, 1)));
        store.insert("a", Array2::zeros((1, 1)));
    }
}
