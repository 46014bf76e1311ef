//! Named trainable tensors, their tape bindings, and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Grads, Tape, Var};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Flat storage of named trainable tensors. Names are unique; insertion
/// order is fixed so every walk over the store is deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with the given standard deviation.
    pub fn insert_randn(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            // Box-Muller keeps us off rand_distr for one distribution.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            std * (-2.0 * u1.ln()).sqrt() * u2.cos()
        });
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, ArrayD::from_elem(IxDyn(shape), value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Iterate `(name, value)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }
}

/// Per-step association between parameters and tape leaves.
///
/// Binding the same parameter twice returns the same [`Var`], so gradient
/// contributions from every use site accumulate on one node.
pub struct TapeBinding {
    vars: Vec<Option<Var>>,
}

impl TapeBinding {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    pub fn bind(&mut self, tape: &Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = tape.leaf(store.get(id).clone());
        self.vars[id.0] = Some(v);
        v
    }

    /// Collect `(param, gradient)` pairs for every bound parameter.
    pub fn gradients(&self, store: &ParamStore, grads: &Grads) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out = Vec::new();
        for (i, slot) in self.vars.iter().enumerate() {
            if let Some(var) = slot {
                let id = ParamId(i);
                out.push((id, grads.get_or_zeros(*var, store.get(id).shape())));
            }
        }
        out
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
            v: store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &mut [(ParamId, ArrayD<f64>)],
        clip_norm: f64,
    ) {
        let mut sq_norm = 0.0;
        for (_, g) in grads.iter() {
            sq_norm += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        if clip_norm > 0.0 && norm > clip_norm {
            let scale = clip_norm / norm;
            for (_, g) in grads.iter_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);
            let p = store.get_mut(*id);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mh = mi / bc1;
                    let vh = vi / bc2;
                    *pi -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }

    /// Moment tensors in parameter order, for checkpointing.
    pub fn state(&self) -> (&[ArrayD<f64>], &[ArrayD<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state size mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state size mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn binding_dedupes_repeated_use() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let w = store.insert_randn("w", &[2, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let mut binding = TapeBinding::new(&store);
        let v1 = binding.bind(&tape, &store, w);
        let v2 = binding.bind(&tape, &store, w);
        assert_eq!(v1, v2);
        // Used twice: gradients from both sites must accumulate.
        let y = tape.add(v1, v2);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        let pairs = binding.gradients(&store, &grads);
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].1.iter().all(|&g| g == 2.0));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.insert("x", ArrayD::from_elem(IxDyn(&[1]), 5.0));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let g = store.get(x).clone() * 2.0;
            let mut grads = vec![(x, g)];
            adam.step(&mut store, &mut grads, 0.0);
        }
        assert!(store.get(x)[0].abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let mut store = ParamStore::new();
        let x = store.insert("x", ArrayD::from_elem(IxDyn(&[4]), 0.0));
        let mut adam = Adam::new(&store, 1.0);
        let g = ArrayD::from_elem(IxDyn(&[4]), 100.0);
        let mut grads = vec![(x, g)];
        adam.step(&mut store, &mut grads, 1.0);
        let gnorm = grads[0].1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((gnorm - 1.0).abs() < 1e-12);
    }
}
