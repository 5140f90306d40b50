//! Persistent named parameter storage.
//!
//! Parameters live outside any graph; each forward pass stages them into the
//! tape as gradient-tracking leaves (see [`Graph::param`]). Registration
//! order is the canonical iteration order everywhere (optimizer, checkpoints,
//! accounting), so runs are reproducible regardless of hash seeds.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{McdError, Result};
use crate::scalar::Scalar;
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<S> {
    pub name: String,
    pub data: Vec<S>,
    pub shape: Vec<usize>,
    /// Whether weight decay applies (false for norms, biases and state
    /// parameters like A_log / D).
    pub decay: bool,
}

pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        data: Vec<S>,
        shape: &[usize],
        decay: bool,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "parameter {name} data does not match shape {shape:?}"
        );
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            data,
            shape: shape.to_vec(),
            decay,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<S> {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Overwrite a parameter's payload, e.g. when loading a checkpoint.
    pub fn set_data(&mut self, id: ParamId, data: Vec<S>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if data.len() != entry.data.len() {
            return Err(McdError::ShapeMismatch {
                context: format!("set_data on {}", entry.name),
                expected: entry.shape.clone(),
                got: vec![data.len()],
            });
        }
        entry.data = data;
        Ok(())
    }

    /// Gradients for every parameter staged in `graph`, in id order.
    /// Parameters that did not participate get `None`.
    pub fn collect_grads(&self, graph: &Graph<S>) -> Vec<Option<Vec<S>>> {
        self.ids()
            .map(|id| {
                graph
                    .staged_param(id)
                    .and_then(|t| graph.grad(t).map(|g| g.to_vec()))
            })
            .collect()
    }
}

/// Uniform init in [-bound, bound] with bound = 1/sqrt(fan_in), the usual
/// default for linear and convolution weights.
pub fn uniform_fan_in<S: Scalar>(
    rng: &mut ChaCha20Rng,
    fan_in: usize,
    count: usize,
) -> Vec<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..count)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

pub fn zeros<S: Scalar>(count: usize) -> Vec<S> {
    vec![S::zero(); count]
}

pub fn ones<S: Scalar>(count: usize) -> Vec<S> {
    vec![S::one(); count]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn staging_twice_returns_same_node() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("w", vec![1.0, 2.0], &[2], true);
        let mut g = Graph::new();
        let t1 = g.param(&store, id);
        let t2 = g.param(&store, id);
        assert_eq!(t1, t2);
    }

    #[test]
    fn shared_param_grads_sum_across_uses() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.register("w", vec![3.0], &[1], true);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let a = g.mul(w, w).unwrap(); // w^2, d/dw = 6
        let b = g.add(w, a).unwrap(); // + w, d/dw = 1
        g.backward(b).unwrap();
        let grads = store.collect_grads(&g);
        assert_eq!(grads[0].as_ref().unwrap(), &vec![7.0]);
    }

    #[test]
    fn fan_in_init_is_deterministic() {
        let mut r1 = ChaCha20Rng::seed_from_u64(9);
        let mut r2 = ChaCha20Rng::seed_from_u64(9);
        let a: Vec<f32> = uniform_fan_in(&mut r1, 16, 8);
        let b: Vec<f32> = uniform_fan_in(&mut r2, 16, 8);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 0.25));
    }
}
