use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a registered parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Constant(f64),
}

/// Named parameter tensors in registration order, each with a gradient
/// buffer of the same shape.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "SavedParams", into = "SavedParams")]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let values = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
                Matrix::from_vec(rows, cols, values)?
            }
            Init::Constant(v) => Matrix::filled(rows, cols, v),
        };
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.grads.push(Matrix::zeros(value.rows(), value.cols()));
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.values_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.grads[id.0].add_assign(g);
        }
    }

    /// L2 norm over every gradient buffer.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Matrix::squared_norm).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.scale_assign(factor);
        }
    }

    /// Mutable access to a value together with its gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Matrix, &Matrix) {
        (&mut self.values[id.0], &self.grads[id.0])
    }
}

/// Per-parameter gradients produced by one backward pass. Parameters that
/// did not take part in the computation have no entry.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    slots: Vec<Option<Matrix>>,
}

impl Gradients {
    pub(crate) fn with_capacity(n: usize) -> Self {
        Gradients { slots: vec![None; n] }
    }

    pub(crate) fn add(&mut self, id: ParamId, g: Matrix) {
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Gradient of one scalar coordinate (zero when absent).
    pub fn coordinate(&self, id: ParamId, flat: usize) -> f64 {
        self.get(id).map_or(0.0, |g| g.values()[flat])
    }
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    value: Matrix,
}

#[derive(Serialize, Deserialize)]
struct SavedParams(Vec<SavedParam>);

impl From<ParameterStore> for SavedParams {
    fn from(store: ParameterStore) -> Self {
        SavedParams(
            store
                .names
                .into_iter()
                .zip(store.values)
                .map(|(name, value)| SavedParam { name, value })
                .collect(),
        )
    }
}

impl From<SavedParams> for ParameterStore {
    fn from(saved: SavedParams) -> Self {
        let mut store = ParameterStore::new();
        for p in saved.0 {
            // duplicates cannot come out of a store we wrote ourselves
            let _ = store.insert(&p.name, p.value);
        }
        store
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn fan_in_init_stays_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParameterStore::new();
        let id = store.register("w", 16, 4, Init::FanIn(16), &mut rng).unwrap();
        assert!(store.value(id).values().iter().all(|v| v.abs() <= 0.25));
        assert_eq!(store.grad(id).shape(), (16, 4));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store.insert("a", Matrix::zeros(1, 1)).unwrap();
        assert!(matches!(store.insert("a", Matrix::zeros(1, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn serde_preserves_order_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParameterStore::new();
        store.register("z", 2, 3, Init::FanIn(2), &mut rng).unwrap();
        store.register("a", 1, 3, Init::FanIn(5), &mut rng).unwrap();
        let json = serde_json::to_string(&store).unwrap();
        let back: ParameterStore = serde_json::from_str(&json).unwrap();
        assert_eq!(back.name(ParamId(0)), "z");
        assert_eq!(back.id("a"), Some(ParamId(1)));
        for id in store.ids() {
            assert_eq!(store.value(id), back.value(id));
        }
    }
}
