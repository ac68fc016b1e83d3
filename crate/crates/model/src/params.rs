use std::collections::BTreeMap;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// Named tensors with paired gradient buffers, iterated in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: IndexMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> Result<ParamId, ModelError> {
        if self.index.contains_key(name) {
            return Err(ModelError::DuplicateParameter(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let grad = Array2::zeros(value.raw_dim());
        self.params.push(Parameter { name: name.to_string(), value, grad });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale * g` into the gradient buffers.
    pub fn accumulate(&mut self, g: &Gradients, scale: f64) {
        for (id, grad) in &g.by_param {
            self.params[id.0].grad.scaled_add(scale, grad);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Sparse per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub by_param: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    pub fn add_into(&mut self, id: ParamId, g: &Array2<f64>) {
        match self.by_param.get_mut(&id) {
            Some(acc) => *acc += g,
            None => {
                self.by_param.insert(id, g.clone());
            }
        }
    }

    /// `self += scale * other`.
    pub fn merge_scaled(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in &other.by_param {
            match self.by_param.get_mut(id) {
                Some(acc) => acc.scaled_add(scale, g),
                None => {
                    self.by_param.insert(*id, g * scale);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.values_mut() {
            *g *= s;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.by_param.get(&id)
    }

    /// Flattens into a dense vector laid out like the store.
    pub fn flatten(&self, store: &ParameterStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for (id, p) in store.iter() {
            match self.by_param.get(&id) {
                Some(g) => out.extend(g.iter()),
                None => out.extend(std::iter::repeat_n(0.0, p.value.len())),
            }
        }
        out
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn truncated_normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}
