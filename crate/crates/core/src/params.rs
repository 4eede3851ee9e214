//! Named parameter storage. Modules hold [`ParamId`] handles into a single
//! [`ParamStore`], so two modules referring to the same id share storage.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer treats a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Matrices: decayed, base learning rate.
    Weight,
    /// Biases, norms, embeddings, temperature: base learning rate, no decay.
    NoDecay,
    /// Temporal scaling bank: scaled learning rate, no decay.
    Scaling,
}

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    groups: Vec<ParamGroup>,
    index: HashMap<String, ParamId>,
}

impl<F: Float> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            groups: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a new tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.groups.push(group);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<F>> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<F>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                detail: format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    tensor.shape(),
                    self.tensors[id.0].shape()
                ),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Convert every tensor to another precision, keeping names and ids.
    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            groups: self.groups.clone(),
            index: self.index.clone(),
        }
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal_tensor<F: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("sized by shape")
}
