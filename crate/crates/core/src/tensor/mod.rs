//! Dense row-major `f64` arrays with a tape-based reverse-mode differentiator.
//!
//! Values live in [`TensorValue`]; trainable values are registered by name in a
//! [`ParameterStore`]. A [`Graph`] records one forward computation over a store
//! and [`Graph::backward`] returns [`Gradients`] for every parameter and leaf
//! that requires them.

mod gradcheck;
mod graph;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Config(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(TensorValue {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        TensorValue {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        TensorValue {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = normal.sample(rng);
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: IndexMap<String, TensorValue>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: TensorValue) -> Result<usize> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let (idx, _) = self
            .params
            .insert_full(name, value.with_requires_grad(true));
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Option<&TensorValue> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut TensorValue> {
        self.params.get_mut(name)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &TensorValue) {
        let (k, v) = self.params.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> (&str, &mut TensorValue) {
        let (k, v) = self.params.get_index_mut(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorValue)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(TensorValue::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.zero_grad();
        }
    }

    /// Adds every parameter gradient in `grads` into the stored `grad` buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (idx, g) in grads.param_grads() {
            self.params[idx].accumulate_grad(g);
        }
    }

    /// Copies all parameters of `other` whose names start with `prefix`.
    pub fn extend_from(&mut self, other: &ParameterStore, prefix: &str) -> Result<()> {
        for (name, value) in other.iter() {
            if name.starts_with(prefix) {
                self.insert(name, value.clone())?;
            }
        }
        Ok(())
    }
}
