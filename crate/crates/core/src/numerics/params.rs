use std::collections::HashMap;

use super::{Float, Tensor};
use crate::error::{config_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Registry of every parameter and buffer in a model, keyed by a unique
/// hierarchical name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    index: HashMap<String, Entry>,
}

#[derive(Clone, Copy, Debug)]
enum Entry {
    Param(usize),
    Buffer(usize),
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err!("duplicate parameter name `{}`", name));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), Entry::Param(id));
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config_err!("duplicate buffer name `{}`", name));
        }
        let id = self.buffers.len();
        self.index.insert(name.clone(), Entry::Buffer(id));
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(id))
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Buffer<T> {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.index.get(name) {
            Some(Entry::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.index.get(name) {
            Some(Entry::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a backward pass's gradients into each parameter's `grad`.
    /// Repeated calls accumulate until [`zero_grad`](Self::zero_grad).
    pub fn accumulate(&mut self, grads: &super::Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            super::float::add_into(p.grad.data_mut(), g.data());
        }
    }

    /// Applies running-statistic updates recorded during a training forward.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(BufferId, Tensor<T>)>) {
        for (id, v) in updates {
            self.buffers[id.0].value = v;
        }
    }

    /// Replaces a parameter value, checking the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }
}

/// Builds hierarchical names: `Scope::new("enc").child("stage2").name("w")`.
#[derive(Clone, Debug)]
pub struct Scope(String);

impl Scope {
    pub fn new(root: &str) -> Self {
        Scope(root.to_string())
    }

    pub fn child(&self, part: impl std::fmt::Display) -> Self {
        if self.0.is_empty() {
            Scope(part.to_string())
        } else {
            Scope(format!("{}.{}", self.0, part))
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        self.child(leaf).0
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}
