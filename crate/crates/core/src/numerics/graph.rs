//! Taped reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with a
//! closure that maps the output gradient to input gradients. Parameters are
//! read from a borrowed [`ParamStore`]; the store itself is only mutated
//! after the graph is dropped, by applying the returned [`Gradients`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{BufferId, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

type BackwardFn<'p, T> = Box<dyn Fn(&[T], &mut GradSink<T>) + 'p>;

struct Node<'p, T> {
    value: Rc<Tensor<T>>,
    backward: Option<BackwardFn<'p, T>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Float> {
    store: &'p ParamStore<T>,
    mode: Mode,
    nodes: RefCell<Vec<Node<'p, T>>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    buffer_updates: RefCell<Vec<(BufferId, Tensor<T>)>>,
}

/// Accumulates input gradients during the backward sweep.
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    needs: Vec<bool>,
    sizes: Vec<usize>,
}

impl<T: Float> GradSink<T> {
    pub fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Adds `g` into the gradient of `v`.
    pub fn add(&mut self, v: Var, g: &[T]) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => super::float::add_into(buf, g),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn add_owned(&mut self, v: Var, g: Vec<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => super::float::add_into(buf, &g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gives mutable access to the (zero-initialized) gradient of `v`.
    /// Skipped entirely when `v` does not need a gradient.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.needs[v.0] {
            return;
        }
        let n = self.sizes[v.0];
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<(ParamId, Tensor<T>)>,
    vars: HashMap<Var, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    /// Gradient for a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(&v)
    }

    /// Sums another set of gradients into this one, in a fixed order.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, t) in other.params {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, mine)) => super::float::add_into(mine.data_mut(), t.data()),
                None => self.params.push((id, t)),
            }
        }
        self.params.sort_by_key(|(id, _)| *id);
    }
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant leaf (no gradient).
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false, None)
    }

    /// Differentiable leaf that is not a parameter; its gradient is
    /// reported through [`Gradients::wrt`].
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true, None)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow().get(&id) {
            return *v;
        }
        let v = self.push_leaf(self.store.param(id).value.clone(), true, Some(id));
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &'p Tensor<T> {
        &self.store.buffer(id).value
    }

    pub fn record_buffer_update(&self, id: BufferId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(BufferId, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    fn push_leaf(&self, t: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(t), backward: None, param, needs_grad });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Records a new node computed from `inputs`. `backward` receives the
    /// output gradient and pushes input gradients into the sink. Rejects
    /// non-finite outputs.
    pub fn custom(
        &self,
        name: &str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&[T], &mut GradSink<T>) + 'p,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "`{}` produced a non-finite value (output shape {:?})",
                name,
                value.shape()
            )));
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].needs_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            backward: if needs_grad { Some(Box::new(backward)) } else { None },
            param: None,
            needs_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            needs: nodes[..n].iter().map(|nd| nd.needs_grad).collect(),
            sizes: nodes[..n].iter().map(|nd| nd.value.numel()).collect(),
        };
        sink.add(loss, &[T::one()]);
        for i in (0..n).rev() {
            let node = &nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(g) = sink.grads[i].take() else { continue };
            back(&g, &mut sink);
        }
        let mut params = Vec::new();
        let mut vars = HashMap::new();
        for (i, node) in nodes[..n].iter().enumerate() {
            if node.backward.is_some() || !node.needs_grad {
                continue;
            }
            let g = sink.grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            let t = Tensor::from_parts(node.value.shape().to_vec(), g);
            match node.param {
                Some(id) => params.push((id, t)),
                None => {
                    vars.insert(Var(i), t);
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { params, vars })
    }
}
