use std::borrow::Cow;
use std::collections::HashMap;

use super::ops::Op;
use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::param::Param;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<'a, T: Element> {
    pub(crate) value: Cow<'a, Tensor<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
    pub(crate) param: Option<usize>,
}

/// A single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward is one reverse sweep. The tape is not
/// `Sync`-shared: drive it from one thread.
pub struct Graph<'a, T: Element> {
    pub(crate) nodes: Vec<Node<'a, T>>,
    bound: HashMap<usize, Var>,
    released: bool,
}

impl<'a, T: Element> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Element> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            released: false,
        }
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a model parameter as a borrowed, gradient-requiring leaf.
    /// Binding the same parameter twice returns the same handle.
    pub fn param(&mut self, p: &'a Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&p.key()) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            requires_grad: true,
            op: Op::Leaf,
            param: Some(p.key()),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(p.key(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar loss and releases the tape's saved state.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.released {
            return Err(Error::Usage("backward called on a released tape".into()));
        }
        let loss_shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {loss_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            node.op.backward(&self.nodes, &node.value, &g, &mut grads);
        }

        let mut leaf_grads = HashMap::new();
        let mut param_grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                let t = Tensor::from_parts(node.value.shape().to_vec(), data);
                if let Some(key) = node.param {
                    param_grads.insert(key, t.clone());
                }
                leaf_grads.insert(i, t);
            }
        }

        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Released;
            }
        }
        self.released = true;
        Ok(Gradients {
            leaves: leaf_grads,
            params: param_grads,
        })
    }
}

/// Gradients of every gradient-requiring leaf, produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Gradient for the parameter with the given key, if it was bound.
    pub fn param(&self, key: usize) -> Option<&Tensor<T>> {
        self.params.get(&key)
    }

    pub fn take_param(&mut self, key: usize) -> Option<Tensor<T>> {
        self.params.remove(&key)
    }
}

/// Adds `f(i)` into the gradient buffer of `v`, allocating it on first use.
pub(crate) fn grad_buf<'g, T: Element>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<'_, T>],
    v: Var,
) -> Option<&'g mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}
