//! Reverse-mode differentiation record.
//!
//! A [`Graph`] is an append-only tape of tensor values. Every forward op
//! pushes one node holding its output and the op that produced it; backward
//! walks the tape in strict reverse append order and accumulates gradients
//! additively into zero-initialized buffers.

use std::cell::RefCell;
use std::sync::Arc;

use crate::nn::{ParamId, ParamSet};
use crate::ops::Op;
use crate::tensor::{Result, Tensor, TensorError};

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub struct Graph {
    params: Vec<Arc<Tensor>>,
    param_nodes: RefCell<Vec<Option<usize>>>,
    pub(crate) nodes: RefCell<Vec<Node>>,
    track: bool,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A tracking graph with no bound parameters.
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            param_nodes: RefCell::new(Vec::new()),
            nodes: RefCell::new(Vec::new()),
            track: true,
        }
    }

    /// A tracking graph whose [`Graph::param`] leaves read from `params`.
    pub fn with_params(params: &ParamSet) -> Self {
        let values = params.shared_values();
        let n = values.len();
        Self {
            params: values,
            param_nodes: RefCell::new(vec![None; n]),
            nodes: RefCell::new(Vec::new()),
            track: true,
        }
    }

    /// Same as [`Graph::with_params`] but nothing is recorded for backward.
    pub fn inference(params: &ParamSet) -> Self {
        let mut g = Self::with_params(params);
        g.track = false;
        g
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Arc::new(value), Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.insert(Arc::new(value), Op::Leaf, requires_grad && self.track)
    }

    /// The leaf node for a bound parameter; created on first use.
    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(node) = self.param_nodes.borrow().get(id.0).copied().flatten() {
            return Var {
                graph: self,
                id: node,
            };
        }
        let value = self.params[id.0].clone();
        let v = self.insert(value, Op::Leaf, self.track);
        self.param_nodes.borrow_mut()[id.0] = Some(v.id);
        v
    }

    fn insert(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = self.track && {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.insert(Arc::new(value), op, requires_grad))
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[loss.id].value;
        if out.len() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            node.op.backward(&node.value, &g, &nodes, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            param_nodes: self.param_nodes.borrow().clone(),
        })
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    param_nodes: Vec<Option<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.by_node(v.id)
    }

    fn by_node(&self, id: usize) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(self.shapes[id].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of a parameter, or `None` if it did not take part in the loss.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let node = self.param_nodes.get(id.0).copied().flatten()?;
        self.by_node(node)
    }

    /// One entry per bound parameter, in [`ParamId`] order.
    pub fn params(&self) -> Vec<Option<Tensor>> {
        (0..self.param_nodes.len())
            .map(|i| self.param(ParamId(i)))
            .collect()
    }
}

/// Accumulates `src` into the gradient slot of `id`, allocating zeros first.
pub(crate) fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn node_id(&self) -> usize {
        self.id
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}
