//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`Tape`] in execution order, so walking node
//! ids from high to low is a reverse topological order. [`Tape::backward`]
//! consumes the recorded vector-Jacobian products; a second call fails with
//! [`Error::TapeConsumed`].

mod check;
mod ops;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

pub use check::{grad_check, GradCheck, SUBSAMPLE_LIMIT, SUBSAMPLE_SEED};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    op: &'static str,
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        write!(f, "Var#{}<{}>{:?}", self.id, node.op, node.value.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_shared(Arc::new(value))
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Vector-Jacobian product of a single recorded operation: the gradient
    /// contribution to each of its inputs, in argument order.
    pub fn vjp(&self, output: Var<'_>, upstream: &Tensor) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[output.id];
        if node.value.shape() != upstream.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} for output {:?}",
                upstream.shape(),
                node.value.shape()
            )));
        }
        match &node.backward {
            Some(f) => Ok(f(upstream)),
            None if node.parents.is_empty() => Ok(Vec::new()),
            None => Err(Error::TapeConsumed),
        }
    }

    /// Backpropagates from a scalar objective through every recorded operation.
    pub fn backward(&self, objective: Var<'_>) -> Result<Grads> {
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let shape = objective.value().shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            self.consumed.set(false);
            return Err(Error::NonScalarObjective(shape));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[objective.id] = Some(Tensor::ones(shape));
        for id in (0..=objective.id).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            if let Some(f) = node.backward.take() {
                let parent_grads = f(&upstream);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
                for (&p, g) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            // Only leaf gradients are kept.
            if node.parents.is_empty() {
                grads[id] = Some(upstream);
            }
        }
        drop(nodes);
        let shapes = self
            .nodes
            .borrow()
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Grads { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op
    }
}

/// Gradients of a scalar objective with respect to the leaves of a tape.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads[var.id].as_ref()
    }

    /// Gradient for `var`; leaves that did not influence the objective get zeros.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}
