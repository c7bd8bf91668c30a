use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// node index is already a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push<'t>(
        &'t self,
        op: &'static str,
        value: Rc<Tensor>,
        parents: &[Var<'t>],
        backward: BackwardFn,
    ) -> Result<Var<'t>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| {
            debug_assert!(std::ptr::eq(p.tape, self), "mixing tapes");
            nodes[p.id].requires_grad
        });
        nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once and
    /// gradients from multiple uses are summed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let (Some(backward), Some(g)) = (&node.backward, &grads[id]) else {
                continue;
            };
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes[..=loss.id]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => match self.shapes.get(var.id) {
                Some(shape) => Tensor::zeros(shape),
                None => Tensor::zeros(&var.shape()),
            },
        }
    }
}
