use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use super::ops::{self, Op};
use super::tensor::{Tensor, Value};

pub(crate) type NodeId = usize;

/// Recording tape for one forward/backward cycle.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so the backward sweep is a single reverse pass. A tape is
/// consumed by its first `backward()`; build a fresh tape per step.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

struct NodeRec {
    op: Op,
    parents: Vec<NodeId>,
    value: Rc<Value>,
    requires: bool,
}

struct TapeInner {
    nodes: Vec<NodeRec>,
    grads: Vec<Vec<f64>>,
    done: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GradError {
    #[error("backward() requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("backward() requires a tensor recorded on a live tape")]
    NotOnTape,
    #[error("tape already consumed by a previous backward() call")]
    TapeConsumed,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                done: false,
            })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers an optimizable leaf. The returned tensor participates in
    /// gradient flow and receives a gradient after `backward()`.
    pub fn param(&self, t: &Tensor) -> Tensor {
        self.leaf(Rc::clone(&t.value), true)
    }

    /// Registers a non-optimizable constant leaf.
    pub fn constant(&self, t: &Tensor) -> Tensor {
        self.leaf(Rc::clone(&t.value), false)
    }

    pub(crate) fn leaf(&self, value: Rc<Value>, requires: bool) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(NodeRec {
            op: Op::Leaf,
            parents: Vec::new(),
            value: Rc::clone(&value),
            requires,
        });
        Tensor {
            value,
            node: Some((self.clone(), id)),
        }
    }

    pub(crate) fn record(&self, op: Op, parents: Vec<NodeId>, value: Value) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let requires = parents.iter().any(|&p| inner.nodes[p].requires);
        let value = Rc::new(value);
        let id = inner.nodes.len();
        inner.nodes.push(NodeRec {
            op,
            parents,
            value: Rc::clone(&value),
            requires,
        });
        Tensor {
            value,
            node: Some((self.clone(), id)),
        }
    }

    pub(crate) fn node_requires(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].requires
    }

    pub(crate) fn grad_of(&self, id: NodeId) -> Option<Vec<f64>> {
        let inner = self.inner.borrow();
        if !inner.done {
            return None;
        }
        let numel = inner.nodes[id].value.numel();
        let g = &inner.grads[id];
        if g.len() == numel {
            Some(g.clone())
        } else {
            Some(vec![0.0; numel])
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn run_backward(loss: &Tensor) -> Result<(), GradError> {
    let (tape, loss_id) = loss.node.as_ref().ok_or(GradError::NotOnTape)?;
    if loss.numel() != 1 {
        return Err(GradError::NonScalarLoss {
            numel: loss.numel(),
        });
    }
    let mut inner = tape.inner.borrow_mut();
    if inner.done {
        return Err(GradError::TapeConsumed);
    }
    inner.done = true;

    let n = inner.nodes.len();
    inner.grads = vec![Vec::new(); n];
    inner.grads[*loss_id] = vec![1.0];

    // Reverse topological sweep. Only subgraphs that lead to a parameter
    // carry gradient buffers; everything else stays implicitly zero.
    for id in (0..=*loss_id).rev() {
        if inner.grads[id].is_empty() || !inner.nodes[id].requires {
            continue;
        }
        if matches!(inner.nodes[id].op, Op::Leaf) {
            continue;
        }
        let upstream = std::mem::take(&mut inner.grads[id]);
        let (op, parents, value) = {
            let rec = &inner.nodes[id];
            (rec.op.clone(), rec.parents.clone(), Rc::clone(&rec.value))
        };
        let parent_values: Vec<Rc<Value>> = parents
            .iter()
            .map(|&p| Rc::clone(&inner.nodes[p].value))
            .collect();
        for (slot, &pid) in parents.iter().enumerate() {
            if !inner.nodes[pid].requires {
                continue;
            }
            if inner.grads[pid].is_empty() {
                inner.grads[pid] = vec![0.0; inner.nodes[pid].value.numel()];
            }
            let mut sink = std::mem::take(&mut inner.grads[pid]);
            ops::backward_into(&op, slot, &value, &parent_values, &upstream, &mut sink);
            inner.grads[pid] = sink;
        }
        inner.grads[id] = upstream;
    }
    Ok(())
}
