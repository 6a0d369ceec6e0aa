//! Minimal define-by-run reverse mode autodiff. A [`Graph`] records one
//! forward pass as a flat tape of nodes; [`Graph::backward`] walks the tape
//! once in reverse. Nodes hold their value behind an `Arc` so backward
//! closures can capture inputs without copying.
//!
//! The engine tracks which nodes can influence a trainable leaf
//! (`needs_grad`) and skips recording backward closures for subgraphs that
//! cannot, which is what makes frozen-template and frozen-generator runs
//! cheaper than full runs without separate code paths.

mod conv;
mod norm;
mod ops;
mod sample;
mod spectral;

pub use norm::BatchStats;

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::real::Real;

/// Handle to a node in a [`Graph`]. Plain index, cheap to copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn FnOnce(&ArrayD<T>, &mut GradSink<T>)>;

struct Node<T: Real> {
    value: Arc<ArrayD<T>>,
    needs_grad: bool,
    is_leaf: bool,
    backward: Option<BackFn<T>>,
}

/// Gradient accumulator passed to backward closures.
pub struct GradSink<T: Real> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> GradSink<T> {
    /// Adds a contribution to a node's gradient.
    pub fn add(&mut self, var: Var, grad: ArrayD<T>) {
        match &mut self.slots[var.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), grad.shape(), "gradient shape drift");
                *acc += &grad;
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

/// Gradients produced by one backward pass, addressed by [`Var`].
pub struct Grads<T: Real> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&ArrayD<T>> {
        self.slots.get(var.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<ArrayD<T>> {
        self.slots.get_mut(var.0).and_then(|s| s.take())
    }
}

/// One forward pass worth of recorded computation.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: ArrayD<T>, needs_grad: bool, is_leaf: bool, backward: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            needs_grad,
            is_leaf,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Records an interior node. `backward` should already be `None` when
    /// `needs_grad` is false; callers use [`Graph::wants_grad`] to decide.
    pub(crate) fn interior(&self, value: ArrayD<T>, backward: Option<BackFn<T>>) -> Var {
        let needs = backward.is_some();
        self.push(value, needs, false, backward)
    }

    /// Like [`Graph::interior`] but for ops whose backward closure captures
    /// the op's own output value.
    pub(crate) fn interior_shared(&self, value: Arc<ArrayD<T>>, backward: Option<BackFn<T>>) -> Var {
        let needs = backward.is_some();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad: needs,
            is_leaf: false,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable input. Gradients are retained for it.
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        self.push(value, true, true, None)
    }

    /// Non-trainable input; no gradient flows into or through it alone.
    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, false, true, None)
    }

    /// Trainable input sharing an existing allocation; how model parameters
    /// enter a step's graph without copying.
    pub fn leaf_shared(&self, value: Arc<ArrayD<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad: true,
            is_leaf: true,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Non-trainable input sharing an existing allocation.
    pub fn constant_shared(&self, value: Arc<ArrayD<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad: false,
            is_leaf: true,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    /// Value of a node. The `Arc` keeps this cheap.
    pub fn value(&self, var: Var) -> Arc<ArrayD<T>> {
        self.nodes.borrow()[var.0].value.clone()
    }

    /// Value of a single element node.
    pub fn scalar(&self, var: Var) -> T {
        let v = self.value(var);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].needs_grad
    }

    /// True when at least one input can receive gradient, i.e. the op must
    /// record a backward closure.
    pub fn wants_grad(&self, inputs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        inputs.iter().any(|v| nodes[v.0].needs_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar root. Consumes the recorded closures, so a
    /// graph supports exactly one backward pass. Returns gradients for leaf
    /// nodes (interior gradients are dropped as soon as they are consumed).
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut nodes = self.nodes.borrow_mut();
        assert_eq!(nodes[root.0].value.len(), 1, "backward from non-scalar");
        assert!(
            nodes[root.0].needs_grad,
            "backward from a node with no trainable ancestors"
        );
        let mut sink = GradSink {
            slots: (0..nodes.len()).map(|_| None).collect(),
        };
        sink.slots[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), T::ONE));
        for i in (0..=root.0).rev() {
            let Some(grad) = sink.slots[i].take() else {
                continue;
            };
            if let Some(back) = nodes[i].backward.take() {
                back(&grad, &mut sink);
            }
            if nodes[i].is_leaf && nodes[i].needs_grad {
                sink.slots[i] = Some(grad);
            }
        }
        Grads { slots: sink.slots }
    }
}
