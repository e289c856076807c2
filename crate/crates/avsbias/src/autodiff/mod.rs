//! Reverse-mode automatic differentiation over f64 `ndarray` tensors.
//!
//! A [`Tape`] records each operation with a closure that maps the output
//! gradient to input-gradient contributions. Nodes are created in topological
//! order (parents always precede children), so the backward pass is a single
//! reverse sweep. Everything is f64 and single-threaded per tape; batch
//! parallelism happens one tape per sample.

mod check;
mod nn;
mod ops;

pub use check::{check_gradient, relative_error};
pub use nn::{AttentionParams, LayerNorm, Linear, Mlp2, ParamBinder};

use ndarray::ArrayD;
use std::cell::RefCell;
use std::rc::Rc;

/// Handle to a value on a tape. Valid only for the tape that created it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut GradSink)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradient accumulator used during the backward sweep. Ops call
/// [`GradSink::add`] once per differentiable input.
pub struct GradSink<'a> {
    slots: &'a mut [Option<ArrayD<f64>>],
}

impl GradSink<'_> {
    pub fn add(&mut self, var: Var, contribution: ArrayD<f64>) {
        match &mut self.slots[var.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), contribution.shape(), "gradient shape");
                *g += &contribution;
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`. `None` when no
    /// gradient path reached `v` (an exact structural zero).
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
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

    /// Create a leaf holding `value`. Leaves have no backward function; they
    /// receive gradients but propagate nothing.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.leaf_shared(Rc::new(value))
    }

    pub fn leaf_shared(&self, value: Rc<ArrayD<f64>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, back: None });
        Var(nodes.len() - 1)
    }

    /// Current value of a variable (cheap `Rc` clone).
    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        back: impl Fn(&ArrayD<f64>, &mut GradSink) + 'static,
    ) -> Var {
        self.push_shared(Rc::new(value), back)
    }

    pub(crate) fn push_shared(
        &self,
        value: Rc<ArrayD<f64>>,
        back: impl Fn(&ArrayD<f64>, &mut GradSink) + 'static,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            back: Some(Box::new(back)),
        });
        Var(nodes.len() - 1)
    }

    /// Backward pass from a scalar root (shape `[]` or `[1]`), seeding with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.0].value;
        assert!(
            root_value.len() == 1,
            "backward root must be scalar, got shape {:?}",
            root_value.shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(root_value.raw_dim(), 1.0));

        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].back {
                // Parents always have smaller ids, so split keeps borrows disjoint.
                let (earlier, later) = grads.split_at_mut(id);
                let g = later[0].as_ref().expect("checked above");
                let mut sink = GradSink { slots: earlier };
                back(g, &mut sink);
            }
        }
        Gradients { by_node: grads }
    }
}
