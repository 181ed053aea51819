//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Node ids
//! grow monotonically, so reverse id order is a valid topological order for
//! the backward sweep. Each forward pass builds a fresh tape; parameters enter
//! it as leaves and their gradients are read back by node id.

mod conv;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

pub use conv::{conv_output_size, conv_transpose_output_size};

/// Dense row-major tensor.
pub type Tensor<F> = ArrayD<F>;

type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Rc<Tensor<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

/// Operation recorder.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> fmt::Debug for Tape<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to one recorded value.
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, shape={:?})", self.id, self.shape())
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input tensor.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        })
    }

    pub fn variable(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Records the result of a custom operation.
    ///
    /// `backward` receives the gradient of the output and a mask telling which
    /// parents need a gradient; it returns one entry per parent.
    pub fn apply<'t>(
        &'t self,
        value: Tensor<F>,
        parents: &[Var<'t, F>],
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var<'t, F> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        self.push_node(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    fn push_node(&self, node: Node<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagates from a scalar root, seeding its gradient with one.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        assert!(
            root.value().len() == 1,
            "backward root must hold a single element, got shape {:?}",
            root.shape()
        );
        let seed = ArrayD::from_elem(root.value().raw_dim(), F::one());
        self.backward_with(root, seed)
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, root: Var<'_, F>, seed: Tensor<F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[root.id].value.shape());
        let mut pending: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            pending[root.id] = Some(seed);
        }
        for id in (0..=root.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                leaves[id] = Some(grad);
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&parent, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[parent].value.shape());
                match &mut pending[parent] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads: leaves }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Leaf gradients produced by one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf, `None` when it did not influence the root.
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when it did not influence the root.
    pub fn get_or_zeros(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value().raw_dim()))
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// First element, for scalar results.
    pub fn item(&self) -> F {
        *self.value().iter().next().expect("non-empty tensor")
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, F> {
        self.tape.constant((*self.value()).clone())
    }
}
