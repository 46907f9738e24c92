//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and a backward closure. [`Tape::backward`] walks the recording
//! in reverse and accumulates gradients into the leaves. One tape serves one
//! training step; parameters live outside the tape (see [`crate::nn::Params`])
//! and are re-bound as leaves each step.
//!
//! The op set is deliberately small: exactly what the models in this crate
//! need, each with a finite-difference test.

mod ops;
pub mod gradcheck;

pub use ops::{cosine_mean_const, huber_mean_const};

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

pub(crate) type Value<S> = Rc<ArrayD<S>>;
type BackFn<S> = Box<dyn FnOnce(&ArrayD<S>, &mut dyn FnMut(usize, ArrayD<S>))>;

struct Node<S: Scalar> {
    value: Value<S>,
    requires_grad: bool,
    back: Option<BackFn<S>>,
}

/// Wengert list for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a node on a tape. Copyable; all arithmetic goes through it.
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    pub(crate) tape: &'t Tape<S>,
    pub(crate) id: usize,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub(crate) fn push(&self, value: ArrayD<S>, requires_grad: bool, back: Option<BackFn<S>>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            back,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input (a parameter or anything gradients should reach).
    pub fn leaf(&self, value: ArrayD<S>) -> Var<'_, S> {
        self.push(value, true, None)
    }

    /// Non-differentiable input; backward never propagates into it.
    pub fn constant(&self, value: ArrayD<S>) -> Var<'_, S> {
        self.push(value, false, None)
    }

    pub fn scalar_constant(&self, v: S) -> Var<'_, S> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn value(&self, id: usize) -> Value<S> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar root. Consumes the recorded closures, so
    /// each tape supports a single backward call.
    pub fn backward(&self, root: Var<'_, S>) -> Gradients<S> {
        let n = self.nodes.borrow().len();
        assert!(root.id < n, "root not on this tape");
        assert_eq!(
            self.nodes.borrow()[root.id].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<S>>> = (0..n).map(|_| None).collect();
        let root_shape = self.nodes.borrow()[root.id].value.raw_dim();
        grads[root.id] = Some(ArrayD::from_elem(root_shape, S::one()));

        for id in (0..=root.id).rev() {
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let back = self.nodes.borrow_mut()[id].back.take();
            match back {
                Some(f) => {
                    f(&grad, &mut |pid: usize, contrib: ArrayD<S>| {
                        debug_assert!(pid < id, "gradient must flow backward");
                        match &mut grads[pid] {
                            Some(acc) => acc.zip_mut_with(&contrib, |x, &y| *x = *x + y),
                            slot @ None => *slot = Some(contrib),
                        }
                    });
                }
                None => {
                    if self.nodes.borrow()[id].requires_grad {
                        grads[id] = Some(grad);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of the leaves after [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&ArrayD<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, S>) -> Option<ArrayD<S>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Clone of this node's value.
    pub fn value(&self) -> ArrayD<S> {
        (*self.tape.value(self.id)).clone()
    }

    pub(crate) fn value_rc(&self) -> Value<S> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Extract a 0-d (or single-element) value.
    pub fn scalar(&self) -> S {
        let v = self.tape.value(self.id);
        assert_eq!(v.len(), 1, "scalar() on non-scalar var");
        *v.iter().next().unwrap()
    }
}
