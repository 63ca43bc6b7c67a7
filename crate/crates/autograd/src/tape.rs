//! The recording tape and differentiable variable handles.
//!
//! Every operation on a [`Var`] appends a node holding its forward value and,
//! when any input requires a gradient, a closure mapping the output gradient to
//! input gradients. [`Tape::backward`] replays those closures in reverse
//! insertion order, which is a valid topological order because nodes can only
//! reference earlier nodes.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::tensor::{Real, Tensor};

/// Maps the gradient of a node's output to gradients of its parents, in the
/// order the parents were given. `None` means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
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

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.variable_rc(Rc::new(value))
    }

    pub fn variable_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Records a custom operation.
    ///
    /// `backward` receives the gradient of `value` and must return one entry
    /// per parent, each either `None` or a tensor shaped like that parent.
    /// The closure is dropped immediately when no parent requires a gradient.
    pub fn custom<'t, F>(&'t self, parents: &[Var<'t, T>], value: Tensor<T>, backward: F) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        self.custom_rc(parents, Rc::new(value), backward)
    }

    /// Like [`Tape::custom`] for a value that is already shared.
    pub fn custom_rc<'t, F>(
        &'t self,
        parents: &[Var<'t, T>],
        value: Rc<Tensor<T>>,
        backward: F,
    ) -> Var<'t, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| {
            assert!(std::ptr::eq(p.tape, self), "variables from different tapes");
            p.requires_grad()
        });
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            requires_grad,
        })
    }

    /// Reverse-mode sweep from `output`, seeded with a gradient of ones.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let seed = Tensor::ones(output.value().shape());
        self.backward_with(output, seed)
    }

    /// Reverse-mode sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[output.id].value.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[output.id].requires_grad {
            grads[output.id] = Some(seed);
        }
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                assert_eq!(
                    pg.shape(),
                    nodes[pid].value.shape(),
                    "backward of node {id} produced a gradient of the wrong shape"
                );
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of leaf variables after a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf variable, `None` if it did not influence the output.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros if it did not influence the output.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// The value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// A constant sharing this variable's value; gradients stop here.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant_rc(self.value())
    }
}
