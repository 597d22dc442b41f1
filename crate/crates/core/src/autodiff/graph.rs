use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: input values, the op output and the
/// incoming gradient. `needs[i]` tells whether input `i` wants a gradient.
pub(crate) struct BackArgs<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub needs: Vec<bool>,
    pub out: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

pub(crate) type BackFn<T> = Box<dyn Fn(&BackArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
}

/// Branch decisions of the non-smooth ops (ReLU masks, max-pool winners) in
/// tape order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Branches(pub Vec<Vec<usize>>);

#[derive(Default)]
enum BranchMode {
    #[default]
    Free,
    Record(Vec<Vec<usize>>),
    Replay(Vec<Vec<usize>>, usize),
}

/// Reverse-mode tape. Every op appends a node; [`Graph::backward`] walks the
/// tape once in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
    branches: BranchMode,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            branches: BranchMode::Free,
        }
    }

    /// A tape that only evaluates; no gradients can be requested.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Keeps the branch decisions of every non-smooth op from here on.
    pub fn record_branches(&mut self) {
        self.branches = BranchMode::Record(Vec::new());
    }

    /// Forces non-smooth ops to take recorded decisions instead of their
    /// own, so the tape evaluates one smooth piece of the function.
    pub fn replay_branches(&mut self, b: Branches) {
        self.branches = BranchMode::Replay(b.0, 0);
    }

    /// Recorded decisions; empty unless recording.
    pub fn take_branches(&mut self) -> Branches {
        match core::mem::take(&mut self.branches) {
            BranchMode::Record(v) => Branches(v),
            _ => Branches::default(),
        }
    }

    /// Decision of the next non-smooth op, given the one it would take.
    pub(crate) fn branch(&mut self, own: Vec<usize>) -> Vec<usize> {
        match &mut self.branches {
            BranchMode::Free => own,
            BranchMode::Record(v) => {
                v.push(own.clone());
                own
            }
            BranchMode::Replay(v, at) => {
                let b = v.get_mut(*at).map(core::mem::take).expect("replayed tape has more branch ops");
                assert_eq!(b.len(), own.len(), "replayed branch op changed size");
                *at += 1;
                b
            }
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackFn<T>) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar-valued `loss` (seed gradient 1).
    pub fn backward(&mut self, loss: Var) {
        let seed = Tensor::full(self.nodes[loss.0].value.shape(), T::one());
        self.backward_with(loss, seed);
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<T>) {
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return;
        }
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(backward) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let args = BackArgs {
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                needs: node
                    .inputs
                    .iter()
                    .map(|&j| self.nodes[j].requires_grad)
                    .collect(),
                out: &node.value,
                grad: &grad,
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            let inputs = node.inputs.clone();
            for (j, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[j].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[j].value.shape());
                match &mut self.grads[j] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    /// Gradient of the last backward pass w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Convenience for ops that produce a single gradient.
pub(crate) fn one<T>(g: Option<Tensor<T>>) -> Vec<Option<Tensor<T>>> {
    vec![g]
}
