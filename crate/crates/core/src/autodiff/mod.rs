//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value, the ids of its
//! inputs and (when any input needs a gradient) a [`Backward`] closure over
//! whatever it saved. Nodes can only reference earlier nodes, so creation
//! order is a topological order and the backward sweep is a reverse scan.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use ops::{masked_softmax, softmax_backward_row};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a node's backward rule.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad_out: &'a [T],
    /// `needs[i]` is false when input `i` does not lead to any tracked leaf.
    pub needs: Vec<bool>,
}

pub trait Backward<T: Real>: Send + Sync {
    /// One gradient per input, each the length of that input, or `None`
    /// where it is not needed.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    name: &'static str,
    requires_grad: bool,
    /// Accumulated gradient, kept only for leaves.
    grad: Option<Vec<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        tensor.clear_grad();
        self.nodes.push(Node {
            value: tensor,
            inputs: Vec::new(),
            op: None,
            name: "leaf",
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Gradient accumulated into a leaf by previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("node {} is not on this tape", v.0)))
        }
    }

    /// Appends an op node. The backward rule is dropped when nothing upstream
    /// needs a gradient.
    pub fn push<B: Backward<T> + 'static>(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        op: B,
    ) -> Result<Var> {
        for &i in &inputs {
            self.check(i)?;
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
            name,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates `d loss / d node` back to every tracked leaf, adding into
    /// the leaves' gradient slots. Returns the nodes visited, in visit order.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Var>> {
        self.check(loss)?;
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut adjoints: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adjoints.resize_with(loss.0 + 1, || None);
        adjoints[loss.0] = Some(vec![T::ONE]);
        let mut visited = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(grad_out) = adjoints[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            visited.push(Var(id));
            let Some(op) = node.op.as_ref() else {
                let node = &mut self.nodes[id];
                match node.grad.as_mut() {
                    Some(g) => g.iter_mut().zip(&grad_out).for_each(|(g, d)| *g += *d),
                    None => node.grad = Some(grad_out),
                }
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|i| &self.nodes[i.0].value).collect(),
                output: &node.value,
                grad_out: &grad_out,
                needs: node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect(),
            };
            let grads = op.backward(&ctx);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{} returned wrong arity", node.name);
            for (input, g) in node.inputs.iter().zip(grads) {
                let Some(g) = g else { continue };
                debug_assert_eq!(g.len(), self.nodes[input.0].value.numel(), "{}", node.name);
                match adjoints[input.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += *d),
                    None => adjoints[input.0] = Some(g),
                }
            }
        }
        Ok(visited)
    }
}
