use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the forward values of its inputs and
/// output, the incoming gradient, and which inputs actually need one.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    pub needs: Vec<bool>,
}

/// Gradients w.r.t. each input, `None` where not needed.
pub type InputGrads<T> = Vec<Option<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> InputGrads<T>>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Append-only tape of eagerly evaluated operations.
///
/// Inputs of every node precede it, so reverse append order is a valid
/// topological order for the backward sweep.
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>, value: Tensor<T>) -> Var {
        self.values.push(value);
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(
            Node {
                op: "constant",
                inputs: Vec::new(),
                backward: None,
                requires_grad: false,
            },
            value,
        )
    }

    /// A trainable leaf: `backward` populates its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(
            Node {
                op: "param",
                inputs: Vec::new(),
                backward: None,
                requires_grad: true,
            },
            value,
        )
    }

    /// Registers an eagerly computed output of `op` applied to `inputs`.
    ///
    /// The backward closure is dropped when no input requires a gradient.
    pub fn record<F>(&mut self, op: &'static str, inputs: &[Var], value: Tensor<T>, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> InputGrads<T> + 'static,
    {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(
            Node {
                op,
                inputs: inputs.iter().map(|v| v.0).collect(),
                backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
                requires_grad,
            },
            value,
        )
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every leaf
    /// parameter reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.values[loss.0].shape()),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "backward",
                "loss is detached: no parameter reaches it",
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|&i| &self.values[i]).collect(),
                output: &self.values[id],
                grad: &grad,
                needs: node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.values[input].numel(), "{}", node.op);
                match &mut self.grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
