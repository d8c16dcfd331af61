use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: usize,
    pub(crate) tape: u64,
}

/// Deliberate kernel defects used by the verification battery to prove that
/// it can detect broken gradients.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the input gradient produced by `conv2d` backward.
    ConvBackwardSign,
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Dynamic record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Every forward op appends one node; nodes only ever reference earlier
/// nodes, so reverse recording order is a valid topological order.
pub struct Tape<T> {
    id: u64,
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    pub(crate) fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_unchecked(tensor, Op::Leaf, requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        assert_eq!(var.tape, self.id, "variable used with a foreign tape");
        &self.nodes[var.id].value
    }

    pub fn data(&self, var: Var) -> &[T] {
        self.value(var).data()
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.id].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `var`, if it was reached.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        if var.tape != self.id {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub(crate) fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.id >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(())
    }

    pub(crate) fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { id, tape: self.id }
    }

    /// Appends an op result, enforcing that forward values stay finite.
    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients land on every node that (transitively) depends on a
    /// trainable leaf. Running a second time without [`Tape::reset_grads`]
    /// is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.id].value.shape();
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.id].requires_grad {
            return Err(Error::Detached);
        }

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(out_grad) = grads[id].take() else { continue };
            self.nodes[id].op.backward(id, &out_grad, &self.nodes, &mut grads, self.fault);
            grads[id] = Some(out_grad);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}

/// Adds `g` into the gradient slot of `id` when that node takes gradients.
pub(crate) fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn second_backward_without_reset_fails() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
        tape.reset_grads();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_and_constant_losses_are_detached() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.param(Tensor::scalar(1.0));
        assert!(matches!(b.backward(x), Err(Error::Detached)));
        let c = b.constant(Tensor::scalar(1.0));
        let y = b.mul(c, c).unwrap();
        assert!(matches!(b.backward(y), Err(Error::Detached)));
    }

    #[test]
    fn reused_value_accumulates_once_per_use() {
        // loss = x*x + x  → d/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }
}
