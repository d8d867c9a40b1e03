//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node. Every differentiable
//! operation records its parents and a backward closure, but only when at
//! least one parent requires a gradient; in inference the graph is never
//! built and intermediate activations are released as soon as the caller
//! drops them.
//!
//! Node ids come from a global monotone counter, so a parent always has a
//! smaller id than any of its children. Sorting reachable nodes by
//! descending id is therefore a valid reverse topological order.

mod conv;
mod elementwise;
mod nn;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use conv::conv2d;
pub use elementwise::{
    abs, add, add_scalar, avg_pool2x2, clamp_min, div, gaussian_filter_valid, mean, mean_per_sample,
    mul, pow_scalar, relu, scale, sigmoid, sub, sum,
};
pub use nn::{batch_norm, concat_channels, dropout, max_pool2x2, upsample2x, BatchNormState, Mode};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Computes the gradient of each parent from the output value and the
/// gradient flowing into the output. `None` means "no contribution".
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[Var<T>], &Tensor<T>, &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Float> {
    id: usize,
    op: &'static str,
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    grad: RefCell<Option<Tensor<T>>>,
}

/// A tensor participating in the computation graph.
pub struct Var<T: Float>(Rc<Node<T>>);

impl<T: Float> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("op", &self.0.op)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

impl<T: Float> Var<T> {
    /// A leaf that never receives a gradient (inputs, targets).
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    /// A leaf that receives a gradient on [`Var::backward`] (parameters).
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            op: "leaf",
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        }))
    }

    pub(crate) fn from_op(
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(Var::requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            id: next_id(),
            op,
            value,
            requires_grad,
            parents,
            backward,
            grad: RefCell::new(None),
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        self.0.op
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op == "leaf"
    }

    /// The gradient stored on a leaf by the last backward pass.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.value.data()[0]
    }

    /// Populates leaf gradients, overwriting any previous values.
    pub fn backward(&self) -> Result<()> {
        self.run_backward(false)
    }

    /// Populates leaf gradients, adding to any previous values.
    pub fn backward_accumulate(&self) -> Result<()> {
        self.run_backward(true)
    }

    fn run_backward(&self, accumulate: bool) -> Result<()> {
        if self.0.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut seen = HashSet::new();
        let mut order = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(var) = stack.pop() {
            if !seen.insert(var.id()) {
                continue;
            }
            for parent in &var.0.parents {
                if parent.requires_grad() && !seen.contains(&parent.id()) {
                    stack.push(parent.clone());
                }
            }
            order.push(var);
        }
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut pending: HashMap<usize, Tensor<T>> = HashMap::new();
        pending.insert(self.id(), Tensor::ones(self.shape()));

        for var in order {
            let Some(grad) = pending.remove(&var.id()) else {
                continue;
            };
            let node = &var.0;
            match &node.backward {
                Some(backward) => {
                    let parent_grads = backward(&node.parents, &node.value, &grad)?;
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (parent, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        if g.shape() != parent.shape() {
                            return Err(Error::Contract(format!(
                                "{} produced a gradient of shape {:?} for a parent of shape {:?}",
                                node.op,
                                g.shape(),
                                parent.shape()
                            )));
                        }
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.add_assign(&g)?,
                            None => {
                                pending.insert(parent.id(), g);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(existing) if accumulate => existing.add_assign(&grad)?,
                        _ => *slot = Some(grad),
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Var::parameter(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 - 2.5));
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let x = Var::parameter(Tensor::<f64>::from_fn(&[5], |i| i as f64 * 0.7 - 1.0));
        sum(&mul(&x, &x).unwrap()).backward().unwrap();
        let g = x.grad().unwrap();
        for (g, v) in g.data().iter().zip(x.value().data()) {
            assert!((g - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let x = Var::parameter(Tensor::<f64>::ones(&[3]));
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_overwrites_unless_accumulating() {
        let x = Var::parameter(Tensor::<f64>::ones(&[2]));
        let loss = sum(&scale(&x, 3.0));
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, 3.0]);
        loss.backward_accumulate().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn unreachable_parameters_get_no_grad() {
        let x = Var::parameter(Tensor::<f64>::ones(&[2]));
        let y = Var::parameter(Tensor::<f64>::ones(&[2]));
        sum(&x).backward().unwrap();
        assert!(x.grad().is_some());
        assert!(y.grad().is_none());
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // loss = sum(x * x + x) -> grad = 2x + 1
        let x = Var::parameter(Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = mul(&x, &x).unwrap();
        sum(&add(&sq, &x).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn constants_build_no_graph() {
        let x = Var::constant(Tensor::<f32>::ones(&[4]));
        let y = relu(&scale(&x, 2.0));
        assert!(!y.requires_grad());
        assert!(y.0.parents.is_empty());
    }
}
