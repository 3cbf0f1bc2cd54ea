//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a reference-counted node in a dynamically recorded
//! computation. Every op that consumes a tensor requiring gradients records
//! its parents, and [`Tensor::backward`] walks that record in reverse
//! topological order. Leaf tensors created with [`Tensor::parameter`]
//! accumulate gradients across calls until [`Tensor::zero_grad`].
//!
//! ```
//! use latentpath::tensor::Tensor;
//!
//! let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
//! let target = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
//! let loss = x.mse_loss(&target).unwrap();
//! assert_eq!(loss.item(), 2.5);
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
//! ```

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, ParamBlock,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{gradient_check, gradient_check_params, GradCheckReport};
pub use ops::conv_output_extent;
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use scalar::Scalar;

use crate::error::{Error, Result};
use ops::Op;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static KINK_TRACE: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` without recording any computation. Results are plain constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` while fingerprinting the sign pattern of every ReLU input.
///
/// Two evaluations with equal fingerprints took the same linear piece of
/// every ReLU, which is how gradient checks detect probes straddling a kink.
pub(crate) fn trace_kinks<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = KINK_TRACE.with(|k| k.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let trace = KINK_TRACE.with(|k| k.replace(previous)).unwrap_or(0);
    (out, trace)
}

pub(crate) fn record_kink_signs<T: Scalar>(values: &[T]) {
    KINK_TRACE.with(|k| {
        if let Some(mut h) = k.get() {
            for v in values {
                // zero is the kink itself; fold it in as its own state
                let state: u64 = if *v > T::zero() {
                    1
                } else if *v < T::zero() {
                    2
                } else {
                    3
                };
                h ^= state;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            k.set(Some(h));
        }
    });
}

pub(crate) struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
}

/// N-dimensional row-major array of scalars, optionally tracking gradients.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish_non_exhaustive()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: None,
            }),
        }
    }

    /// Constant tensor; fails when `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    /// Trainable leaf tensor whose gradient accumulates across backward passes.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::leaf(shape.to_vec(), data, true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![T::zero(); numel(shape)], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Output of a recorded op. Gradient tracking is inherited from the
    /// parents unless recording is switched off.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let track = is_grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: track,
                op: if track { Some(op) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// First element; meant for scalar results such as losses.
    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.node.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy of the values with no history and no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    /// Overwrites the values of a tensor in place (parameter loading).
    pub fn assign(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Input(format!(
                "assign: expected {} values, got {}",
                self.numel(),
                values.len()
            )));
        }
        self.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.node)
    }

    /// Back-propagates from a scalar, accumulating into every reachable
    /// parameter's gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor that does not require gradients".into(),
            ));
        }

        let order = self.topological_order();
        let mut grads: HashMap<*const Node<T>, Vec<T>> = HashMap::new();
        grads.insert(self.key(), vec![T::one()]);
        let mut leaves = Vec::new();

        for tensor in order.iter().rev() {
            let Some(grad_out) = grads.remove(&tensor.key()) else {
                continue;
            };
            match &tensor.node.op {
                None => {
                    let mut slot = tensor.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, g)| *a += *g),
                        None => *slot = Some(grad_out),
                    }
                    leaves.push(tensor.clone());
                }
                Some(op) => {
                    let data = tensor.node.data.borrow();
                    op.backward(
                        &data,
                        &grad_out,
                        &mut |parent: &Tensor<T>, contribution: Vec<T>| {
                            if !parent.requires_grad() {
                                return;
                            }
                            match grads.get_mut(&parent.key()) {
                                Some(acc) => acc
                                    .iter_mut()
                                    .zip(&contribution)
                                    .for_each(|(a, g)| *a += *g),
                                None => {
                                    grads.insert(parent.key(), contribution);
                                }
                            }
                        },
                    );
                }
            }
        }

        for leaf in leaves {
            if let Some(g) = leaf.grad_ref().as_ref() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter of shape {:?}",
                        leaf.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((tensor, expanded)) = stack.pop() {
            if expanded {
                order.push(tensor);
                continue;
            }
            if !visited.insert(tensor.key()) {
                continue;
            }
            stack.push((tensor.clone(), true));
            if let Some(op) = &tensor.node.op {
                for parent in op.parents() {
                    if parent.requires_grad() && !visited.contains(&parent.key()) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if numel(shape) != len {
        return Err(Error::Input(format!(
            "shape {shape:?} holds {} elements but {len} were given",
            numel(shape)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f64>::zeros(&[2, 3]).numel(), 6);
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.relu();
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn mse_against_detached_copy_has_zero_gradient() {
        let x = Tensor::<f64>::parameter(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let loss = x.mse_loss(&x.detach()).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let target = Tensor::zeros(&[2]);
        let loss = x.mse_loss(&target).unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shared_subexpression_sums_both_paths() {
        // loss = sum(relu(x)) + sum(2x); x used twice
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, -3.0]).unwrap();
        let total = x.relu().add(&x).unwrap().add(&x).unwrap();
        total.weighted_sum(&[1.0, 1.0]).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 2.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f64>::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.relu());
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        assert!(is_grad_enabled());
    }
}
