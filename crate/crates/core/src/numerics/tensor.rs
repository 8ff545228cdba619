//! Define-by-run reverse-mode differentiation.
//!
//! Every op returns a fresh [`Tensor`] that remembers its parents and a
//! backward closure. Calling [`Tensor::backward`] on a scalar walks the graph
//! in reverse topological order. Leaves that require gradients accumulate into
//! their own `grad` buffer; intermediate gradients live only for the duration
//! of the walk.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward closures.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub grad: &'a [T],
    pub out: &'a [T],
    pub parents: &'a [Tensor<T>],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// n-dimensional row-major array taking part in reverse-mode differentiation.
///
/// Cloning a `Tensor` clones the handle, not the storage: two clones are the
/// same parameter.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn: None,
            }),
        }
    }

    /// Constant tensor. Fails unless `product(shape) == data.len()`.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![T::zero(); shape.iter().product()], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false)
    }

    /// Result of an op. The backward closure is dropped when no parent needs
    /// gradients or recording is disabled.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn { parents, backward });
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.node.shape.last().unwrap_or(&1)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.node.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    /// Sets the gradient buffer to zeros (leaves only).
    pub fn zero_grad(&self) {
        if self.node.requires_grad {
            *self.node.grad.borrow_mut() = Some(vec![T::zero(); self.numel()]);
        }
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub fn set_grad(&self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(dim_err!("gradient of length {} for tensor {:?}", grad.len(), self.shape()));
        }
        *self.node.grad.borrow_mut() = Some(grad);
        Ok(())
    }

    /// In-place update of a leaf's storage. Visible through every clone.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) {
        assert!(self.is_leaf(), "update_data on a non-leaf tensor");
        f(&mut self.node.data.borrow_mut());
    }

    /// Same values, no history.
    pub fn detach(&self) -> Self {
        Self::leaf(self.to_vec(), self.node.shape.clone(), false)
    }

    /// Independent copy of a leaf keeping its `requires_grad` flag.
    pub fn deep_clone(&self) -> Self {
        Self::leaf(self.to_vec(), self.node.shape.clone(), self.node.requires_grad)
    }

    /// True when both handles point at the same storage.
    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    pub fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.node) as *const () as usize
    }

    /// Reverse-mode pass from a one-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(dim_err!("backward requires a scalar, got shape {:?}", self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
        grads.insert(self.storage_id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.storage_id()) else {
                continue;
            };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let out = t.node.data.borrow();
                    let ctx = BackwardCtx { grad: &g, out: &out, parents: &gf.parents };
                    let pgrads = (gf.backward)(&ctx);
                    debug_assert_eq!(pgrads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.storage_id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                            None => {
                                grads.insert(p.storage_id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // iterative post-order DFS; (node, parents_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.storage_id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.storage_id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn check_shape<T>(data: &[T], shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(dim_err!("shape {shape:?} must be a non-empty list of positive sizes"));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(dim_err!("shape {shape:?} needs {n} values, got {}", data.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
        assert!(Tensor::<f32>::new(vec![1.0; 6], &[2, 3]).is_ok());
    }

    #[test]
    fn clones_share_storage() {
        let a = Tensor::<f32>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.clone();
        assert!(a.same_storage(&b));
        b.update_data(|d| d[0] = 5.0);
        assert_eq!(a.to_vec(), vec![5.0, 2.0]);
        let c = a.deep_clone();
        assert!(!a.same_storage(&c));
    }

    #[test]
    fn no_grad_skips_recording() {
        let a = Tensor::<f64>::parameter(vec![1.0, 2.0], &[2]).unwrap();
        let s = no_grad(|| a.sum());
        assert!(!s.requires_grad());
        assert!(a.sum().requires_grad());
    }
}
