use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::Tensor;

/// A shared leaf parameter.
///
/// Cloning a `Var` aliases the same storage, so a model struct and the tape
/// nodes referencing its parameters see one tensor. Gradients accumulate in
/// the underlying tensor across backward passes until [`Var::zero_grad`].
#[derive(Clone)]
pub struct Var(Rc<RefCell<Tensor>>);

impl Var {
    /// Wraps a tensor as a trainable leaf; gradient tracking is forced on.
    pub fn new(tensor: Tensor) -> Self {
        let t = if tensor.requires_grad() {
            tensor
        } else {
            tensor.with_grad()
        };
        Var(Rc::new(RefCell::new(t)))
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().zero_grad();
    }

    /// Copies the gradient out (zeros if no backward pass ran yet).
    pub fn grad_vec(&self) -> Vec<f32> {
        let t = self.0.borrow();
        t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut t = self.0.borrow_mut();
        let g = t.grad_mut().expect("Var always carries a grad buffer");
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.0.borrow();
        write!(f, "Var(shape={:?})", t.shape())
    }
}
