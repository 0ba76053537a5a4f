//! Dense float tensors with reverse-mode automatic differentiation.
//!
//! Every value flowing through the networks is a [`Tensor`]: a row-major
//! `Vec<f32>` plus shape metadata. Operations record their inputs so that
//! [`Tensor::backward`] can replay the graph in reverse and accumulate
//! gradients on `requires_grad` leaves. The graph is reference-counted:
//! dropping the loss tensor frees all intermediates.
//!
//! Reductions accumulate in `f64` before rounding back to `f32`. Any
//! operation that would produce a non-finite value reports an error instead
//! of propagating NaN/Inf silently.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

pub mod gradcheck;
mod ops;
pub mod optim;
mod rng;

pub use rng::Rng;

/// Errors surfaced by the tensor layer and everything built on top of it.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named primitive.
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { elements: usize },
    /// A precondition unrelated to shapes was violated.
    InvalidArgument { op: &'static str, detail: String },
    /// A sampling run hit a non-finite latent; carries the step index.
    NonFiniteAtStep { step: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::NonScalarLoss { elements } => {
                write!(f, "backward: loss must be scalar, got {elements} elements")
            }
            Error::InvalidArgument { op, detail } => write!(f, "{op}: {detail}"),
            Error::NonFiniteAtStep { step } => {
                write!(f, "sampler: non-finite value at step {step}")
            }
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Formats a shape like `[2, 3, 4]` for error messages.
pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let mut s = String::from("[");
    for (i, d) in shape.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(&format!("{d}"));
    }
    s.push(']');
    s
}

pub(crate) fn all_finite(data: &[f32]) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Backward rule: maps the upstream gradient to one gradient buffer per
/// parent, in parent order.
type BackFn = Box<dyn Fn(&[f32], &[Tensor]) -> Result<Vec<Vec<f32>>>>;

struct Node {
    parents: Vec<Tensor>,
    back: BackFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f32>>>,
    node: Option<Node>,
}

/// A dense N-dimensional `f32` array, optionally tracked by the autodiff
/// graph. Cloning is cheap (reference-counted); the underlying buffer is
/// shared.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor{} id={} grad={}",
            fmt_shape(&self.inner.shape),
            self.inner.id,
            self.inner.requires_grad.get()
        )
    }
}

impl Tensor {
    fn construct(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    /// Builds an untracked tensor, validating length and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {} expects {} elements, got {}", fmt_shape(shape), expected, data.len()),
            });
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor::construct(shape.to_vec(), data, false, None))
    }

    /// Builds a trainable leaf: `requires_grad` is set and gradients
    /// accumulate on it across `backward` calls until [`Tensor::zero_grad`].
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.to_vec()),
                requires_grad: Cell::new(true),
                grad: RefCell::new(None),
                node: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::construct(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::construct(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::construct(vec![1], vec![value], false, None)
    }

    /// Standard-normal leaf drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(rng.next_normal());
        }
        Tensor::construct(shape.to_vec(), data, false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flips gradient tracking on a leaf. Evaluation paths freeze their
    /// parameters so forward passes skip graph recording entirely.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// True for graph-produced tensors (non-leaves).
    pub fn is_tracked(&self) -> bool {
        self.inner.node.is_some()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Runs `f` over the raw buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        let d = self.inner.data.borrow();
        if d.len() != 1 {
            return Err(Error::InvalidArgument {
                op: "item",
                detail: format!("expected scalar, got {}", fmt_shape(&self.inner.shape)),
            });
        }
        Ok(d[0])
    }

    /// Overwrites the buffer in place. Shape must match; values must be finite.
    pub fn set_data(&self, data: &[f32]) -> Result<()> {
        let mut d = self.inner.data.borrow_mut();
        if d.len() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} elements, got {}", d.len(), data.len()),
            });
        }
        if !all_finite(data) {
            return Err(Error::NonFinite { op: "set_data" });
        }
        d.copy_from_slice(data);
        Ok(())
    }

    /// In-place update used by optimizers; the caller guarantees finiteness
    /// is re-checked afterwards.
    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// A leaf copy sharing no graph history: gradients stop here.
    pub fn detach(&self) -> Tensor {
        Tensor::construct(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_into_grad(&self, g: &[f32]) -> Result<()> {
        if !all_finite(g) {
            return Err(Error::NonFinite { op: "backward" });
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
        Ok(())
    }

    pub(crate) fn construct_untracked(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::construct(shape, data, false, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, op: &'static str, parents: Vec<Tensor>, back: BackFn) -> Result<Tensor> {
        if !all_finite(&data) {
            return Err(Error::NonFinite { op });
        }
        // Recording is skipped when no input is connected to a trainable
        // leaf; pure inference then builds no graph at all.
        let tracked = parents.iter().any(|p| p.inner.requires_grad.get() || p.inner.node.is_some());
        let node = if tracked { Some(Node { parents, back }) } else { None };
        Ok(Tensor::construct(shape, data, false, node))
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into each
    /// reachable `requires_grad` leaf; call repeatedly to sum contributions.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss { elements: self.numel() });
        }
        // Parents are always created before children, so ids give a
        // topological order for free.
        let mut reachable: BTreeMap<u64, Tensor> = BTreeMap::new();
        let mut stack = vec![self.clone()];
        reachable.insert(self.id(), self.clone());
        while let Some(t) = stack.pop() {
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if !reachable.contains_key(&p.id()) {
                        reachable.insert(p.id(), p.clone());
                        stack.push(p.clone());
                    }
                }
            }
        }
        let mut grads: BTreeMap<u64, Vec<f32>> = BTreeMap::new();
        grads.insert(self.id(), vec![1.0]);
        for (_, t) in reachable.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            if let Some(node) = &t.inner.node {
                let contribs = (node.back)(&g, &node.parents)?;
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (p, c) in node.parents.iter().zip(contribs) {
                    debug_assert_eq!(c.len(), p.numel());
                    match grads.get_mut(&p.id()) {
                        Some(buf) => {
                            for (b, v) in buf.iter_mut().zip(&c) {
                                *b += v;
                            }
                        }
                        None => {
                            grads.insert(p.id(), c);
                        }
                    }
                }
            } else if t.inner.requires_grad.get() {
                t.accumulate_into_grad(&g)?;
            }
        }
        Ok(())
    }
}

/// Clears the gradient buffers of every tensor in `params`.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

/// Toggle cell shared by low-rank adapter instances; lives here so layers can
/// flip state without interior mutability on the whole network.
pub type ToggleFlag = Rc<Cell<bool>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        let err = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "from_vec", .. }));
    }

    #[test]
    fn from_vec_rejects_nan() {
        let err = Tensor::from_vec(&[2], vec![1.0, f32::NAN]).unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "from_vec" });
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.mul_scalar(2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::NonScalarLoss { elements: 3 })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::param(&[2, 3], vec![0.5; 6]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        // d/dx sum(x*x) = 2x
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul_scalar(3.0).unwrap().detach();
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn untracked_inputs_record_no_graph() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = a.mul_scalar(2.0).unwrap();
        assert!(!b.is_tracked());
    }
}
