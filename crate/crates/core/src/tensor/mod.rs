//! A small reverse-mode automatic differentiation engine over dense,
//! row-major `f64` arrays.
//!
//! Every operation the model needs is implemented here with a hand-written
//! backward rule: matmul, elementwise add/sub/mul, scaling, row broadcast,
//! softmax, layer norm, GELU, embedding gather, reshape/transpose, sum/mean,
//! row/column slicing, row concatenation, masked multi-head attention and a
//! straight-through scalar quantizer.
//!
//! A [`Tensor`] is a cheap reference-counted handle to a node in a dynamic
//! graph. Nodes record their parents only when gradients are enabled and at
//! least one parent requires a gradient, so inference under [`no_grad`]
//! builds no graph at all.
//!
//! ```
//! use robin::tensor::Tensor;
//!
//! let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//! let loss = x.mul(&x).unwrap().sum();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```
//!
//! Evaluation is single-threaded and every reduction runs in a fixed order,
//! so identical inputs give bit-identical outputs.

mod mask;
mod ops;

pub use mask::AttentionMask;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use ops::Op;

/// Floating-point storage precision used for operation outputs.
///
/// Storage is always `f64`; in [`Precision::F32`] mode every value produced
/// by an operation is rounded through `f32`, which reproduces single
/// precision rounding of intermediate results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Disables graph recording until the guard is dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    NoGradGuard { prev }
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

/// Handle to an n-dimensional array that may participate in autodiff.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

fn round_storage(mut data: Vec<f64>) -> Vec<f64> {
    if precision() == Precision::F32 {
        for v in data.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    data
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(round_storage(data)),
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
        }))
    }

    /// Builds an operation output. The op (and with it the parent links) is
    /// only kept when a gradient can flow.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(round_storage(data)),
            grad: RefCell::new(None),
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        }))
    }

    fn checked(data: Vec<f64>, shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(())
    }

    /// A constant (no gradient) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::checked(data.clone(), shape)?;
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::checked(data.clone(), shape)?;
        Ok(Tensor::leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![v], vec![1], false)
    }

    /// Copies the values into a fresh constant, cutting the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values of a leaf in place (used by optimizers and
    /// checkpoint loading).
    pub fn set_data(&self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.0.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        *self.0.data.borrow_mut() = round_storage(values);
        Ok(())
    }

    /// Mutable access to leaf values.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut data = self.0.data.borrow_mut();
        f(&mut data)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients accumulate
    /// on every reachable leaf that requires one; call
    /// [`Tensor::zero_grad`] before reusing the leaves.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS over nodes that carry a gradient.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !visited.contains(&p.0.id) {
                    stack.push((p.clone(), false));
                }
            }
        }

        {
            let mut g = self.0.grad.borrow_mut();
            match g.as_mut() {
                Some(v) => v[0] += 1.0,
                None => *g = Some(vec![1.0]),
            }
        }

        for t in order.iter().rev() {
            if t.is_leaf() {
                continue;
            }
            let Some(grad) = t.0.grad.borrow_mut().take() else {
                continue;
            };
            let out = t.0.data.borrow();
            t.0.op.backward(&out, &t.0.shape, &grad, &mut |parent, pg| {
                if !parent.requires_grad() {
                    return;
                }
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(pg.iter()) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(pg),
                }
            });
        }
        Ok(())
    }
}

/// Standard sinusoidal encoding of `positions`, one row of width `dim` per
/// position (`positions` must be non-empty): even columns `sin(pos / 10000^(2i/dim))`, odd columns `cos`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; positions.len() * dim];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * (2 * i) as f64 / dim as f64).exp();
            data[r * dim + 2 * i] = (pos * freq).sin();
            data[r * dim + 2 * i + 1] = (pos * freq).cos();
        }
    }
    Tensor::leaf(data, vec![positions.len(), dim], false)
}

#[cfg(test)]
mod tests;
