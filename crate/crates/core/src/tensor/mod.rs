//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Every operation that touches a tensor with `requires_grad` records its
//! inputs on the result, so the graph is rebuilt on each forward pass and
//! dropped with the last handle. Gradients accumulate into every
//! `requires_grad` tensor reachable from the scalar passed to
//! [`Tensor::backward`].

mod check;
mod conv;
mod gemm;
mod graph;
mod norm;
mod ops;
mod params;

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use graph::Op;

pub use check::gradcheck;
pub use conv::conv2d;
pub use norm::group_norm;
pub use ops::{channel_affine, concat_channels, linear, upsample_nearest2x};
pub use params::ParameterStore;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Reference-counted handle to an immutable tensor node.
///
/// Cloning is cheap and shares the node. Data never changes after
/// construction; only the gradient buffer is written (by `backward`).
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

struct Node {
    // Creation order. A node's id is always larger than its inputs' ids,
    // which gives a topological order for free.
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    op: Option<Op>,
}

impl Tensor {
    /// Builds a leaf tensor. Fails when `data.len()` does not match `shape`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Builds a leaf tensor that collects gradients.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::leaf(vec![value; numel], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(vec![value], Vec::new(), false)
    }

    pub(crate) fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op: None,
        }))
    }

    /// Result of an operation. The op is only kept when some input needs a
    /// gradient, so pure inference builds no graph.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            op: requires_grad.then_some(op),
        }))
    }

    /// Returns a fresh leaf with the same data and the given flag.
    pub fn with_requires_grad(self, requires_grad: bool) -> Self {
        if self.requires_grad() == requires_grad && self.0.op.is_none() {
            return self;
        }
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), requires_grad)
    }

    /// Copy of the data cut off from the graph.
    pub fn detach(&self) -> Self {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor was produced by a recorded operation.
    pub fn has_grad_fn(&self) -> bool {
        self.0.op.is_some()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.0.shape),
            )),
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Same-node identity.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulates gradients of this scalar into every reachable tensor
    /// that requires them. Calling it twice doubles the stored gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, shape is {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.0.op {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut sink = graph::GradSink::default();
        sink.seed(self, vec![1.0]);
        for node in &nodes {
            let Some(grad) = sink.take(node) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                op.backward(&grad, &mut sink);
            }
            let mut slot = node.0.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(existing) => existing.iter_mut().zip(&grad).for_each(|(e, g)| *e += g),
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("has_grad_fn", &self.0.op.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests;
