//! Dense fp64 tensors with reverse-mode automatic differentiation.
//!
//! Every forward op records itself on an implicit tape (the op graph with
//! monotonically increasing node ids). `backward()` replays the reachable
//! records in reverse id order, visiting each exactly once.

mod backward;
mod ops;
#[cfg(test)]
mod tests;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Recorded operation kind, with whatever metadata backward needs.
#[derive(Debug, Clone)]
pub(crate) enum OpKind {
    Add,
    /// Broadcast-add a `[n]` row vector to every row of an `[m, n]` matrix.
    AddRow,
    Mul,
    Scale(f64),
    MatMul,
    Transpose,
    Relu,
    Sigmoid,
    SoftmaxRows,
    CrossEntropy {
        targets: Vec<usize>,
    },
    BceWithLogits {
        targets: Vec<f64>,
    },
    Sum,
    MeanRows,
    ConcatRows {
        first_rows: usize,
    },
    ConcatCols {
        widths: Vec<usize>,
    },
    SliceCols {
        start: usize,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    LayerNormRows {
        eps: f64,
    },
    Reshape,
    Im2Col(Im2ColSpec),
}

/// Geometry of an image-to-column unfold for strided convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Im2ColSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Option<(OpKind, Vec<Tensor>)>,
}

/// Dense n-dimensional fp64 tensor participating in the autodiff graph.
///
/// Cloning is cheap and aliases the same storage; parameter tensors are
/// shared between the model and the optimizer this way.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<Node>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != data.len() {
            return Err(Error::DimensionMismatch {
                context: format!("tensor construction: {} elements", data.len()),
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor::from_node(data, shape.to_vec(), false, None))
    }

    /// A leaf tensor that accumulates gradients (a model parameter).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_node(vec![0.0; numel], shape.to_vec(), false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_node(vec![value], vec![1], false, None)
    }

    pub(crate) fn from_node(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<(OpKind, Vec<Tensor>)>,
    ) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                id: next_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar extraction; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64> {
        let n = self.inner.borrow();
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replace the underlying data in place (optimizer updates).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut n = self.inner.borrow_mut();
        if data.len() != n.data.len() {
            return Err(Error::DimensionMismatch {
                context: "set_data".into(),
                left: n.shape.clone(),
                right: vec![data.len()],
            });
        }
        n.data = data;
        Ok(())
    }

    /// Mutate data through a closure without reallocating.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut n = self.inner.borrow_mut();
        f(&mut n.data)
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let n = self.inner.borrow();
        f(&n.data)
    }

    /// Detach from the graph: same data, no history, no grad requirement.
    pub fn detach(&self) -> Tensor {
        let n = self.inner.borrow();
        Tensor::from_node(n.data.clone(), n.shape.clone(), false, None)
    }

    pub(crate) fn rank2(&self, context: &str) -> Result<(usize, usize)> {
        let n = self.inner.borrow();
        match n.shape.as_slice() {
            [m, k] => Ok((*m, *k)),
            [k] => Ok((1, *k)),
            _ => Err(Error::DimensionMismatch {
                context: format!("{context}: expected rank <= 2"),
                left: n.shape.clone(),
                right: vec![],
            }),
        }
    }
}
