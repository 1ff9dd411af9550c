//! Dense 4-d tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is an immutable `(batch, channels, height, width)` array of
//! `f32` in row-major order. Operations return new tensors and record the
//! operation that produced them, so calling [`Tensor::backward`] on a scalar
//! walks the recorded graph in reverse and accumulates `d(scalar)/d(tensor)`
//! into every tensor that requires gradients.

mod autograd;
pub mod conv;
mod ops;
mod shadow;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv2d_transposed, ConvSpec};
pub use ops::log_sigmoid_f64;

/// Dimensions of a tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }

    /// Size along one axis, 0 = batch .. 3 = width.
    pub fn axis(&self, axis: usize) -> usize {
        match axis {
            0 => self.batch,
            1 => self.channels,
            2 => self.height,
            _ => self.width,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// How a tensor was produced. Holds handles to the operands, which keeps the
/// recorded graph alive for the backward pass.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Relu(Tensor),
    Abs(Tensor),
    Square(Tensor),
    Sqrt(Tensor),
    Exp(Tensor),
    Ln(Tensor),
    LogSigmoid(Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor, f32),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    ConcatChannels(Vec<Tensor>),
    SliceChannels(Tensor, usize),
    SliceBatch(Tensor, usize),
    CropTo(Tensor),
    PadTo(Tensor),
    Shift(Tensor, isize, isize),
    Conv {
        input: Tensor,
        weights: Tensor,
        bias: Tensor,
        spec: ConvSpec,
    },
    Resample {
        input: Tensor,
        rows: Arc<crate::resample::AxisPlan>,
        cols: Arc<crate::resample::AxisPlan>,
    },
    SumAxis(Tensor, usize),
    ExtremumAxis {
        input: Tensor,
        axis: usize,
        arg: Arc<Vec<u32>>,
        take_max: bool,
    },
    SumAll(Tensor),
    Reshape(Tensor),
    TransposeHw(Tensor),
    Matmul(Tensor, Tensor),
}

pub(crate) struct Inner {
    id: u64,
    shape: Shape,
    data: Arc<Vec<f32>>,
    op: Op,
    requires_grad: bool,
    grad: RwLock<Option<Vec<f32>>>,
}

/// A shared, immutable 4-d array. Cloning is cheap (reference count bump).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl Tensor {
    pub(crate) fn make(shape: Shape, data: Vec<f32>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: Arc::new(data),
                op,
                requires_grad,
                grad: RwLock::new(None),
            }),
        }
    }

    fn make_shared(shape: Shape, data: Arc<Vec<f32>>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                op,
                requires_grad,
                grad: RwLock::new(None),
            }),
        }
    }

    /// A constant tensor that does not require gradients.
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {} wants {} values, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor::make(shape, data, Op::Leaf, false))
    }

    /// A trainable leaf: gradients accumulate here during backward passes.
    pub fn param(shape: Shape, data: Vec<f32>) -> Result<Tensor> {
        if shape.numel() != data.len() {
            return Err(Error::shape(
                "param",
                format!("shape {} wants {} values, got {}", shape, shape.numel(), data.len()),
            ));
        }
        Ok(Tensor::make(shape, data, Op::Leaf, true))
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::make(shape, vec![0.0; shape.numel()], Op::Leaf, false)
    }

    pub fn filled(shape: Shape, value: f32) -> Tensor {
        Tensor::make(shape, vec![value; shape.numel()], Op::Leaf, false)
    }

    /// A scalar constant with shape (1,1,1,1).
    pub fn scalar(value: f32) -> Tensor {
        Tensor::filled(Shape::new(1, 1, 1, 1), value)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.inner.data[self.inner.shape.index(b, c, y, x)]
    }

    /// The single value of a (1,1,1,1) tensor.
    pub fn item(&self) -> Result<f32> {
        if self.inner.shape.numel() != 1 {
            return Err(Error::NotAScalar {
                shape: self.inner.shape.to_string(),
            });
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// The accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.read().unwrap().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.write().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut slot = self.inner.grad.write().unwrap();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// A view of the same values, cut loose from the recorded graph. Gradients
    /// never flow through a detached tensor.
    pub fn detach(&self) -> Tensor {
        Tensor::make_shared(self.inner.shape, Arc::clone(&self.inner.data), Op::Leaf, false)
    }

    /// Same buffer, same values, but marked as a trainable leaf.
    pub fn detach_as_param(&self) -> Tensor {
        Tensor::make_shared(self.inner.shape, Arc::clone(&self.inner.data), Op::Leaf, true)
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    pub(crate) fn reinterpret(&self, shape: Shape, op: Op, requires_grad: bool) -> Tensor {
        Tensor::make_shared(shape, Arc::clone(&self.inner.data), op, requires_grad)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }
}
