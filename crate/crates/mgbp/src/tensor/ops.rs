//! Differentiable tensor operations. Each method computes its result eagerly
//! and records the producing operation for the backward pass.

use crate::error::{Error, Result};
use crate::tensor::{Op, Shape, Tensor};
use std::sync::Arc;

/// True when `rhs` can broadcast onto `lhs`: every axis is either equal or 1
/// on the rhs side.
pub(crate) fn broadcastable(lhs: Shape, rhs: Shape) -> bool {
    (0..4).all(|a| rhs.axis(a) == lhs.axis(a) || rhs.axis(a) == 1)
}

fn binary_shapes(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if !broadcastable(a, b) {
        return Err(Error::shape(op, format!("{} does not broadcast onto {}", b, a)));
    }
    Ok(())
}

/// Apply `f(a_value, b_value)` elementwise with `b` broadcast onto `a`.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    let sa = a.shape();
    let sb = b.shape();
    let ad = a.data();
    let bd = b.data();
    if sa == sb {
        return ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect();
    }
    let mut out = Vec::with_capacity(sa.numel());
    for bb in 0..sa.batch {
        let b0 = if sb.batch == 1 { 0 } else { bb };
        for c in 0..sa.channels {
            let c0 = if sb.channels == 1 { 0 } else { c };
            for y in 0..sa.height {
                let y0 = if sb.height == 1 { 0 } else { y };
                for x in 0..sa.width {
                    let x0 = if sb.width == 1 { 0 } else { x };
                    out.push(f(ad[sa.index(bb, c, y, x)], bd[sb.index(b0, c0, y0, x0)]));
                }
            }
        }
    }
    out
}

/// Sum `grad` (shaped like `full`) down to `reduced` by summing over the axes
/// where `reduced` is 1. Accumulates in f64.
pub(crate) fn reduce_to_shape(grad: &[f32], full: Shape, reduced: Shape) -> Vec<f32> {
    if full == reduced {
        return grad.to_vec();
    }
    let mut out = vec![0.0f64; reduced.numel()];
    for b in 0..full.batch {
        let b0 = if reduced.batch == 1 { 0 } else { b };
        for c in 0..full.channels {
            let c0 = if reduced.channels == 1 { 0 } else { c };
            for y in 0..full.height {
                let y0 = if reduced.height == 1 { 0 } else { y };
                for x in 0..full.width {
                    let x0 = if reduced.width == 1 { 0 } else { x };
                    out[reduced.index(b0, c0, y0, x0)] += grad[full.index(b, c, y, x)] as f64;
                }
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

impl Tensor {
    fn unary(&self, op: Op, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.data().iter().map(|v| f(*v)).collect();
        Tensor::make(self.shape(), data, op, self.requires_grad())
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu(self.clone()), |v| v.max(0.0))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs(self.clone()), f32::abs)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Op::Square(self.clone()), |v| v * v)
    }

    /// Elementwise square root. The gradient at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt(self.clone()), f32::sqrt)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp(self.clone()), |v| (v as f64).exp() as f32)
    }

    /// Natural logarithm. The caller must keep inputs positive.
    pub fn ln(&self) -> Tensor {
        self.unary(Op::Ln(self.clone()), |v| (v as f64).ln() as f32)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&self) -> Tensor {
        self.unary(Op::LogSigmoid(self.clone()), |v| {
            log_sigmoid_f64(v as f64) as f32
        })
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.unary(Op::Scale(self.clone(), c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        self.unary(Op::AddScalar(self.clone(), c), |v| v + c)
    }

    /// Elementwise sum; `other` may broadcast onto `self`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary_shapes("add", self.shape(), other.shape())?;
        let data = broadcast_zip(self, other, |a, b| a + b);
        Ok(Tensor::make(
            self.shape(),
            data,
            Op::Add(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary_shapes("sub", self.shape(), other.shape())?;
        let data = broadcast_zip(self, other, |a, b| a - b);
        Ok(Tensor::make(
            self.shape(),
            data,
            Op::Sub(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary_shapes("mul", self.shape(), other.shape())?;
        let data = broadcast_zip(self, other, |a, b| a * b);
        Ok(Tensor::make(
            self.shape(),
            data,
            Op::Mul(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    /// Elementwise quotient. The caller must keep the divisor away from zero.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary_shapes("div", self.shape(), other.shape())?;
        let data = broadcast_zip(self, other, |a, b| a / b);
        Ok(Tensor::make(
            self.shape(),
            data,
            Op::Div(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    /// Stack tensors along the channel axis. All other dimensions must agree.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_channels", "no tensors given"));
        }
        let first = parts[0].shape();
        let mut channels = 0;
        for p in parts {
            let s = p.shape();
            if s.batch != first.batch || s.height != first.height || s.width != first.width {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{} does not align with {}", s, first),
                ));
            }
            channels += s.channels;
        }
        let shape = Shape::new(first.batch, channels, first.height, first.width);
        let plane = first.height * first.width;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..first.batch {
            for p in parts {
                let s = p.shape();
                let from = b * s.channels * plane;
                data.extend_from_slice(&p.data()[from..from + s.channels * plane]);
            }
        }
        let requires_grad = parts.iter().any(|p| p.requires_grad());
        Ok(Tensor::make(
            shape,
            data,
            Op::ConcatChannels(parts.to_vec()),
            requires_grad,
        ))
    }

    /// Channels `from..to` as a new tensor.
    pub fn slice_channels(&self, from: usize, to: usize) -> Result<Tensor> {
        let s = self.shape();
        if from >= to || to > s.channels {
            return Err(Error::invalid(
                "slice_channels",
                format!("range {}..{} out of {} channels", from, to, s.channels),
            ));
        }
        let plane = s.height * s.width;
        let shape = Shape::new(s.batch, to - from, s.height, s.width);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..s.batch {
            let base = (b * s.channels + from) * plane;
            data.extend_from_slice(&self.data()[base..base + (to - from) * plane]);
        }
        Ok(Tensor::make(
            shape,
            data,
            Op::SliceChannels(self.clone(), from),
            self.requires_grad(),
        ))
    }

    /// Batch items `from..to` as a new tensor.
    pub fn slice_batch(&self, from: usize, to: usize) -> Result<Tensor> {
        let s = self.shape();
        if from >= to || to > s.batch {
            return Err(Error::invalid(
                "slice_batch",
                format!("range {}..{} out of {} items", from, to, s.batch),
            ));
        }
        let item = s.channels * s.height * s.width;
        let shape = Shape::new(to - from, s.channels, s.height, s.width);
        let data = self.data()[from * item..to * item].to_vec();
        Ok(Tensor::make(
            shape,
            data,
            Op::SliceBatch(self.clone(), from),
            self.requires_grad(),
        ))
    }

    /// Keep the top-left `h x w` region of every plane.
    pub fn crop_to(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape();
        if h > s.height || w > s.width || h == 0 || w == 0 {
            return Err(Error::invalid(
                "crop_to",
                format!("cannot crop {} to {}x{}", s, h, w),
            ));
        }
        if h == s.height && w == s.width {
            return Ok(self.clone());
        }
        let shape = Shape::new(s.batch, s.channels, h, w);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..s.batch {
            for c in 0..s.channels {
                for y in 0..h {
                    let base = s.index(b, c, y, 0);
                    data.extend_from_slice(&self.data()[base..base + w]);
                }
            }
        }
        Ok(Tensor::make(
            shape,
            data,
            Op::CropTo(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Zero-pad on the bottom and right edges up to `h x w`.
    pub fn pad_to(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape();
        if h < s.height || w < s.width {
            return Err(Error::invalid(
                "pad_to",
                format!("cannot pad {} down to {}x{}", s, h, w),
            ));
        }
        if h == s.height && w == s.width {
            return Ok(self.clone());
        }
        let shape = Shape::new(s.batch, s.channels, h, w);
        let mut data = vec![0.0f32; shape.numel()];
        for b in 0..s.batch {
            for c in 0..s.channels {
                for y in 0..s.height {
                    let src = s.index(b, c, y, 0);
                    let dst = shape.index(b, c, y, 0);
                    data[dst..dst + s.width].copy_from_slice(&self.data()[src..src + s.width]);
                }
            }
        }
        Ok(Tensor::make(
            shape,
            data,
            Op::PadTo(self.clone()),
            self.requires_grad(),
        ))
    }

    /// Translate by `(dy, dx)` with edge clamping: `out[y][x] =
    /// in[clamp(y+dy)][clamp(x+dx)]`.
    pub fn shift(&self, dy: isize, dx: isize) -> Tensor {
        let s = self.shape();
        let mut data = Vec::with_capacity(s.numel());
        for b in 0..s.batch {
            for c in 0..s.channels {
                for y in 0..s.height {
                    let sy = (y as isize + dy).clamp(0, s.height as isize - 1) as usize;
                    for x in 0..s.width {
                        let sx = (x as isize + dx).clamp(0, s.width as isize - 1) as usize;
                        data.push(self.data()[s.index(b, c, sy, sx)]);
                    }
                }
            }
        }
        Tensor::make(
            s,
            data,
            Op::Shift(self.clone(), dy, dx),
            self.requires_grad(),
        )
    }

    /// Sum along one axis, keeping it with size 1. Accumulates in f64.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis > 3 {
            return Err(Error::invalid("sum_axis", format!("axis {} out of range", axis)));
        }
        let s = self.shape();
        let mut rs = s;
        match axis {
            0 => rs.batch = 1,
            1 => rs.channels = 1,
            2 => rs.height = 1,
            _ => rs.width = 1,
        }
        let mut acc = vec![0.0f64; rs.numel()];
        for b in 0..s.batch {
            let b0 = if axis == 0 { 0 } else { b };
            for c in 0..s.channels {
                let c0 = if axis == 1 { 0 } else { c };
                for y in 0..s.height {
                    let y0 = if axis == 2 { 0 } else { y };
                    for x in 0..s.width {
                        let x0 = if axis == 3 { 0 } else { x };
                        acc[rs.index(b0, c0, y0, x0)] += self.data()[s.index(b, c, y, x)] as f64;
                    }
                }
            }
        }
        let data = acc.into_iter().map(|v| v as f32).collect();
        Ok(Tensor::make(
            rs,
            data,
            Op::SumAxis(self.clone(), axis),
            self.requires_grad(),
        ))
    }

    /// Mean along one axis, keeping it with size 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape().axis(axis);
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f32))
    }

    fn extremum_axis(&self, axis: usize, take_max: bool) -> Result<Tensor> {
        if axis > 3 {
            return Err(Error::invalid("extremum_axis", format!("axis {} out of range", axis)));
        }
        let s = self.shape();
        let mut rs = s;
        match axis {
            0 => rs.batch = 1,
            1 => rs.channels = 1,
            2 => rs.height = 1,
            _ => rs.width = 1,
        }
        let mut best = vec![if take_max { f32::NEG_INFINITY } else { f32::INFINITY }; rs.numel()];
        let mut arg = vec![0u32; rs.numel()];
        for b in 0..s.batch {
            let b0 = if axis == 0 { 0 } else { b };
            for c in 0..s.channels {
                let c0 = if axis == 1 { 0 } else { c };
                for y in 0..s.height {
                    let y0 = if axis == 2 { 0 } else { y };
                    for x in 0..s.width {
                        let x0 = if axis == 3 { 0 } else { x };
                        let pos = match axis {
                            0 => b,
                            1 => c,
                            2 => y,
                            _ => x,
                        } as u32;
                        let v = self.data()[s.index(b, c, y, x)];
                        let slot = rs.index(b0, c0, y0, x0);
                        let better = if take_max { v > best[slot] } else { v < best[slot] };
                        if better {
                            best[slot] = v;
                            arg[slot] = pos;
                        }
                    }
                }
            }
        }
        Ok(Tensor::make(
            rs,
            best,
            Op::ExtremumAxis {
                input: self.clone(),
                axis,
                arg: Arc::new(arg),
                take_max,
            },
            self.requires_grad(),
        ))
    }

    /// Minimum along one axis, keeping it with size 1. The gradient routes to
    /// the first position that attains the minimum.
    pub fn min_axis(&self, axis: usize) -> Result<Tensor> {
        self.extremum_axis(axis, false)
    }

    /// Maximum along one axis, keeping it with size 1.
    pub fn max_axis(&self, axis: usize) -> Result<Tensor> {
        self.extremum_axis(axis, true)
    }

    /// Sum of all elements as a (1,1,1,1) tensor. Accumulates in f64.
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().map(|v| *v as f64).sum();
        Tensor::make(
            Shape::new(1, 1, 1, 1),
            vec![total as f32],
            Op::SumAll(self.clone()),
            self.requires_grad(),
        )
    }

    /// Mean of all elements as a (1,1,1,1) tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.shape().numel();
        self.sum_all().scale(1.0 / n as f32)
    }

    /// Reinterpret the same values under a new shape with equal element count.
    /// Shares the underlying buffer.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape().numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} and {} differ in element count", self.shape(), shape),
            ));
        }
        Ok(self.reinterpret(shape, Op::Reshape(self.clone()), self.requires_grad()))
    }

    /// Swap the height and width axes.
    pub fn transpose_hw(&self) -> Tensor {
        let s = self.shape();
        let shape = Shape::new(s.batch, s.channels, s.width, s.height);
        let mut data = Vec::with_capacity(s.numel());
        for b in 0..s.batch {
            for c in 0..s.channels {
                for x in 0..s.width {
                    for y in 0..s.height {
                        data.push(self.data()[s.index(b, c, y, x)]);
                    }
                }
            }
        }
        Tensor::make(shape, data, Op::TransposeHw(self.clone()), self.requires_grad())
    }

    /// Matrix product of two (1,1,M,K) and (1,1,K,N) tensors. Accumulates each
    /// output element in f64.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let a = self.shape();
        let b = other.shape();
        if a.batch != 1 || a.channels != 1 || b.batch != 1 || b.channels != 1 {
            return Err(Error::shape("matmul", "operands must be (1,1,rows,cols)".to_string()));
        }
        if a.width != b.height {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {} vs {}", a, b),
            ));
        }
        let (m, k, n) = (a.height, a.width, b.width);
        let ad = self.data();
        let bd = other.data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += (ad[i * k + t] as f64) * (bd[t * n + j] as f64);
                }
                data[i * n + j] = acc as f32;
            }
        }
        Ok(Tensor::make(
            Shape::new(1, 1, m, n),
            data,
            Op::Matmul(self.clone(), other.clone()),
            self.requires_grad() || other.requires_grad(),
        ))
    }
}

pub fn log_sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Derivative of `log_sigmoid`: `sigmoid(-x)`, computed stably.
pub(crate) fn sigmoid_neg_f64(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}
