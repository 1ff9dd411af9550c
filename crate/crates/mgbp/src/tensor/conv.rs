//! 2-d convolution kernels: forward, input gradient, and weight gradient for
//! both normal (cross-correlation) and transposed variants.
//!
//! Weight layout is `(out_channels, in_channels, k, k)` for normal convolution
//! and `(in_channels, out_channels, k, k)` for transposed convolution, encoded
//! in the tensor's batch/channels dimensions. No kernel flip is applied: the
//! forward pass computes a cross-correlation.

use crate::error::{Error, Result};
use crate::tensor::{Op, Shape, Tensor};

/// Static description of one convolution: channel counts, square kernel size,
/// stride, zero padding, and whether the operator is transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn normal(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: false,
        }
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            transposed: true,
        }
    }

    /// Output height and width for an input of the given size.
    pub fn out_hw(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::invalid("conv", "stride must be positive"));
        }
        if self.kernel == 0 {
            return Err(Error::invalid("conv", "kernel must be positive"));
        }
        if self.transposed {
            let oh = (height - 1) * self.stride + self.kernel;
            let ow = (width - 1) * self.stride + self.kernel;
            if oh < 2 * self.padding || ow < 2 * self.padding {
                return Err(Error::shape(
                    "conv_transposed",
                    format!(
                        "padding {} too large for {}x{} output before trim",
                        self.padding, oh, ow
                    ),
                ));
            }
            Ok((oh - 2 * self.padding, ow - 2 * self.padding))
        } else {
            let ph = height + 2 * self.padding;
            let pw = width + 2 * self.padding;
            if ph < self.kernel || pw < self.kernel {
                return Err(Error::shape(
                    "conv",
                    format!(
                        "input {}x{} with padding {} is smaller than kernel {}",
                        height, width, self.padding, self.kernel
                    ),
                ));
            }
            Ok((
                (ph - self.kernel) / self.stride + 1,
                (pw - self.kernel) / self.stride + 1,
            ))
        }
    }

    /// Expected weight tensor shape.
    pub fn weight_shape(&self) -> Shape {
        if self.transposed {
            Shape::new(self.in_channels, self.out_channels, self.kernel, self.kernel)
        } else {
            Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    /// Trainable parameter count: kernel taps plus biases.
    pub fn param_count(&self) -> u64 {
        (self.in_channels * self.out_channels * self.kernel * self.kernel + self.out_channels)
            as u64
    }

    /// Multiply-accumulate count for an input of the given spatial size.
    pub fn mac_count(&self, height: usize, width: usize) -> Result<u64> {
        let kk = (self.kernel * self.kernel) as u64;
        let ch = (self.in_channels * self.out_channels) as u64;
        if self.transposed {
            Ok((height * width) as u64 * ch * kk)
        } else {
            let (oh, ow) = self.out_hw(height, width)?;
            Ok((oh * ow) as u64 * ch * kk)
        }
    }
}

fn check_operands(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<()> {
    let is = input.shape();
    if is.channels != spec.in_channels {
        return Err(Error::shape(
            "conv",
            format!(
                "input has {} channels, spec wants {}",
                is.channels, spec.in_channels
            ),
        ));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv",
            format!(
                "weights are {}, spec wants {}",
                weights.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if bias.shape() != spec.bias_shape() {
        return Err(Error::shape(
            "conv",
            format!("bias is {}, spec wants {}", bias.shape(), spec.bias_shape()),
        ));
    }
    Ok(())
}

/// Strided cross-correlation with zero padding and per-channel bias.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if spec.transposed {
        return Err(Error::invalid("conv2d", "spec is transposed; use conv2d_transposed"));
    }
    check_operands(input, weights, bias, spec)?;
    let is = input.shape();
    let (oh, ow) = spec.out_hw(is.height, is.width)?;
    let out_shape = Shape::new(is.batch, spec.out_channels, oh, ow);
    let data = conv2d_forward(
        input.data(),
        is,
        weights.data(),
        bias.data(),
        spec,
        oh,
        ow,
    );
    let requires_grad = input.requires_grad() || weights.requires_grad() || bias.requires_grad();
    Ok(Tensor::make(
        out_shape,
        data,
        Op::Conv {
            input: input.clone(),
            weights: weights.clone(),
            bias: bias.clone(),
            spec: *spec,
        },
        requires_grad,
    ))
}

/// Transposed (fractionally strided) convolution: the adjoint of [`conv2d`]
/// with the same stride and padding, plus a per-channel bias.
pub fn conv2d_transposed(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &ConvSpec,
) -> Result<Tensor> {
    if !spec.transposed {
        return Err(Error::invalid("conv2d_transposed", "spec is not transposed; use conv2d"));
    }
    check_operands(input, weights, bias, spec)?;
    let is = input.shape();
    let (oh, ow) = spec.out_hw(is.height, is.width)?;
    let out_shape = Shape::new(is.batch, spec.out_channels, oh, ow);
    let data = convt_forward(
        input.data(),
        is,
        weights.data(),
        bias.data(),
        spec,
        oh,
        ow,
    );
    let requires_grad = input.requires_grad() || weights.requires_grad() || bias.requires_grad();
    Ok(Tensor::make(
        out_shape,
        data,
        Op::Conv {
            input: input.clone(),
            weights: weights.clone(),
            bias: bias.clone(),
            spec: *spec,
        },
        requires_grad,
    ))
}

/// Range of output positions `o` with `0 <= o*stride + k - padding < limit`.
fn valid_range(stride: usize, k: usize, padding: usize, limit: usize, out_len: usize) -> (usize, usize) {
    // Smallest o with o*stride + k - padding >= 0.
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // Largest o with o*stride + k - padding <= limit - 1, exclusive bound.
    let hi_in = limit + padding;
    let hi = if hi_in > k {
        ((hi_in - 1 - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(out_len), hi)
}

pub(crate) fn conv2d_forward(
    input: &[f32],
    is: Shape,
    weights: &[f32],
    bias: &[f32],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (h, w) = (is.height, is.width);
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut out = vec![0.0f32; is.batch * spec.out_channels * oh * ow];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            let out_plane = &mut out[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            let bv = bias[oc];
            out_plane.fill(bv);
            for ic in 0..spec.in_channels {
                let in_plane = &input[(b * is.channels + ic) * h * w..][..h * w];
                let w_base = ((oc * spec.in_channels + ic) * kk) * kk;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let wv = weights[w_base + ky * kk + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(s, kx, p, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * w..][..w];
                            let out_row = &mut out_plane[oy * ow..][..ow];
                            if s == 1 {
                                // Contiguous in both buffers; offset is x + kx - p.
                                let off = kx as isize - p as isize;
                                let src = &in_row[(x0 as isize + off) as usize..];
                                for (o, i) in out_row[x0..x1].iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    out_row[ox] += wv * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] with respect to its input: scatter the output
/// gradient back through the kernel taps.
pub(crate) fn conv2d_input_grad(
    grad_out: &[f32],
    is: Shape,
    weights: &[f32],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (h, w) = (is.height, is.width);
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut grad_in = vec![0.0f32; is.batch * is.channels * h * w];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            let g_plane = &grad_out[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            for ic in 0..spec.in_channels {
                let gi_plane = &mut grad_in[(b * is.channels + ic) * h * w..][..h * w];
                let w_base = ((oc * spec.in_channels + ic) * kk) * kk;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let wv = weights[w_base + ky * kk + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(s, kx, p, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let gi_row = &mut gi_plane[iy as usize * w..][..w];
                            let g_row = &g_plane[oy * ow..][..ow];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                let dst = &mut gi_row[(x0 as isize + off) as usize..];
                                for (d, g) in dst.iter_mut().zip(&g_row[x0..x1]) {
                                    *d += wv * g;
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    gi_row[ix as usize] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of [`conv2d`] with respect to its weights. Each tap is a large dot
/// product, accumulated in f64 to keep the analytic gradient close to exact.
pub(crate) fn conv2d_weight_grad(
    grad_out: &[f32],
    input: &[f32],
    is: Shape,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (h, w) = (is.height, is.width);
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut grad_w = vec![0.0f64; spec.out_channels * spec.in_channels * kk * kk];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            let g_plane = &grad_out[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            for ic in 0..spec.in_channels {
                let in_plane = &input[(b * is.channels + ic) * h * w..][..h * w];
                let w_base = ((oc * spec.in_channels + ic) * kk) * kk;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let (x0, x1) = valid_range(s, kx, p, w, ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0f64;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * w..][..w];
                            let g_row = &g_plane[oy * ow..][..ow];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                let src = &in_row[(x0 as isize + off) as usize..];
                                for (g, i) in g_row[x0..x1].iter().zip(src) {
                                    acc += (*g as f64) * (*i as f64);
                                }
                            } else {
                                for ox in x0..x1 {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    acc += (g_row[ox] as f64) * (in_row[ix as usize] as f64);
                                }
                            }
                        }
                        grad_w[w_base + ky * kk + kx] += acc;
                    }
                }
            }
        }
    }
    grad_w.into_iter().map(|v| v as f32).collect()
}

/// Per-channel sum of the output gradient, for the bias.
pub(crate) fn conv_bias_grad(grad_out: &[f32], batch: usize, out_channels: usize, plane: usize) -> Vec<f32> {
    let mut grad_b = vec![0.0f64; out_channels];
    for b in 0..batch {
        for oc in 0..out_channels {
            let g_plane = &grad_out[(b * out_channels + oc) * plane..][..plane];
            grad_b[oc] += g_plane.iter().map(|v| *v as f64).sum::<f64>();
        }
    }
    grad_b.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn convt_forward(
    input: &[f32],
    is: Shape,
    weights: &[f32],
    bias: &[f32],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (h, w) = (is.height, is.width);
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut out = vec![0.0f32; is.batch * spec.out_channels * oh * ow];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            let out_plane = &mut out[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            out_plane.fill(bias[oc]);
            for ic in 0..spec.in_channels {
                let in_plane = &input[(b * is.channels + ic) * h * w..][..h * w];
                let w_base = ((ic * spec.out_channels + oc) * kk) * kk;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let wv = weights[w_base + ky * kk + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // Input position i writes output o = i*s + k - p.
                        let (x0, x1) = valid_range(s, kx, p, ow, w);
                        if x0 >= x1 {
                            continue;
                        }
                        for iy in 0..h {
                            let oy = (iy * s + ky) as isize - p as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy * w..][..w];
                            let out_row = &mut out_plane[oy as usize * ow..][..ow];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                let dst = &mut out_row[(x0 as isize + off) as usize..];
                                for (o, i) in dst.iter_mut().zip(&in_row[x0..x1]) {
                                    *o += wv * i;
                                }
                            } else {
                                for ix in x0..x1 {
                                    let ox = (ix * s + kx) as isize - p as isize;
                                    out_row[ox as usize] += wv * in_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv2d_transposed`] with respect to its input: a gather,
/// structurally the same as a forward convolution of the output gradient.
pub(crate) fn convt_input_grad(
    grad_out: &[f32],
    is: Shape,
    weights: &[f32],
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (h, w) = (is.height, is.width);
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut grad_in = vec![0.0f32; is.batch * is.channels * h * w];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            let g_plane = &grad_out[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            for ic in 0..spec.in_channels {
                let gi_plane = &mut grad_in[(b * is.channels + ic) * h * w..][..h * w];
                let w_base = ((ic * spec.out_channels + oc) * kk) * kk;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let wv = weights[w_base + ky * kk + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(s, kx, p, ow, w);
                        if x0 >= x1 {
                            continue;
                        }
                        for iy in 0..h {
                            let oy = (iy * s + ky) as isize - p as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let gi_row = &mut gi_plane[iy * w..][..w];
                            let g_row = &g_plane[oy as usize * ow..][..ow];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                let src = &g_row[(x0 as isize + off) as usize..];
                                for (d, g) in gi_row[x0..x1].iter_mut().zip(src) {
                                    *d += wv * g;
                                }
                            } else {
                                for ix in x0..x1 {
                                    let ox = (ix * s + kx) as isize - p as isize;
                                    gi_row[ix] += wv * g_row[ox as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradient of [`conv2d_transposed`] with respect to its weights.
pub(crate) fn convt_weight_grad(
    grad_out: &[f32],
    input: &[f32],
    is: Shape,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (h, w) = (is.height, is.width);
    let (kk, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut grad_w = vec![0.0f64; spec.in_channels * spec.out_channels * kk * kk];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            let g_plane = &grad_out[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            for ic in 0..spec.in_channels {
                let in_plane = &input[(b * is.channels + ic) * h * w..][..h * w];
                let w_base = ((ic * spec.out_channels + oc) * kk) * kk;
                for ky in 0..kk {
                    for kx in 0..kk {
                        let (x0, x1) = valid_range(s, kx, p, ow, w);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = 0.0f64;
                        for iy in 0..h {
                            let oy = (iy * s + ky) as isize - p as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy * w..][..w];
                            let g_row = &g_plane[oy as usize * ow..][..ow];
                            if s == 1 {
                                let off = kx as isize - p as isize;
                                let src = &g_row[(x0 as isize + off) as usize..];
                                for (i, g) in in_row[x0..x1].iter().zip(src) {
                                    acc += (*i as f64) * (*g as f64);
                                }
                            } else {
                                for ix in x0..x1 {
                                    let ox = (ix * s + kx) as isize - p as isize;
                                    acc += (in_row[ix] as f64) * (g_row[ox as usize] as f64);
                                }
                            }
                        }
                        grad_w[w_base + ky * kk + kx] += acc;
                    }
                }
            }
        }
    }
    grad_w.into_iter().map(|v| v as f32).collect()
}
