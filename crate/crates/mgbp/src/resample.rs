//! Differentiable bicubic resampling by whole-number factors.
//!
//! Both directions use the Catmull-Rom cubic kernel (a = -0.5). Sample
//! positions follow scale-factor semantics: output pixel `o` reads from input
//! position `(o + 0.5) * ratio - 0.5`. Downscaling stretches the kernel by the
//! factor so it acts as an antialiasing filter; upscaling uses the kernel at
//! its natural width. Tap weights are normalized to sum to one, and taps that
//! fall outside the image clamp to the nearest edge pixel.
//!
//! The operation is linear in the image, so its gradient is the exact adjoint:
//! the same taps applied as a scatter instead of a gather.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Op, Shape, Tensor};

/// Supported resampling factors.
pub const FACTORS: [u32; 4] = [2, 4, 8, 16];

/// Smallest input height or width the kernel can interpolate sensibly.
pub const MIN_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleDirection {
    Up,
    Down,
}

/// Catmull-Rom cubic kernel.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t < 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * A
    } else {
        0.0
    }
}

/// Precomputed taps for resampling one axis: for each output index, a span of
/// `(clamped input index, weight)` pairs whose weights sum to one.
pub struct AxisPlan {
    pub in_len: usize,
    pub out_len: usize,
    offsets: Vec<u32>,
    entries: Vec<(u32, f32)>,
}

impl AxisPlan {
    fn build(in_len: usize, out_len: usize, ratio: f64, stretch: f64) -> AxisPlan {
        let support = 2.0 * stretch;
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut entries = Vec::new();
        offsets.push(0u32);
        for o in 0..out_len {
            let x = (o as f64 + 0.5) * ratio - 0.5;
            let lo = (x - support).ceil() as i64;
            let hi = (x + support).floor() as i64;
            let mut weights = Vec::with_capacity((hi - lo + 1) as usize);
            let mut total = 0.0f64;
            for i in lo..=hi {
                let w = cubic((i as f64 - x) / stretch);
                weights.push(w);
                total += w;
            }
            for (i, w) in (lo..=hi).zip(weights) {
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, in_len as i64 - 1) as u32;
                entries.push((idx, (w / total) as f32));
            }
            offsets.push(entries.len() as u32);
        }
        AxisPlan {
            in_len,
            out_len,
            offsets,
            entries,
        }
    }

    fn up(in_len: usize, factor: u32) -> AxisPlan {
        AxisPlan::build(in_len, in_len * factor as usize, 1.0 / factor as f64, 1.0)
    }

    fn down(in_len: usize, factor: u32) -> AxisPlan {
        let out = in_len.div_ceil(factor as usize);
        AxisPlan::build(in_len, out, factor as f64, factor as f64)
    }

    pub(crate) fn taps(&self, o: usize) -> &[(u32, f32)] {
        &self.entries[self.offsets[o] as usize..self.offsets[o + 1] as usize]
    }
}

/// Resample the height axis of every plane: gather rows through the plan.
fn apply_height(input: &[f32], is: Shape, plan: &AxisPlan) -> (Vec<f32>, Shape) {
    let os = Shape::new(is.batch, is.channels, plan.out_len, is.width);
    let mut out = vec![0.0f32; os.numel()];
    let w = is.width;
    for bc in 0..is.batch * is.channels {
        let in_plane = &input[bc * is.height * w..][..is.height * w];
        let out_plane = &mut out[bc * plan.out_len * w..][..plan.out_len * w];
        for oy in 0..plan.out_len {
            let out_row = &mut out_plane[oy * w..][..w];
            for &(iy, wt) in plan.taps(oy) {
                let in_row = &in_plane[iy as usize * w..][..w];
                for (o, i) in out_row.iter_mut().zip(in_row) {
                    *o += wt * i;
                }
            }
        }
    }
    (out, os)
}

fn apply_width(input: &[f32], is: Shape, plan: &AxisPlan) -> (Vec<f32>, Shape) {
    let os = Shape::new(is.batch, is.channels, is.height, plan.out_len);
    let mut out = vec![0.0f32; os.numel()];
    for bc in 0..is.batch * is.channels {
        for y in 0..is.height {
            let in_row = &input[(bc * is.height + y) * is.width..][..is.width];
            let out_row = &mut out[(bc * is.height + y) * plan.out_len..][..plan.out_len];
            for (ox, o) in out_row.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for &(ix, wt) in plan.taps(ox) {
                    acc += wt * in_row[ix as usize];
                }
                *o = acc;
            }
        }
    }
    (out, os)
}

fn adjoint_height(grad: &[f32], os: Shape, plan: &AxisPlan) -> (Vec<f32>, Shape) {
    let is = Shape::new(os.batch, os.channels, plan.in_len, os.width);
    let mut out = vec![0.0f32; is.numel()];
    let w = os.width;
    for bc in 0..os.batch * os.channels {
        let g_plane = &grad[bc * plan.out_len * w..][..plan.out_len * w];
        let o_plane = &mut out[bc * plan.in_len * w..][..plan.in_len * w];
        for oy in 0..plan.out_len {
            let g_row = &g_plane[oy * w..][..w];
            for &(iy, wt) in plan.taps(oy) {
                let o_row = &mut o_plane[iy as usize * w..][..w];
                for (o, g) in o_row.iter_mut().zip(g_row) {
                    *o += wt * g;
                }
            }
        }
    }
    (out, is)
}

fn adjoint_width(grad: &[f32], os: Shape, plan: &AxisPlan) -> (Vec<f32>, Shape) {
    let is = Shape::new(os.batch, os.channels, os.height, plan.in_len);
    let mut out = vec![0.0f32; is.numel()];
    for bc in 0..os.batch * os.channels {
        for y in 0..os.height {
            let g_row = &grad[(bc * os.height + y) * plan.out_len..][..plan.out_len];
            let o_row = &mut out[(bc * os.height + y) * plan.in_len..][..plan.in_len];
            for (ox, g) in g_row.iter().enumerate() {
                for &(ix, wt) in plan.taps(ox) {
                    o_row[ix as usize] += wt * g;
                }
            }
        }
    }
    (out, is)
}

pub(crate) fn resample_forward(
    input: &[f32],
    is: Shape,
    rows: &AxisPlan,
    cols: &AxisPlan,
) -> (Vec<f32>, Shape) {
    let (mid, ms) = apply_height(input, is, rows);
    apply_width(&mid, ms, cols)
}

pub(crate) fn resample_adjoint(
    grad: &[f32],
    out_shape: Shape,
    _in_shape: Shape,
    rows: &AxisPlan,
    cols: &AxisPlan,
) -> Vec<f32> {
    let (mid, ms) = adjoint_width(grad, out_shape, cols);
    adjoint_height(&mid, ms, rows).0
}

fn check_factor(factor: u32) -> Result<()> {
    if !FACTORS.contains(&factor) {
        return Err(Error::invalid(
            "bicubic",
            format!("factor {} not in {:?}", factor, FACTORS),
        ));
    }
    Ok(())
}

/// Resample an image tensor by a whole-number factor in one direction.
///
/// Upscaling maps `HxW` to `(H*f)x(W*f)`; downscaling maps it to
/// `ceil(H/f) x ceil(W/f)`. Inputs smaller than [`MIN_DIM`] in either
/// direction are rejected.
pub fn bicubic(img: &Tensor, factor: u32, direction: ScaleDirection) -> Result<Tensor> {
    check_factor(factor)?;
    let s = img.shape();
    if s.height < MIN_DIM || s.width < MIN_DIM {
        return Err(Error::ImageTooSmall {
            height: s.height,
            width: s.width,
            min: MIN_DIM,
        });
    }
    let (rows, cols) = match direction {
        ScaleDirection::Up => (AxisPlan::up(s.height, factor), AxisPlan::up(s.width, factor)),
        ScaleDirection::Down => (
            AxisPlan::down(s.height, factor),
            AxisPlan::down(s.width, factor),
        ),
    };
    let (data, out_shape) = resample_forward(img.data(), s, &rows, &cols);
    Ok(Tensor::make(
        out_shape,
        data,
        Op::Resample {
            input: img.clone(),
            rows: Arc::new(rows),
            cols: Arc::new(cols),
        },
        img.requires_grad(),
    ))
}

/// Shorthand for [`bicubic`] downscaling.
pub fn downscale(img: &Tensor, factor: u32) -> Result<Tensor> {
    bicubic(img, factor, ScaleDirection::Down)
}

/// Shorthand for [`bicubic`] upscaling.
pub fn upscale(img: &Tensor, factor: u32) -> Result<Tensor> {
    bicubic(img, factor, ScaleDirection::Up)
}

/// Output size along one axis for the given direction.
pub fn scaled_len(len: usize, factor: u32, direction: ScaleDirection) -> usize {
    match direction {
        ScaleDirection::Up => len * factor as usize,
        ScaleDirection::Down => len.div_ceil(factor as usize),
    }
}
