//! Double-precision re-evaluation of recorded graphs.
//!
//! Gradient checks compare analytic gradients against central finite
//! differences of a scalar loss. Single-precision forward noise is of the
//! same order as the differences being measured, so the checks instead
//! re-evaluate the recorded graph in f64, substituting perturbed values for
//! chosen tensors. Nothing outside verification code should need this.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::resample::AxisPlan;
use crate::tensor::autograd::op_inputs;
use crate::tensor::conv::ConvSpec;
use crate::tensor::ops::log_sigmoid_f64;
use crate::tensor::{Op, Shape, Tensor};

impl Tensor {
    /// Recompute this scalar in f64 over the recorded graph.
    ///
    /// `substitutions` maps tensor ids (usually parameter leaves, see
    /// [`Tensor::id`]) to replacement buffers; a substituted tensor's
    /// recorded data is ignored and the buffer, which must have the tensor's
    /// element count, is used instead. Rectifier gates and extremum choices
    /// are re-decided from the f64 values, so the result is the same
    /// mathematical function at higher precision, suitable as a
    /// finite-difference reference.
    pub fn eval_f64(&self, substitutions: &HashMap<u64, Vec<f64>>) -> Result<f64> {
        if self.shape().numel() != 1 {
            return Err(Error::NotAScalar {
                shape: self.shape().to_string(),
            });
        }
        let order = topo_order(self);
        let mut memo: HashMap<u64, Arc<Vec<f64>>> = HashMap::new();
        for node in &order {
            let value = eval_node(node, substitutions, &memo)?;
            memo.insert(node.id(), value);
        }
        Ok(memo[&self.id()][0])
    }
}

/// All reachable nodes in dependency order. Ids increase monotonically at
/// creation, so ascending id order is a topological order.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut seen = HashMap::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if seen.contains_key(&t.id()) {
            continue;
        }
        for input in op_inputs(t.op()) {
            if !seen.contains_key(&input.id()) {
                stack.push(input);
            }
        }
        seen.insert(t.id(), t);
    }
    let mut nodes: Vec<Tensor> = seen.into_values().collect();
    nodes.sort_by_key(|t| t.id());
    nodes
}

fn eval_node(
    node: &Tensor,
    subs: &HashMap<u64, Vec<f64>>,
    memo: &HashMap<u64, Arc<Vec<f64>>>,
) -> Result<Arc<Vec<f64>>> {
    if let Some(replacement) = subs.get(&node.id()) {
        if replacement.len() != node.shape().numel() {
            return Err(Error::invalid(
                "eval_f64",
                format!(
                    "substitution for tensor {} has {} values, tensor has {}",
                    node.id(),
                    replacement.len(),
                    node.shape().numel()
                ),
            ));
        }
        return Ok(Arc::new(replacement.clone()));
    }
    let get = |t: &Tensor| -> Arc<Vec<f64>> { memo[&t.id()].clone() };
    let lift = |t: &Tensor, f: fn(f64) -> f64| -> Arc<Vec<f64>> {
        Arc::new(get(t).iter().map(|v| f(*v)).collect())
    };

    let out = match node.op() {
        Op::Leaf => Arc::new(node.data().iter().map(|v| *v as f64).collect()),
        Op::Relu(x) => lift(x, |v| v.max(0.0)),
        Op::Abs(x) => lift(x, f64::abs),
        Op::Square(x) => lift(x, |v| v * v),
        Op::Sqrt(x) => lift(x, f64::sqrt),
        Op::Exp(x) => lift(x, f64::exp),
        Op::Ln(x) => lift(x, f64::ln),
        Op::LogSigmoid(x) => lift(x, log_sigmoid_f64),
        Op::Scale(x, c) => {
            let c = *c as f64;
            Arc::new(get(x).iter().map(|v| v * c).collect())
        }
        Op::AddScalar(x, c) => {
            let c = *c as f64;
            Arc::new(get(x).iter().map(|v| v + c).collect())
        }
        Op::Add(a, b) => broadcast(a, &get(a), b, &get(b), |x, y| x + y),
        Op::Sub(a, b) => broadcast(a, &get(a), b, &get(b), |x, y| x - y),
        Op::Mul(a, b) => broadcast(a, &get(a), b, &get(b), |x, y| x * y),
        Op::Div(a, b) => broadcast(a, &get(a), b, &get(b), |x, y| x / y),
        Op::ConcatChannels(parts) => concat_channels(node.shape(), parts, memo),
        Op::SliceChannels(x, from) => slice_channels(node.shape(), x, &get(x), *from),
        Op::SliceBatch(x, from) => {
            let s = x.shape();
            let item = s.channels * s.height * s.width;
            let n = node.shape().numel();
            Arc::new(get(x)[from * item..from * item + n].to_vec())
        }
        Op::CropTo(x) => crop(node.shape(), x.shape(), &get(x)),
        Op::PadTo(x) => pad(node.shape(), x.shape(), &get(x)),
        Op::Shift(x, dy, dx) => shift(x.shape(), &get(x), *dy, *dx),
        Op::Conv {
            input,
            weights,
            bias,
            spec,
        } => conv(
            node.shape(),
            input.shape(),
            &get(input),
            &get(weights),
            &get(bias),
            spec,
        ),
        Op::Resample { input, rows, cols } => resample(input.shape(), &get(input), rows, cols),
        Op::SumAxis(x, axis) => sum_axis(node.shape(), x.shape(), &get(x), *axis),
        Op::ExtremumAxis {
            input,
            axis,
            take_max,
            ..
        } => extremum_axis(node.shape(), input.shape(), &get(input), *axis, *take_max),
        Op::SumAll(x) => Arc::new(vec![get(x).iter().sum()]),
        Op::Reshape(x) => get(x),
        Op::TransposeHw(x) => transpose_hw(x.shape(), &get(x)),
        Op::Matmul(a, b) => matmul(a.shape(), &get(a), b.shape(), &get(b)),
    };
    debug_assert_eq!(out.len(), node.shape().numel());
    Ok(out)
}

fn broadcast(
    a: &Tensor,
    ad: &[f64],
    b: &Tensor,
    bd: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Arc<Vec<f64>> {
    let sa = a.shape();
    let sb = b.shape();
    if sa == sb {
        return Arc::new(ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect());
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
    Arc::new(out)
}

fn concat_channels(
    os: Shape,
    parts: &[Tensor],
    memo: &HashMap<u64, Arc<Vec<f64>>>,
) -> Arc<Vec<f64>> {
    let mut out = Vec::with_capacity(os.numel());
    for b in 0..os.batch {
        for part in parts {
            let s = part.shape();
            let plane = s.channels * s.height * s.width;
            let data = &memo[&part.id()];
            out.extend_from_slice(&data[b * plane..(b + 1) * plane]);
        }
    }
    Arc::new(out)
}

fn slice_channels(os: Shape, x: &Tensor, xd: &[f64], from: usize) -> Arc<Vec<f64>> {
    let s = x.shape();
    let mut out = Vec::with_capacity(os.numel());
    for b in 0..os.batch {
        let start = s.index(b, from, 0, 0);
        out.extend_from_slice(&xd[start..start + os.channels * s.height * s.width]);
    }
    Arc::new(out)
}

fn crop(os: Shape, is: Shape, xd: &[f64]) -> Arc<Vec<f64>> {
    let mut out = Vec::with_capacity(os.numel());
    for b in 0..os.batch {
        for c in 0..os.channels {
            for y in 0..os.height {
                let base = is.index(b, c, y, 0);
                out.extend_from_slice(&xd[base..base + os.width]);
            }
        }
    }
    Arc::new(out)
}

fn pad(os: Shape, is: Shape, xd: &[f64]) -> Arc<Vec<f64>> {
    let mut out = vec![0.0f64; os.numel()];
    for b in 0..is.batch {
        for c in 0..is.channels {
            for y in 0..is.height {
                let src = is.index(b, c, y, 0);
                let dst = os.index(b, c, y, 0);
                out[dst..dst + is.width].copy_from_slice(&xd[src..src + is.width]);
            }
        }
    }
    Arc::new(out)
}

fn shift(s: Shape, xd: &[f64], dy: isize, dx: isize) -> Arc<Vec<f64>> {
    let mut out = Vec::with_capacity(s.numel());
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                let sy = (y as isize + dy).clamp(0, s.height as isize - 1) as usize;
                for x in 0..s.width {
                    let sx = (x as isize + dx).clamp(0, s.width as isize - 1) as usize;
                    out.push(xd[s.index(b, c, sy, sx)]);
                }
            }
        }
    }
    Arc::new(out)
}

fn conv(
    os: Shape,
    is: Shape,
    input: &[f64],
    weights: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
) -> Arc<Vec<f64>> {
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let mut out = vec![0.0f64; os.numel()];
    if spec.transposed {
        // Weight layout (in, out, k, k); scatter every input pixel.
        for b in 0..os.batch {
            for oc in 0..os.channels {
                let plane = &mut out[os.index(b, oc, 0, 0)..][..os.height * os.width];
                for v in plane.iter_mut() {
                    *v = bias[oc];
                }
                for ic in 0..is.channels {
                    for iy in 0..is.height {
                        for ix in 0..is.width {
                            let v = input[is.index(b, ic, iy, ix)];
                            if v == 0.0 {
                                continue;
                            }
                            for ky in 0..k {
                                let oy = iy * s + ky;
                                if oy < p || oy - p >= os.height {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ox = ix * s + kx;
                                    if ox < p || ox - p >= os.width {
                                        continue;
                                    }
                                    let w = weights[((ic * os.channels + oc) * k + ky) * k + kx];
                                    plane[(oy - p) * os.width + (ox - p)] += v * w;
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        // Weight layout (out, in, k, k); gather taps per output pixel.
        for b in 0..os.batch {
            for oc in 0..os.channels {
                for oy in 0..os.height {
                    for ox in 0..os.width {
                        let mut acc = bias[oc];
                        for ic in 0..is.channels {
                            for ky in 0..k {
                                let y = oy * s + ky;
                                if y < p || y - p >= is.height {
                                    continue;
                                }
                                for kx in 0..k {
                                    let x = ox * s + kx;
                                    if x < p || x - p >= is.width {
                                        continue;
                                    }
                                    acc += input[is.index(b, ic, y - p, x - p)]
                                        * weights[((oc * is.channels + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[os.index(b, oc, oy, ox)] = acc;
                    }
                }
            }
        }
    }
    Arc::new(out)
}

fn resample(is: Shape, input: &[f64], rows: &AxisPlan, cols: &AxisPlan) -> Arc<Vec<f64>> {
    // Height pass then width pass, mirroring the forward order.
    let mid_h = rows.out_len;
    let mut mid = vec![0.0f64; is.batch * is.channels * mid_h * is.width];
    for bc in 0..is.batch * is.channels {
        let in_plane = &input[bc * is.height * is.width..][..is.height * is.width];
        let mid_plane = &mut mid[bc * mid_h * is.width..][..mid_h * is.width];
        for oy in 0..mid_h {
            for &(iy, w) in rows.taps(oy) {
                let w = w as f64;
                let src = &in_plane[iy as usize * is.width..][..is.width];
                let dst = &mut mid_plane[oy * is.width..][..is.width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    let out_w = cols.out_len;
    let mut out = vec![0.0f64; is.batch * is.channels * mid_h * out_w];
    for bc in 0..is.batch * is.channels {
        for y in 0..mid_h {
            let src = &mid[(bc * mid_h + y) * is.width..][..is.width];
            let dst = &mut out[(bc * mid_h + y) * out_w..][..out_w];
            for (ox, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for &(ix, w) in cols.taps(ox) {
                    acc += w as f64 * src[ix as usize];
                }
                *d = acc;
            }
        }
    }
    Arc::new(out)
}

fn sum_axis(os: Shape, is: Shape, xd: &[f64], axis: usize) -> Arc<Vec<f64>> {
    let mut out = vec![0.0f64; os.numel()];
    for b in 0..is.batch {
        let b0 = if axis == 0 { 0 } else { b };
        for c in 0..is.channels {
            let c0 = if axis == 1 { 0 } else { c };
            for y in 0..is.height {
                let y0 = if axis == 2 { 0 } else { y };
                for x in 0..is.width {
                    let x0 = if axis == 3 { 0 } else { x };
                    out[os.index(b0, c0, y0, x0)] += xd[is.index(b, c, y, x)];
                }
            }
        }
    }
    Arc::new(out)
}

fn extremum_axis(os: Shape, is: Shape, xd: &[f64], axis: usize, take_max: bool) -> Arc<Vec<f64>> {
    // Re-decide the winner from the f64 values rather than reusing the
    // recorded winner, so the shadow stays the true min/max function.
    let mut out = vec![if take_max { f64::NEG_INFINITY } else { f64::INFINITY }; os.numel()];
    for b in 0..is.batch {
        let b0 = if axis == 0 { 0 } else { b };
        for c in 0..is.channels {
            let c0 = if axis == 1 { 0 } else { c };
            for y in 0..is.height {
                let y0 = if axis == 2 { 0 } else { y };
                for x in 0..is.width {
                    let x0 = if axis == 3 { 0 } else { x };
                    let v = xd[is.index(b, c, y, x)];
                    let slot = os.index(b0, c0, y0, x0);
                    if (take_max && v > out[slot]) || (!take_max && v < out[slot]) {
                        out[slot] = v;
                    }
                }
            }
        }
    }
    Arc::new(out)
}

fn transpose_hw(is: Shape, xd: &[f64]) -> Arc<Vec<f64>> {
    let os = Shape::new(is.batch, is.channels, is.width, is.height);
    let mut out = vec![0.0f64; os.numel()];
    for b in 0..is.batch {
        for c in 0..is.channels {
            for y in 0..is.height {
                for x in 0..is.width {
                    out[os.index(b, c, x, y)] = xd[is.index(b, c, y, x)];
                }
            }
        }
    }
    Arc::new(out)
}

fn matmul(sa: Shape, ad: &[f64], sb: Shape, bd: &[f64]) -> Arc<Vec<f64>> {
    let (m, k, n) = (sa.height, sa.width, sb.width);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += ad[i * k + t] * bd[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Arc::new(out)
}
