//! Reverse-mode differentiation over the recorded operation graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::conv;
use crate::tensor::ops::{reduce_to_shape, sigmoid_neg_f64};
use crate::tensor::{Op, Shape, Tensor};

/// Elementwise `f(g, a, b)` over the full shape `sa`, with `b` broadcast.
fn combine(g: &[f32], a: &[f32], sa: Shape, b: &[f32], sb: Shape, f: impl Fn(f32, f32, f32) -> f32) -> Vec<f32> {
    if sa == sb {
        return g
            .iter()
            .zip(a)
            .zip(b)
            .map(|((gi, ai), bi)| f(*gi, *ai, *bi))
            .collect();
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
                    let i = sa.index(bb, c, y, x);
                    out.push(f(g[i], a[i], b[sb.index(b0, c0, y0, x0)]));
                }
            }
        }
    }
    out
}

struct Tape {
    grads: HashMap<u64, Vec<f32>>,
}

impl Tape {
    fn add(&mut self, t: &Tensor, delta: Vec<f32>) {
        if !t.requires_grad() {
            return;
        }
        match self.grads.get_mut(&t.id()) {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => {
                self.grads.insert(t.id(), delta);
            }
        }
    }
}

impl Tensor {
    /// Accumulate `d(self)/d(t)` into the `grad` slot of every tensor in the
    /// recorded graph that requires gradients. `self` must be a scalar.
    /// Repeated calls without [`Tensor::clear_grad`] keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.shape().numel() != 1 {
            return Err(Error::NotAScalar {
                shape: self.shape().to_string(),
            });
        }
        if !self.requires_grad() {
            return Err(Error::DetachedGraph);
        }

        // Gather the grad-requiring subgraph. A tensor that does not require
        // gradients has no gradient-requiring inputs, so pruning is safe.
        let mut nodes: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            for input in op_inputs(t.op()) {
                if input.requires_grad() && !nodes.contains_key(&input.id()) {
                    stack.push(input);
                }
            }
            nodes.insert(t.id(), t);
        }

        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut tape = Tape {
            grads: HashMap::new(),
        };
        tape.grads.insert(self.id(), vec![1.0]);

        for id in order {
            let Some(g) = tape.grads.remove(&id) else {
                continue;
            };
            let node = &nodes[&id];
            node.accumulate_grad(&g);
            step(node, &g, &mut tape);
        }
        Ok(())
    }
}

pub(crate) fn op_inputs(op: &Op) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Relu(x)
        | Op::Abs(x)
        | Op::Square(x)
        | Op::Sqrt(x)
        | Op::Exp(x)
        | Op::Ln(x)
        | Op::LogSigmoid(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x, _)
        | Op::SliceChannels(x, _)
        | Op::SliceBatch(x, _)
        | Op::CropTo(x)
        | Op::PadTo(x)
        | Op::Shift(x, _, _)
        | Op::SumAxis(x, _)
        | Op::SumAll(x)
        | Op::Reshape(x)
        | Op::TransposeHw(x) => vec![x.clone()],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::ConcatChannels(parts) => parts.clone(),
        Op::Conv {
            input,
            weights,
            bias,
            ..
        } => vec![input.clone(), weights.clone(), bias.clone()],
        Op::Resample { input, .. } => vec![input.clone()],
        Op::ExtremumAxis { input, .. } => vec![input.clone()],
    }
}

fn step(node: &Tensor, g: &[f32], tape: &mut Tape) {
    match node.op() {
        Op::Leaf => {}
        Op::Relu(x) => {
            let d = x
                .data()
                .iter()
                .zip(g)
                .map(|(xi, gi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect();
            tape.add(x, d);
        }
        Op::Abs(x) => {
            let d = x
                .data()
                .iter()
                .zip(g)
                .map(|(xi, gi)| {
                    if *xi > 0.0 {
                        *gi
                    } else if *xi < 0.0 {
                        -*gi
                    } else {
                        0.0
                    }
                })
                .collect();
            tape.add(x, d);
        }
        Op::Square(x) => {
            let d = x.data().iter().zip(g).map(|(xi, gi)| 2.0 * xi * gi).collect();
            tape.add(x, d);
        }
        Op::Sqrt(x) => {
            // node holds sqrt(x); treat the kink at zero as zero slope.
            let d = node
                .data()
                .iter()
                .zip(g)
                .map(|(oi, gi)| if *oi > 0.0 { 0.5 / oi * gi } else { 0.0 })
                .collect();
            tape.add(x, d);
        }
        Op::Exp(x) => {
            let d = node.data().iter().zip(g).map(|(oi, gi)| oi * gi).collect();
            tape.add(x, d);
        }
        Op::Ln(x) => {
            let d = x.data().iter().zip(g).map(|(xi, gi)| gi / xi).collect();
            tape.add(x, d);
        }
        Op::LogSigmoid(x) => {
            let d = x
                .data()
                .iter()
                .zip(g)
                .map(|(xi, gi)| (sigmoid_neg_f64(*xi as f64) * (*gi as f64)) as f32)
                .collect();
            tape.add(x, d);
        }
        Op::Scale(x, c) => {
            let c = *c;
            tape.add(x, g.iter().map(|gi| gi * c).collect());
        }
        Op::AddScalar(x, _) => {
            tape.add(x, g.to_vec());
        }
        Op::Add(a, b) => {
            tape.add(a, g.to_vec());
            if b.requires_grad() {
                tape.add(b, reduce_to_shape(g, a.shape(), b.shape()));
            }
        }
        Op::Sub(a, b) => {
            tape.add(a, g.to_vec());
            if b.requires_grad() {
                let mut d = reduce_to_shape(g, a.shape(), b.shape());
                for v in &mut d {
                    *v = -*v;
                }
                tape.add(b, d);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let d = combine(g, a.data(), a.shape(), b.data(), b.shape(), |g, _, bv| g * bv);
                tape.add(a, d);
            }
            if b.requires_grad() {
                let full: Vec<f32> = g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect();
                tape.add(b, reduce_to_shape(&full, a.shape(), b.shape()));
            }
        }
        Op::Div(a, b) => {
            if a.requires_grad() {
                let d = combine(g, a.data(), a.shape(), b.data(), b.shape(), |g, _, bv| g / bv);
                tape.add(a, d);
            }
            if b.requires_grad() {
                let full = combine(g, a.data(), a.shape(), b.data(), b.shape(), |g, av, bv| {
                    -g * av / (bv * bv)
                });
                tape.add(b, reduce_to_shape(&full, a.shape(), b.shape()));
            }
        }
        Op::ConcatChannels(parts) => {
            let s = node.shape();
            let plane = s.height * s.width;
            let mut from = 0;
            for p in parts {
                let pc = p.shape().channels;
                if p.requires_grad() {
                    let mut d = Vec::with_capacity(p.shape().numel());
                    for b in 0..s.batch {
                        let base = (b * s.channels + from) * plane;
                        d.extend_from_slice(&g[base..base + pc * plane]);
                    }
                    tape.add(p, d);
                }
                from += pc;
            }
        }
        Op::SliceChannels(x, from) => {
            let xs = x.shape();
            let os = node.shape();
            let plane = xs.height * xs.width;
            let mut d = vec![0.0f32; xs.numel()];
            for b in 0..xs.batch {
                let dst = (b * xs.channels + from) * plane;
                let src = b * os.channels * plane;
                d[dst..dst + os.channels * plane]
                    .copy_from_slice(&g[src..src + os.channels * plane]);
            }
            tape.add(x, d);
        }
        Op::SliceBatch(x, from) => {
            let xs = x.shape();
            let item = xs.channels * xs.height * xs.width;
            let mut d = vec![0.0f32; xs.numel()];
            d[from * item..from * item + g.len()].copy_from_slice(g);
            tape.add(x, d);
        }
        Op::CropTo(x) => {
            let xs = x.shape();
            let os = node.shape();
            let mut d = vec![0.0f32; xs.numel()];
            for b in 0..os.batch {
                for c in 0..os.channels {
                    for y in 0..os.height {
                        let src = os.index(b, c, y, 0);
                        let dst = xs.index(b, c, y, 0);
                        d[dst..dst + os.width].copy_from_slice(&g[src..src + os.width]);
                    }
                }
            }
            tape.add(x, d);
        }
        Op::PadTo(x) => {
            let xs = x.shape();
            let os = node.shape();
            let mut d = Vec::with_capacity(xs.numel());
            for b in 0..xs.batch {
                for c in 0..xs.channels {
                    for y in 0..xs.height {
                        let src = os.index(b, c, y, 0);
                        d.extend_from_slice(&g[src..src + xs.width]);
                    }
                }
            }
            tape.add(x, d);
        }
        Op::Shift(x, dy, dx) => {
            let s = x.shape();
            let mut d = vec![0.0f32; s.numel()];
            for b in 0..s.batch {
                for c in 0..s.channels {
                    for y in 0..s.height {
                        let sy = (y as isize + dy).clamp(0, s.height as isize - 1) as usize;
                        for xx in 0..s.width {
                            let sx = (xx as isize + dx).clamp(0, s.width as isize - 1) as usize;
                            d[s.index(b, c, sy, sx)] += g[s.index(b, c, y, xx)];
                        }
                    }
                }
            }
            tape.add(x, d);
        }
        Op::Conv {
            input,
            weights,
            bias,
            spec,
        } => {
            let is = input.shape();
            let os = node.shape();
            if input.requires_grad() {
                let d = if spec.transposed {
                    conv::convt_input_grad(g, is, weights.data(), spec, os.height, os.width)
                } else {
                    conv::conv2d_input_grad(g, is, weights.data(), spec, os.height, os.width)
                };
                tape.add(input, d);
            }
            if weights.requires_grad() {
                let d = if spec.transposed {
                    conv::convt_weight_grad(g, input.data(), is, spec, os.height, os.width)
                } else {
                    conv::conv2d_weight_grad(g, input.data(), is, spec, os.height, os.width)
                };
                tape.add(weights, d);
            }
            if bias.requires_grad() {
                let d = conv::conv_bias_grad(g, os.batch, os.channels, os.height * os.width);
                tape.add(bias, d);
            }
        }
        Op::Resample { input, rows, cols } => {
            let d = resample::resample_adjoint(g, node.shape(), input.shape(), rows, cols);
            tape.add(input, d);
        }
        Op::SumAxis(x, axis) => {
            let xs = x.shape();
            let os = node.shape();
            let mut d = Vec::with_capacity(xs.numel());
            for b in 0..xs.batch {
                let b0 = if *axis == 0 { 0 } else { b };
                for c in 0..xs.channels {
                    let c0 = if *axis == 1 { 0 } else { c };
                    for y in 0..xs.height {
                        let y0 = if *axis == 2 { 0 } else { y };
                        for xx in 0..xs.width {
                            let x0 = if *axis == 3 { 0 } else { xx };
                            d.push(g[os.index(b0, c0, y0, x0)]);
                        }
                    }
                }
            }
            tape.add(x, d);
        }
        Op::ExtremumAxis {
            input, axis, arg, ..
        } => {
            let xs = input.shape();
            let os = node.shape();
            let mut d = vec![0.0f32; xs.numel()];
            for b in 0..os.batch {
                for c in 0..os.channels {
                    for y in 0..os.height {
                        for x in 0..os.width {
                            let slot = os.index(b, c, y, x);
                            let pos = arg[slot] as usize;
                            let (mut ib, mut ic, mut iy, mut ix) = (b, c, y, x);
                            match *axis {
                                0 => ib = pos,
                                1 => ic = pos,
                                2 => iy = pos,
                                _ => ix = pos,
                            }
                            d[xs.index(ib, ic, iy, ix)] += g[slot];
                        }
                    }
                }
            }
            tape.add(input, d);
        }
        Op::SumAll(x) => {
            tape.add(x, vec![g[0]; x.shape().numel()]);
        }
        Op::Reshape(x) => {
            tape.add(x, g.to_vec());
        }
        Op::TransposeHw(x) => {
            let xs = x.shape();
            let os = node.shape();
            let mut d = vec![0.0f32; xs.numel()];
            for b in 0..os.batch {
                for c in 0..os.channels {
                    for y in 0..os.height {
                        for xx in 0..os.width {
                            d[xs.index(b, c, xx, y)] = g[os.index(b, c, y, xx)];
                        }
                    }
                }
            }
            tape.add(x, d);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape().height, a.shape().width);
            let n = b.shape().width;
            if a.requires_grad() {
                // dA = g * B^T
                let bd = b.data();
                let mut d = vec![0.0f32; m * k];
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += (g[i * n + j] as f64) * (bd[t * n + j] as f64);
                        }
                        d[i * k + t] = acc as f32;
                    }
                }
                tape.add(a, d);
            }
            if b.requires_grad() {
                // dB = A^T * g
                let ad = a.data();
                let mut d = vec![0.0f32; k * n];
                for t in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += (ad[i * k + t] as f64) * (g[i * n + j] as f64);
                        }
                        d[t * n + j] = acc as f32;
                    }
                }
                tape.add(b, d);
            }
        }
    }
}
