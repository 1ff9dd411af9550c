//! Shared helpers for the test suite: seeded tensor builders, 64-bit
//! reference implementations used as oracles, and a finite-difference
//! gradient checker.
//!
//! The reference implementations here are written as directly as possible
//! from the mathematical definitions (definitional nested loops, no tap
//! reuse, no range precomputation) so they share no structure with the
//! library kernels they check.

#![allow(dead_code)]

use mgbp::generator::GeneratorWeights;
use mgbp::plan::{NetworkPlan, PlanConfig};
use mgbp::tensor::{conv2d, conv2d_transposed, ConvSpec, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let data = rand_vec(rng, shape.numel(), lo, hi);
    Tensor::from_vec(shape, data).unwrap()
}

pub fn rand_param(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let data = rand_vec(rng, shape.numel(), lo, hi);
    Tensor::param(shape, data).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in comparison");
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / scale
}

/// Definitional cross-correlation in f64: for every output element, sum the
/// kernel taps over the zero-padded input.
pub fn ref_conv2d(
    input: &[f64],
    is: Shape,
    weights: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
) -> (Vec<f64>, Shape) {
    assert!(!spec.transposed);
    let (oh, ow) = spec.out_hw(is.height, is.width).unwrap();
    let os = Shape::new(is.batch, spec.out_channels, oh, ow);
    let mut out = vec![0.0f64; os.numel()];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..spec.in_channels {
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                let iy = (oy * spec.stride + ky) as i64 - spec.padding as i64;
                                let ix = (ox * spec.stride + kx) as i64 - spec.padding as i64;
                                if iy < 0
                                    || iy >= is.height as i64
                                    || ix < 0
                                    || ix >= is.width as i64
                                {
                                    continue;
                                }
                                let w = weights
                                    [((oc * spec.in_channels + ic) * spec.kernel + ky)
                                        * spec.kernel
                                        + kx];
                                acc += w * input[is.index(b, ic, iy as usize, ix as usize)];
                            }
                        }
                    }
                    out[os.index(b, oc, oy, ox)] = acc;
                }
            }
        }
    }
    (out, os)
}

/// Definitional transposed convolution in f64: every input element scatters
/// its kernel-weighted value to output position `i*stride + k - padding`.
pub fn ref_convt(
    input: &[f64],
    is: Shape,
    weights: &[f64],
    bias: &[f64],
    spec: &ConvSpec,
) -> (Vec<f64>, Shape) {
    assert!(spec.transposed);
    let (oh, ow) = spec.out_hw(is.height, is.width).unwrap();
    let os = Shape::new(is.batch, spec.out_channels, oh, ow);
    let mut out = vec![0.0f64; os.numel()];
    for b in 0..is.batch {
        for oc in 0..spec.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[os.index(b, oc, oy, ox)] = bias[oc];
                }
            }
        }
        for ic in 0..spec.in_channels {
            for iy in 0..is.height {
                for ix in 0..is.width {
                    let v = input[is.index(b, ic, iy, ix)];
                    for oc in 0..spec.out_channels {
                        for ky in 0..spec.kernel {
                            for kx in 0..spec.kernel {
                                let oy = (iy * spec.stride + ky) as i64 - spec.padding as i64;
                                let ox = (ix * spec.stride + kx) as i64 - spec.padding as i64;
                                if oy < 0 || oy >= oh as i64 || ox < 0 || ox >= ow as i64 {
                                    continue;
                                }
                                let w = weights
                                    [((ic * spec.out_channels + oc) * spec.kernel + ky)
                                        * spec.kernel
                                        + kx];
                                out[os.index(b, oc, oy as usize, ox as usize)] += w * v;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, os)
}

/// Catmull-Rom kernel in f64.
pub fn ref_cubic(t: f64) -> f64 {
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

/// Taps along one axis for one output position, in f64: `(index, weight)`
/// with indices clamped to the valid range and weights normalized.
pub fn ref_axis_taps(in_len: usize, o: usize, ratio: f64, stretch: f64) -> Vec<(usize, f64)> {
    let x = (o as f64 + 0.5) * ratio - 0.5;
    let support = 2.0 * stretch;
    let lo = (x - support).ceil() as i64;
    let hi = (x + support).floor() as i64;
    let mut taps = Vec::new();
    let mut total = 0.0;
    for i in lo..=hi {
        let w = ref_cubic((i as f64 - x) / stretch);
        total += w;
        taps.push((i, w));
    }
    taps.into_iter()
        .filter(|(_, w)| *w != 0.0)
        .map(|(i, w)| (i.clamp(0, in_len as i64 - 1) as usize, w / total))
        .collect()
}

/// Direct (non-separated) bicubic resample of one plane in f64: every output
/// pixel gathers a 2-d window with product weights.
pub fn ref_resample_plane(
    input: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ratio: f64,
    stretch: f64,
) -> Vec<f64> {
    let mut out = vec![0.0f64; oh * ow];
    for oy in 0..oh {
        let row_taps = ref_axis_taps(h, oy, ratio, stretch);
        for ox in 0..ow {
            let col_taps = ref_axis_taps(w, ox, ratio, stretch);
            let mut acc = 0.0;
            for &(iy, wy) in &row_taps {
                for &(ix, wx) in &col_taps {
                    acc += wy * wx * input[iy * w + ix];
                }
            }
            out[oy * ow + ox] = acc;
        }
    }
    out
}

/// Walks a weight list in the order the hand-unrolled code below consumes
/// it. If a plan's execution order ever deviated from that derivation, the
/// weights would misalign and the outputs would disagree.
pub struct Unroller<'a> {
    pub weights: &'a GeneratorWeights,
    pub cursor: usize,
}

impl Unroller<'_> {
    fn conv(&mut self, spec: &ConvSpec, input: &Tensor, rectify: bool) -> Tensor {
        let p = &self.weights.params[self.cursor];
        self.cursor += 1;
        let s = input.shape();
        let x = if !spec.transposed && spec.stride > 1 {
            input
                .pad_to(
                    s.height.next_multiple_of(spec.stride),
                    s.width.next_multiple_of(spec.stride),
                )
                .unwrap()
        } else {
            input.clone()
        };
        let out = if spec.transposed {
            conv2d_transposed(&x, &p.kernel, &p.bias, spec).unwrap()
        } else {
            conv2d(&x, &p.kernel, &p.bias, spec).unwrap()
        };
        if rectify {
            out.relu()
        } else {
            out
        }
    }

    fn add_back(&self, state: &Tensor, up: &Tensor) -> Tensor {
        let s = state.shape();
        state.add(&up.crop_to(s.height, s.width).unwrap()).unwrap()
    }
}

/// One refinement pass at the coarsest transition: downscale, join with the
/// level-1 analysis features, upscale, add back.
fn refine_bottom(u: &mut Unroller, cfg: &PlanConfig, state: &Tensor, y1: &Tensor) -> Tensor {
    let c = u.conv(&cfg.downscale_spec(1), state, true);
    let joined = Tensor::concat_channels(&[y1.clone(), c]).unwrap();
    let up = u.conv(&cfg.upscale_spec(1), &joined, true);
    u.add_back(state, &up)
}

/// Hand-unrolled straight-line evaluation of the one-, two-, and three-level
/// networks, written directly from the recursion with no loop over a plan.
/// `input` already carries the noise plane as its fourth channel.
pub fn unrolled_forward(plan: &NetworkPlan, weights: &GeneratorWeights, input: &Tensor) -> Tensor {
    let cfg = &plan.config;
    let mut u = Unroller { weights, cursor: 0 };
    let (mu, levels) = (cfg.mu, cfg.levels);

    match levels {
        1 => {
            let y1 = u.conv(&cfg.analysis_spec(1), input, true);
            u.conv(&cfg.synthesis_spec(), &y1, false)
        }
        2 => {
            let y1 = u.conv(&cfg.analysis_spec(1), input, true);
            let y2 = u.conv(&cfg.analysis_spec(2), input, true);
            let mut state = y2;
            for _ in 0..mu {
                state = refine_bottom(&mut u, cfg, &state, &y1);
            }
            u.conv(&cfg.synthesis_spec(), &state, false)
        }
        3 => {
            let y1 = u.conv(&cfg.analysis_spec(1), input, true);
            let y2 = u.conv(&cfg.analysis_spec(2), input, true);
            let y3 = u.conv(&cfg.analysis_spec(3), input, true);
            let mut state = y3;
            for _ in 0..mu {
                let mut mid = u.conv(&cfg.downscale_spec(2), &state, true);
                for _ in 0..mu {
                    mid = refine_bottom(&mut u, cfg, &mid, &y1);
                }
                let joined = Tensor::concat_channels(&[y2.clone(), mid]).unwrap();
                let up = u.conv(&cfg.upscale_spec(2), &joined, true);
                state = u.add_back(&state, &up);
            }
            u.conv(&cfg.synthesis_spec(), &state, false)
        }
        _ => panic!("oracle only covers 1-3 levels"),
    }
}

/// Check an analytic gradient against central finite differences of a 64-bit
/// reference function.
///
/// `analytic` is the gradient produced by the tape for a parameter vector
/// `base`; `reference` recomputes the same scalar from an arbitrary parameter
/// vector entirely in f64. At most `max_probes` evenly spread components are
/// probed. Returns the worst relative error.
pub fn fd_check(
    base: &[f32],
    analytic: &[f32],
    mut reference: impl FnMut(&[f64]) -> f64,
    h: f64,
    max_probes: usize,
) -> f64 {
    assert_eq!(base.len(), analytic.len());
    let base64: Vec<f64> = base.iter().map(|v| *v as f64).collect();
    let grad_scale = (analytic.iter().map(|g| (*g as f64).powi(2)).sum::<f64>()
        / analytic.len() as f64)
        .sqrt()
        .max(1e-8);
    let step = (base.len() / max_probes.min(base.len())).max(1);
    let mut worst = 0.0f64;
    let mut x = base64.clone();
    for i in (0..base.len()).step_by(step) {
        let keep = x[i];
        x[i] = keep + h;
        let plus = reference(&x);
        x[i] = keep - h;
        let minus = reference(&x);
        x[i] = keep;
        let fd = (plus - minus) / (2.0 * h);
        let a = analytic[i] as f64;
        let denom = a.abs().max(fd.abs()).max(grad_scale);
        let err = (a - fd).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Scalar reduction used by the gradient checks: a fixed random projection of
/// the op output, so gradients are dense and non-uniform.
pub fn projection(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn project_f32(values: &[f32], proj: &[f64]) -> f64 {
    values
        .iter()
        .zip(proj)
        .map(|(v, p)| *v as f64 * p)
        .sum()
}

pub fn project_f64(values: &[f64], proj: &[f64]) -> f64 {
    values.iter().zip(proj).map(|(v, p)| v * p).sum()
}
