//! The trainable upscaling network: weight initialization, the forward pass
//! over a [`NetworkPlan`], and linear impulse-response probes.
//!
//! The generator takes an RGB image already brought to output resolution by a
//! fixed bicubic upscaler, appends a noise channel, refines it through the
//! back-projection recursion, and synthesizes an RGB image of the same size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::plan::{drive, ModuleTag, NetworkPlan, RecursionVisitor, NOISE_CHANNELS};
use crate::tensor::{conv2d, conv2d_transposed, ConvSpec, Shape, Tensor};

/// Kernel and bias of one convolution instance.
#[derive(Clone)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    /// He-style initialization: zero-mean normal kernel scaled by fan-in,
    /// zero bias.
    pub fn init(spec: &ConvSpec, rng: &mut ChaCha8Rng) -> ConvParams {
        let ws = spec.weight_shape();
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..ws.numel())
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z * std) as f32
            })
            .collect();
        ConvParams {
            kernel: Tensor::param(ws, data).expect("weight shape matches data"),
            bias: Tensor::param(spec.bias_shape(), vec![0.0; spec.out_channels])
                .expect("bias shape matches data"),
        }
    }

    pub fn zeros(spec: &ConvSpec) -> ConvParams {
        let ws = spec.weight_shape();
        ConvParams {
            kernel: Tensor::param(ws, vec![0.0; ws.numel()]).expect("weight shape matches data"),
            bias: Tensor::param(spec.bias_shape(), vec![0.0; spec.out_channels])
                .expect("bias shape matches data"),
        }
    }
}

/// All trainable tensors of a generator, aligned one-to-one with
/// `plan.instances`.
#[derive(Clone)]
pub struct GeneratorWeights {
    pub params: Vec<ConvParams>,
}

impl GeneratorWeights {
    /// Fresh randomly initialized weights for a plan.
    pub fn init(plan: &NetworkPlan, seed: u64) -> GeneratorWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = plan
            .instances
            .iter()
            .map(|inst| ConvParams::init(&inst.spec, &mut rng))
            .collect();
        GeneratorWeights { params }
    }

    /// Check that every kernel and bias matches the plan's shape contract.
    pub fn validate(&self, plan: &NetworkPlan) -> Result<()> {
        if self.params.len() != plan.instances.len() {
            return Err(Error::invalid(
                "weights",
                format!(
                    "{} parameter blocks for {} plan instances",
                    self.params.len(),
                    plan.instances.len()
                ),
            ));
        }
        for (p, inst) in self.params.iter().zip(&plan.instances) {
            if p.kernel.shape() != inst.spec.weight_shape() {
                return Err(Error::shape(
                    "weights",
                    format!(
                        "{}: kernel is {}, plan wants {}",
                        inst.tag,
                        p.kernel.shape(),
                        inst.spec.weight_shape()
                    ),
                ));
            }
            if p.bias.shape() != inst.spec.bias_shape() {
                return Err(Error::shape(
                    "weights",
                    format!(
                        "{}: bias is {}, plan wants {}",
                        inst.tag,
                        p.bias.shape(),
                        inst.spec.bias_shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Flat list of trainable tensors in plan order: kernel then bias per
    /// instance. The optimizer keys its state by position in this list.
    pub fn trainable(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.params.len() * 2);
        for p in &self.params {
            out.push(p.kernel.clone());
            out.push(p.bias.clone());
        }
        out
    }

    /// Replace all trainable tensors with updated ones, in the same order
    /// [`GeneratorWeights::trainable`] produces them.
    pub fn replace(&mut self, updated: Vec<Tensor>) -> Result<()> {
        if updated.len() != self.params.len() * 2 {
            return Err(Error::invalid(
                "weights",
                format!(
                    "{} updated tensors for {} parameter blocks",
                    updated.len(),
                    self.params.len()
                ),
            ));
        }
        let mut it = updated.into_iter();
        for p in &mut self.params {
            p.kernel = it.next().expect("length checked");
            p.bias = it.next().expect("length checked");
        }
        Ok(())
    }
}

/// Where the appended noise channel comes from.
pub enum NoiseSource<'a> {
    /// Sample `amplitude * N(0,1)` per pixel from a seeded stream. Amplitude
    /// zero short-circuits to exact zeros.
    Sample { amplitude: f32, seed: u64 },
    /// Use a caller-provided channel, e.g. a window into an image-wide noise
    /// plane during tiled inference.
    Channel(&'a Tensor),
}

/// Build the noise plane for an input of the given geometry.
pub fn sample_noise(batch: usize, height: usize, width: usize, amplitude: f32, seed: u64) -> Tensor {
    let shape = Shape::new(batch, NOISE_CHANNELS, height, width);
    if amplitude == 0.0 {
        return Tensor::zeros(shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| {
            let z: f32 = rng.sample(StandardNormal);
            z * amplitude
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// How rectified linear units behave during one pass.
enum ReluMode<'a> {
    /// Ordinary max(0, x).
    Plain,
    /// Ordinary, but record each unit's on/off mask in call order.
    Record(&'a mut Vec<Vec<f32>>),
    /// Replace each rectifier with multiplication by a recorded mask, turning
    /// the network into a fixed linear map. Biases are dropped as well.
    Frozen(&'a [Vec<f32>]),
}

struct ForwardPass<'a> {
    weights: &'a GeneratorWeights,
    cursor: usize,
    input: Tensor,
    mode: ReluMode<'a>,
    relu_calls: usize,
}

impl ForwardPass<'_> {
    fn rectify(&mut self, t: Tensor) -> Result<Tensor> {
        let call = self.relu_calls;
        self.relu_calls += 1;
        match &mut self.mode {
            ReluMode::Plain => Ok(t.relu()),
            ReluMode::Record(masks) => {
                let mask = t
                    .data()
                    .iter()
                    .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                masks.push(mask);
                Ok(t.relu())
            }
            ReluMode::Frozen(masks) => {
                let mask = masks.get(call).ok_or_else(|| {
                    Error::invalid("frozen_pass", format!("no recorded mask for unit {}", call))
                })?;
                if mask.len() != t.shape().numel() {
                    return Err(Error::shape(
                        "frozen_pass",
                        format!(
                            "mask {} has {} values for {} activations",
                            call,
                            mask.len(),
                            t.shape().numel()
                        ),
                    ));
                }
                let m = Tensor::from_vec(t.shape(), mask.clone())?;
                t.mul(&m)
            }
        }
    }

    fn params(&mut self, tag: &ModuleTag) -> Result<&ConvParams> {
        let i = self.cursor;
        self.cursor += 1;
        self.weights.params.get(i).ok_or_else(|| {
            Error::invalid("forward", format!("no weights for instance {} ({})", i, tag))
        })
    }
}

impl RecursionVisitor for ForwardPass<'_> {
    type Value = Tensor;

    fn input(&mut self) -> Result<Tensor> {
        Ok(self.input.clone())
    }

    fn apply(&mut self, tag: &ModuleTag, spec: &ConvSpec, input: &Tensor) -> Result<Tensor> {
        let frozen = matches!(self.mode, ReluMode::Frozen(_));
        let p = self.params(tag)?;
        let bias = if frozen {
            Tensor::zeros(spec.bias_shape())
        } else {
            p.bias.clone()
        };
        let kernel = p.kernel.clone();

        // Strided forward convolutions pad the input up to a multiple of the
        // stride so every level covers ceil(len / stride) positions.
        let s = input.shape();
        let x = if !spec.transposed && spec.stride > 1 {
            input.pad_to(
                s.height.next_multiple_of(spec.stride),
                s.width.next_multiple_of(spec.stride),
            )?
        } else {
            input.clone()
        };

        let out = if spec.transposed {
            conv2d_transposed(&x, &kernel, &bias, spec)?
        } else {
            conv2d(&x, &kernel, &bias, spec)?
        };
        if tag.kind == crate::plan::ModuleKind::Synthesis {
            Ok(out)
        } else {
            self.rectify(out)
        }
    }

    fn concat(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Tensor::concat_channels(&[a.clone(), b.clone()])
    }

    fn add_trimmed(&mut self, state: &Tensor, correction: &Tensor) -> Result<Tensor> {
        let s = state.shape();
        state.add(&correction.crop_to(s.height, s.width)?)
    }
}

fn check_input(plan: &NetworkPlan, rgb: &Tensor) -> Result<()> {
    let s = rgb.shape();
    if s.channels != 3 {
        return Err(Error::shape(
            "forward",
            format!("input must have 3 channels, got {}", s.channels),
        ));
    }
    let min = plan.config.min_input();
    if s.height < min || s.width < min {
        return Err(Error::ImageTooSmall {
            height: s.height,
            width: s.width,
            min,
        });
    }
    Ok(())
}

fn make_input(plan: &NetworkPlan, rgb: &Tensor, noise: &NoiseSource) -> Result<Tensor> {
    check_input(plan, rgb)?;
    let s = rgb.shape();
    let noise_plane = match noise {
        NoiseSource::Sample { amplitude, seed } => {
            sample_noise(s.batch, s.height, s.width, *amplitude, *seed)
        }
        NoiseSource::Channel(t) => {
            let ns = t.shape();
            if ns.batch != s.batch
                || ns.channels != NOISE_CHANNELS
                || ns.height != s.height
                || ns.width != s.width
            {
                return Err(Error::shape(
                    "forward",
                    format!("noise channel {} does not match input {}", ns, s),
                ));
            }
            (*t).clone()
        }
    };
    Tensor::concat_channels(&[rgb.clone(), noise_plane])
}

fn run(
    plan: &NetworkPlan,
    weights: &GeneratorWeights,
    input: Tensor,
    mode: ReluMode,
) -> Result<Tensor> {
    weights.validate(plan)?;
    let mut pass = ForwardPass {
        weights,
        cursor: 0,
        input,
        mode,
        relu_calls: 0,
    };
    drive(&plan.config, &mut pass)
}

/// Run the generator. The output is RGB with the same spatial size as `rgb`.
pub fn forward(
    plan: &NetworkPlan,
    weights: &GeneratorWeights,
    rgb: &Tensor,
    noise: &NoiseSource,
) -> Result<Tensor> {
    let input = make_input(plan, rgb, noise)?;
    run(plan, weights, input, ReluMode::Plain)
}

/// Deep filter visualization: the response of the network, linearized around
/// a reference input, to a unit impulse at one input pixel.
///
/// A reference pass records every rectifier's on/off state. A second pass
/// then freezes those states and drops all biases, leaving an exactly linear
/// map, and feeds it an input that is zero except for a single one at
/// `(channel, row, col)`. Channel 3 addresses the noise plane.
pub fn dfv_impulse_response(
    plan: &NetworkPlan,
    weights: &GeneratorWeights,
    rgb: &Tensor,
    noise: &NoiseSource,
    channel: usize,
    row: usize,
    col: usize,
) -> Result<Tensor> {
    let input = make_input(plan, rgb, noise)?;
    let s = input.shape();
    if s.batch != 1 {
        return Err(Error::invalid("dfv", "impulse probes take a single image"));
    }
    if channel >= s.channels || row >= s.height || col >= s.width {
        return Err(Error::OutOfBounds {
            detail: format!(
                "impulse at channel {} pixel ({}, {}) outside input {}",
                channel, row, col, s
            ),
        });
    }

    let mut masks = Vec::new();
    run(plan, weights, input, ReluMode::Record(&mut masks))?;

    let mut delta = vec![0.0f32; s.numel()];
    delta[s.index(0, channel, row, col)] = 1.0;
    let impulse = Tensor::from_vec(s, delta)?;
    run(plan, weights, impulse, ReluMode::Frozen(&masks))
}

/// The frozen linear map from [`dfv_impulse_response`] applied to an
/// arbitrary input tensor instead of a unit impulse. The reference input
/// fixes the rectifier states; `probe` is then mapped linearly.
pub fn dfv_linear_map(
    plan: &NetworkPlan,
    weights: &GeneratorWeights,
    rgb: &Tensor,
    noise: &NoiseSource,
    probe: &Tensor,
) -> Result<Tensor> {
    let input = make_input(plan, rgb, noise)?;
    if probe.shape() != input.shape() {
        return Err(Error::shape(
            "dfv",
            format!("probe {} does not match input {}", probe.shape(), input.shape()),
        ));
    }
    let mut masks = Vec::new();
    run(plan, weights, input, ReluMode::Record(&mut masks))?;
    run(plan, weights, probe.clone(), ReluMode::Frozen(&masks))
}
