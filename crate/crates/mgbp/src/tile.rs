//! Windowed overlapping-patch inference for large images.
//!
//! The input is pre-upscaled to the output resolution, one full-size noise
//! plane is sampled, and a clamped grid of overlapping patches is pushed
//! through the network one at a time. Each output patch is blended into the
//! result under a Hamming window, and the accumulated weight is divided out
//! per pixel, so peak working memory stays proportional to one patch plus
//! the output buffers no matter how large the image is.

use crate::error::{Error, Result};
use crate::generator::{forward, sample_noise, GeneratorWeights, NoiseSource};
use crate::plan::NetworkPlan;
use crate::resample::upscale;
use crate::tensor::{Shape, Tensor};

/// Default pre-upscale factor: the network's working resolution is 16x the
/// raw input.
pub const DEFAULT_SCALE: u32 = 16;

/// A clamped grid of overlapping square patches covering an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Top-left corners, row-major. Every patch lies fully inside the image.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        if pos + patch >= extent {
            out.push(extent - patch);
            return out;
        }
        out.push(pos);
        pos += stride;
    }
}

/// Lay a patch grid over an image: origins advance by `stride` and the last
/// row and column sit flush with the border, so every pixel is covered and
/// no patch leaves the image.
pub fn plan_tiles(height: usize, width: usize, patch: usize, stride: usize) -> Result<PatchGrid> {
    if patch == 0 || patch > height.min(width) {
        return Err(Error::invalid(
            "plan_tiles",
            format!("patch {} does not fit a {}x{} image", patch, height, width),
        ));
    }
    if stride == 0 || stride > patch {
        return Err(Error::invalid(
            "plan_tiles",
            format!("stride {} must be in 1..={}", stride, patch),
        ));
    }
    let rows = axis_origins(height, patch, stride);
    let cols = axis_origins(width, patch, stride);
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            origins.push((r, c));
        }
    }
    Ok(PatchGrid {
        patch,
        stride,
        height,
        width,
        origins,
    })
}

/// One axis of the blending window: `0.54 - 0.46 cos(2 pi n / (N - 1))`,
/// strictly positive with value 0.08 at both ends.
pub fn hamming_window_1d(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid("hamming_window", "window length must be at least 2"));
    }
    Ok((0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect())
}

/// Separable 2-d blending weights for one square patch.
#[derive(Debug, Clone)]
pub struct BlendWindow {
    pub patch: usize,
    /// Row-major `patch * patch` weights, the outer product of two 1-d
    /// windows. All values lie in (0, 1].
    pub weights: Vec<f64>,
}

impl BlendWindow {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.weights[y * self.patch + x]
    }
}

pub fn hamming_window_2d(patch: usize) -> Result<BlendWindow> {
    let axis = hamming_window_1d(patch)?;
    let mut weights = Vec::with_capacity(patch * patch);
    for wy in &axis {
        for wx in &axis {
            weights.push(wy * wx);
        }
    }
    Ok(BlendWindow { patch, weights })
}

/// Maps one image patch plus its noise patch to an output patch of the same
/// size.
pub trait PatchRunner {
    fn run(&self, rgb: &Tensor, noise: &Tensor) -> Result<Tensor>;
}

/// Runs the network on each patch.
pub struct GeneratorRunner<'a> {
    pub plan: &'a NetworkPlan,
    pub weights: &'a GeneratorWeights,
}

impl PatchRunner for GeneratorRunner<'_> {
    fn run(&self, rgb: &Tensor, noise: &Tensor) -> Result<Tensor> {
        forward(self.plan, self.weights, rgb, &NoiseSource::Channel(noise))
    }
}

/// Passes image patches through untouched. The blend of overlapping copies
/// of the same content must reproduce it, which makes this the reference
/// runner for round-trip tests.
pub struct IdentityRunner;

impl PatchRunner for IdentityRunner {
    fn run(&self, rgb: &Tensor, _noise: &Tensor) -> Result<Tensor> {
        Ok(rgb.clone())
    }
}

/// Byte accounting for one blended inference, in lieu of wall-clock memory
/// profiling: the working set is one patch plus the full-size accumulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryStats {
    /// Bytes for one patch in flight: input, noise, output, and the window.
    pub patch_bytes: usize,
    /// Bytes for the full-size value and weight accumulators.
    pub accumulator_bytes: usize,
    /// Working-set bound: accumulators plus one patch in flight.
    pub peak_bytes: usize,
}

/// A blended inference result with its memory accounting.
pub struct Upscaled {
    pub image: Tensor,
    pub stats: MemoryStats,
}

/// Copy a square window out of a plane set as a fresh constant tensor.
pub(crate) fn copy_window(t: &Tensor, oy: usize, ox: usize, size: usize) -> Tensor {
    let s = t.shape();
    let d = t.data();
    let mut out = Vec::with_capacity(s.channels * size * size);
    for c in 0..s.channels {
        for y in 0..size {
            for x in 0..size {
                out.push(d[s.index(0, c, oy + y, ox + x)]);
            }
        }
    }
    Tensor::from_vec(Shape::new(1, s.channels, size, size), out).expect("window fits")
}

/// Blend runner outputs over a patch grid.
///
/// `image` is the working-resolution input (1, 3, H, W) and `noise` a
/// matching (1, 1, H, W) plane; both are cropped with the same origins so
/// every patch reads the noise values its pixels would see in any other
/// patch. Accumulation runs in f64 and is divided by the accumulated window
/// weight per pixel, so the result does not depend on how the windows
/// overlap, nor on the order patches are processed in beyond f64 rounding.
pub fn blend_tiles(
    image: &Tensor,
    noise: &Tensor,
    grid: &PatchGrid,
    runner: &dyn PatchRunner,
) -> Result<Upscaled> {
    let s = image.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::shape(
            "blend_tiles",
            format!("expected one 3-channel image, got {}", s),
        ));
    }
    let ns = noise.shape();
    if ns != Shape::new(1, 1, s.height, s.width) {
        return Err(Error::shape(
            "blend_tiles",
            format!("noise {} does not cover image {}", ns, s),
        ));
    }
    if grid.height != s.height || grid.width != s.width {
        return Err(Error::shape(
            "blend_tiles",
            format!("grid is {}x{}, image {}", grid.height, grid.width, s),
        ));
    }

    let p = grid.patch;
    let window = hamming_window_2d(p)?;
    let plane = s.height * s.width;
    let mut value_acc = vec![0.0f64; 3 * plane];
    let mut weight_acc = vec![0.0f64; plane];
    let patch_shape = Shape::new(1, 3, p, p);

    for &(oy, ox) in &grid.origins {
        let rgb = copy_window(image, oy, ox, p);
        let nz = copy_window(noise, oy, ox, p);
        let out = runner.run(&rgb, &nz)?;
        if out.shape() != patch_shape {
            return Err(Error::shape(
                "blend_tiles",
                format!("runner produced {}, expected {}", out.shape(), patch_shape),
            ));
        }
        let od = out.data();
        for y in 0..p {
            for x in 0..p {
                let w = window.at(y, x);
                let pixel = (oy + y) * s.width + ox + x;
                weight_acc[pixel] += w;
                for c in 0..3 {
                    value_acc[c * plane + pixel] += w * od[(c * p + y) * p + x] as f64;
                }
            }
        }
    }

    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        for pixel in 0..plane {
            data.push((value_acc[c * plane + pixel] / weight_acc[pixel]) as f32);
        }
    }
    let image = Tensor::from_vec(Shape::new(1, 3, s.height, s.width), data)?;

    let patch_bytes = (3 + 1 + 3) * p * p * 4 + p * p * 8;
    let accumulator_bytes = (3 * plane + plane) * 8;
    let stats = MemoryStats {
        patch_bytes,
        accumulator_bytes,
        peak_bytes: patch_bytes + accumulator_bytes,
    };
    Ok(Upscaled { image, stats })
}

/// Settings for one blended inference.
#[derive(Debug, Clone, Copy)]
pub struct TileConfig {
    pub patch: usize,
    pub stride: usize,
    /// Noise amplitude W; zero silences the stochastic channel entirely.
    pub noise_amplitude: f32,
    pub seed: u64,
    /// Pre-upscale factor applied to the raw input before tiling.
    pub scale: u32,
}

impl TileConfig {
    pub fn new(patch: usize, stride: usize) -> TileConfig {
        TileConfig {
            patch,
            stride,
            noise_amplitude: 0.0,
            seed: 0,
            scale: DEFAULT_SCALE,
        }
    }
}

/// Upscale a raw low-resolution image: bicubic pre-upscale to the working
/// resolution, one full-size noise plane from the seed, then windowed patch
/// blending of the runner's outputs.
pub fn upscale_image(
    lr_image: &Tensor,
    runner: &dyn PatchRunner,
    config: &TileConfig,
) -> Result<Upscaled> {
    let s = lr_image.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::shape(
            "upscale_image",
            format!("expected one 3-channel image, got {}", s),
        ));
    }
    let working = if config.scale <= 1 {
        lr_image.clone()
    } else {
        upscale(lr_image, config.scale)?
    };
    let ws = working.shape();
    let noise = sample_noise(1, ws.height, ws.width, config.noise_amplitude, config.seed);
    let grid = plan_tiles(ws.height, ws.width, config.patch, config.stride)?;
    blend_tiles(&working, &noise, &grid, runner)
}

/// Average the outputs of several systems over the same input, typically
/// identically configured except for filter size. Normalizing by the system
/// count keeps the result in image range.
pub fn ensemble_upscale(
    lr_image: &Tensor,
    systems: &[(&NetworkPlan, &GeneratorWeights)],
    config: &TileConfig,
) -> Result<Upscaled> {
    if systems.is_empty() {
        return Err(Error::invalid("ensemble_upscale", "no systems"));
    }
    let mut acc: Option<Vec<f64>> = None;
    let mut shape = Shape::new(1, 1, 1, 1);
    let mut peak = 0usize;
    let mut patch_bytes = 0usize;
    let mut accumulator_bytes = 0usize;
    for (plan, weights) in systems {
        let runner = GeneratorRunner { plan, weights };
        let one = upscale_image(lr_image, &runner, config)?;
        let os = one.image.shape();
        match &mut acc {
            None => {
                shape = os;
                acc = Some(one.image.data().iter().map(|v| *v as f64).collect());
            }
            Some(buf) => {
                if os != shape {
                    return Err(Error::shape(
                        "ensemble_upscale",
                        format!("system outputs disagree: {} vs {}", os, shape),
                    ));
                }
                for (a, v) in buf.iter_mut().zip(one.image.data()) {
                    *a += *v as f64;
                }
            }
        }
        peak = peak.max(one.stats.peak_bytes);
        patch_bytes = patch_bytes.max(one.stats.patch_bytes);
        accumulator_bytes = accumulator_bytes.max(one.stats.accumulator_bytes);
    }
    let buf = acc.expect("systems is non-empty");
    let n = systems.len() as f64;
    let data: Vec<f32> = buf.into_iter().map(|v| (v / n) as f32).collect();
    let ensemble_bytes = shape.numel() * 8;
    Ok(Upscaled {
        image: Tensor::from_vec(shape, data)?,
        stats: MemoryStats {
            patch_bytes,
            accumulator_bytes: accumulator_bytes + ensemble_bytes,
            peak_bytes: peak + ensemble_bytes,
        },
    })
}
