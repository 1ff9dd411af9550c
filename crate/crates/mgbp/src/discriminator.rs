//! Multi-scale critic for adversarial training.
//!
//! The input image enters at four scales (full resolution and bicubic
//! downscales by 2, 4, and 8). Each scale is reduced to local-structure
//! features by variance normalization plus a shift correlator, then passed
//! through its own small CNN whose stride-2 tail hands features down to the
//! next coarser scale. A global average pool and a linear projection turn the
//! coarsest features into one score per image, returned before any sigmoid.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::ConvParams;
use crate::resample::downscale;
use crate::tensor::{conv2d, ConvSpec, Tensor};

/// Downscale factor of each pyramid level, finest first.
pub const PYRAMID_FACTORS: [u32; 4] = [1, 2, 4, 8];

/// Side length of the window used for both the normalization statistics and
/// the correlator displacements.
pub const SHIFT_WINDOW: usize = 7;

/// Feature channels the shift correlator produces per image.
pub const SC_CHANNELS: usize = SHIFT_WINDOW * SHIFT_WINDOW;

/// Stabilizer added to the local deviation before dividing.
pub const VN_EPSILON: f32 = 1e-4;

/// Feature width of each pyramid level's CNN, finest level first.
pub const DEFAULT_WIDTHS: [usize; 4] = [32, 32, 48, 64];

/// Layers per level: three stride-1 convolutions and a stride-2 tail.
pub const LAYERS_PER_LEVEL: usize = 4;

/// Channel widths of the per-level CNNs. The pyramid depth is fixed by
/// [`PYRAMID_FACTORS`], so exactly four widths are accepted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticConfig {
    pub widths: Vec<usize>,
}

impl Default for CriticConfig {
    fn default() -> CriticConfig {
        CriticConfig {
            widths: DEFAULT_WIDTHS.to_vec(),
        }
    }
}

impl CriticConfig {
    pub fn new(widths: Vec<usize>) -> CriticConfig {
        CriticConfig { widths }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() != PYRAMID_FACTORS.len() {
            return Err(Error::invalid(
                "critic",
                format!(
                    "{} widths for {} pyramid levels",
                    self.widths.len(),
                    PYRAMID_FACTORS.len()
                ),
            ));
        }
        if self.widths.iter().any(|w| *w == 0) {
            return Err(Error::invalid("critic", "feature widths must be positive"));
        }
        Ok(())
    }

    /// Conv shapes of one level's CNN: the first layer reads the correlator
    /// features (plus, below the finest level, the previous level's output),
    /// the last layer halves the spatial size.
    pub fn level_specs(&self, level: usize) -> Vec<ConvSpec> {
        let w = self.widths[level];
        let in_channels = if level == 0 {
            SC_CHANNELS
        } else {
            SC_CHANNELS + self.widths[level - 1]
        };
        (0..LAYERS_PER_LEVEL)
            .map(|layer| {
                let ic = if layer == 0 { in_channels } else { w };
                let stride = if layer + 1 == LAYERS_PER_LEVEL { 2 } else { 1 };
                ConvSpec::normal(ic, w, 3, stride, 1)
            })
            .collect()
    }

    /// The pooled-features-to-score projection.
    pub fn head_spec(&self) -> ConvSpec {
        ConvSpec::normal(self.widths[PYRAMID_FACTORS.len() - 1], 1, 1, 1, 0)
    }
}

/// All trainable tensors of a critic: one CNN per pyramid level plus the
/// scoring head. Levels never share parameters.
#[derive(Clone)]
pub struct CriticWeights {
    pub config: CriticConfig,
    pub levels: Vec<Vec<ConvParams>>,
    pub head: ConvParams,
}

impl CriticWeights {
    pub fn init(config: CriticConfig, seed: u64) -> Result<CriticWeights> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = (0..PYRAMID_FACTORS.len())
            .map(|level| {
                config
                    .level_specs(level)
                    .iter()
                    .map(|spec| ConvParams::init(spec, &mut rng))
                    .collect()
            })
            .collect();
        let head = ConvParams::init(&config.head_spec(), &mut rng);
        Ok(CriticWeights {
            config,
            levels,
            head,
        })
    }

    pub fn zeros(config: CriticConfig) -> Result<CriticWeights> {
        config.validate()?;
        let levels = (0..PYRAMID_FACTORS.len())
            .map(|level| {
                config
                    .level_specs(level)
                    .iter()
                    .map(ConvParams::zeros)
                    .collect()
            })
            .collect();
        let head = ConvParams::zeros(&config.head_spec());
        Ok(CriticWeights {
            config,
            levels,
            head,
        })
    }

    /// Flat list of trainable tensors: per level, kernel then bias per layer;
    /// the head last. The optimizer keys its state by position here.
    pub fn trainable(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for level in &self.levels {
            for p in level {
                out.push(p.kernel.clone());
                out.push(p.bias.clone());
            }
        }
        out.push(self.head.kernel.clone());
        out.push(self.head.bias.clone());
        out
    }

    /// Replace all trainable tensors, in [`CriticWeights::trainable`] order.
    pub fn replace(&mut self, updated: Vec<Tensor>) -> Result<()> {
        let want = self.levels.iter().map(|l| l.len() * 2).sum::<usize>() + 2;
        if updated.len() != want {
            return Err(Error::invalid(
                "critic",
                format!("{} updated tensors, expected {}", updated.len(), want),
            ));
        }
        let mut it = updated.into_iter();
        for level in &mut self.levels {
            for p in level.iter_mut() {
                p.kernel = it.next().expect("length checked");
                p.bias = it.next().expect("length checked");
            }
        }
        self.head.kernel = it.next().expect("length checked");
        self.head.bias = it.next().expect("length checked");
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.levels.len() != PYRAMID_FACTORS.len() {
            return Err(Error::invalid(
                "critic",
                format!("{} level CNNs for {} levels", self.levels.len(), PYRAMID_FACTORS.len()),
            ));
        }
        for (i, level) in self.levels.iter().enumerate() {
            let specs = self.config.level_specs(i);
            if level.len() != specs.len() {
                return Err(Error::invalid(
                    "critic",
                    format!("level {} has {} layers, expected {}", i, level.len(), specs.len()),
                ));
            }
            for (j, (p, spec)) in level.iter().zip(&specs).enumerate() {
                if p.kernel.shape() != spec.weight_shape() || p.bias.shape() != spec.bias_shape() {
                    return Err(Error::shape(
                        "critic",
                        format!("level {} layer {} parameters do not match the layout", i, j),
                    ));
                }
            }
        }
        let hs = self.config.head_spec();
        if self.head.kernel.shape() != hs.weight_shape() || self.head.bias.shape() != hs.bias_shape()
        {
            return Err(Error::shape("critic", "head parameters do not match the layout"));
        }
        Ok(())
    }
}

/// Variance-normalize an image's luminance and expand it into shift
/// correlator features.
///
/// The luminance (channel mean) is normalized per pixel by the mean and
/// standard deviation over its 7x7 neighborhood, with [`VN_EPSILON`] guarding
/// flat regions. The correlator then multiplies the normalized plane by each
/// of its 49 one-pixel-granular shifts, so channel d holds
/// `n(p) * n(p + d)`. Spatial size is preserved; borders clamp.
pub fn vnsc(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    if s.channels != 3 {
        return Err(Error::shape(
            "vnsc",
            format!("expected a 3-channel image, got {}", s),
        ));
    }
    let lum = img.sum_axis(1)?.scale(1.0 / 3.0);
    let half = (SHIFT_WINDOW / 2) as isize;
    let count = (SHIFT_WINDOW * SHIFT_WINDOW) as f32;

    // Window statistics through edge-clamped shifts: every pixel averages its
    // 49 clamped neighbors.
    let mut mean_acc: Option<Tensor> = None;
    for dy in -half..=half {
        for dx in -half..=half {
            let m = lum.shift(dy, dx);
            mean_acc = Some(match mean_acc {
                None => m,
                Some(acc) => acc.add(&m)?,
            });
        }
    }
    let mean = mean_acc.expect("window is non-empty").scale(1.0 / count);

    // Variance as the mean of squared deviations rather than E[x^2] - m^2:
    // the difference form does not cancel on smooth regions, where the
    // subtraction of two nearly equal numbers would dominate the result.
    let mut var_acc: Option<Tensor> = None;
    for dy in -half..=half {
        for dx in -half..=half {
            let d = lum.shift(dy, dx).sub(&mean)?.square();
            var_acc = Some(match var_acc {
                None => d,
                Some(acc) => acc.add(&d)?,
            });
        }
    }
    let variance = var_acc.expect("window is non-empty").scale(1.0 / count);
    let normalized = lum.sub(&mean)?.div(&variance.sqrt().add_scalar(VN_EPSILON))?;

    let mut channels = Vec::with_capacity(SC_CHANNELS);
    for dy in -half..=half {
        for dx in -half..=half {
            channels.push(normalized.mul(&normalized.shift(dy, dx))?);
        }
    }
    Tensor::concat_channels(&channels)
}

fn run_level(input: &Tensor, specs: &[ConvSpec], params: &[ConvParams]) -> Result<Tensor> {
    let mut t = input.clone();
    for (spec, p) in specs.iter().zip(params) {
        let s = t.shape();
        if spec.stride > 1 {
            t = t.pad_to(
                s.height.next_multiple_of(spec.stride),
                s.width.next_multiple_of(spec.stride),
            )?;
        }
        t = conv2d(&t, &p.kernel, &p.bias, spec)?.relu();
    }
    Ok(t)
}

/// Score a batch of images: one pre-sigmoid scalar per item, shaped
/// `(batch, 1, 1, 1)`. Also returns each pyramid level's output features,
/// finest first, for inspection.
pub fn discriminate_with_features(
    img: &Tensor,
    weights: &CriticWeights,
) -> Result<(Tensor, Vec<Tensor>)> {
    weights.validate()?;
    let s = img.shape();
    if s.channels != 3 {
        return Err(Error::shape(
            "discriminate",
            format!("expected a 3-channel image, got {}", s),
        ));
    }
    if s.height < 8 || s.width < 8 {
        return Err(Error::ImageTooSmall {
            height: s.height,
            width: s.width,
            min: 8,
        });
    }

    let mut carried: Option<Tensor> = None;
    let mut level_outputs = Vec::with_capacity(PYRAMID_FACTORS.len());
    for (level, &factor) in PYRAMID_FACTORS.iter().enumerate() {
        let scaled = if factor == 1 {
            img.clone()
        } else {
            downscale(img, factor)?
        };
        let features = vnsc(&scaled)?;
        let input = match &carried {
            None => features,
            Some(prev) => Tensor::concat_channels(&[features, prev.clone()])?,
        };
        let out = run_level(&input, &weights.config.level_specs(level), &weights.levels[level])?;
        level_outputs.push(out.clone());
        carried = Some(out);
    }

    let last = carried.expect("pyramid is non-empty");
    let ls = last.shape();
    let pooled = last
        .sum_axis(2)?
        .sum_axis(3)?
        .scale(1.0 / (ls.height * ls.width) as f32);
    let score = conv2d(
        &pooled,
        &weights.head.kernel,
        &weights.head.bias,
        &weights.config.head_spec(),
    )?;
    Ok((score, level_outputs))
}

/// Score a batch of images, discarding the per-level features.
pub fn discriminate(img: &Tensor, weights: &CriticWeights) -> Result<Tensor> {
    Ok(discriminate_with_features(img, weights)?.0)
}
