//! Training and validation objectives.
//!
//! Training losses return differentiable scalar tensors built on the tape;
//! reports additionally carry double-precision readouts so logged values do
//! not inherit single-precision roundoff. Validation metrics are plain
//! functions to f64 with no gradient.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{discriminate, CriticWeights};
use crate::error::{Error, Result};
use crate::generator::ConvParams;
use crate::resample::downscale;
use crate::tensor::{conv2d, log_sigmoid_f64, ConvSpec, Shape, Tensor};

/// Affinity bandwidth of the contextual loss.
pub const CX_BANDWIDTH: f32 = 0.5;

/// Stabilizer for the per-query distance normalization of the contextual
/// loss.
pub const CX_EPSILON: f32 = 1e-5;

/// Downscale factors of the fidelity objective's five terms.
pub const FIDELITY_SCALES: [u32; 5] = [1, 2, 4, 8, 16];

/// Downscale factors summed by the perceptual validation metric.
pub const VALIDATION_SCALES: [u32; 3] = [1, 2, 4];

/// One named, weighted term of a composite objective.
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
    /// Double-precision readout for logs and comparisons.
    pub value: f64,
    /// The differentiable node, for the backward pass.
    pub tensor: Tensor,
}

/// A composite objective: named weighted terms and their weighted sum.
pub struct LossReport {
    pub terms: Vec<LossTerm>,
}

impl LossReport {
    /// Weighted sum of the term readouts.
    pub fn total(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }

    /// Weighted sum as a differentiable scalar.
    pub fn total_tensor(&self) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for t in &self.terms {
            let scaled = t.tensor.scale(t.weight as f32);
            acc = Some(match acc {
                None => scaled,
                Some(a) => a.add(&scaled)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("loss_report", "no terms"))
    }

    pub fn term(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }

    /// Line-oriented log form: one `step name value` line per term, then the
    /// total.
    pub fn log_lines(&self, step: usize) -> String {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(&format!("{} {} {:.9e}\n", step, t.name, t.value));
        }
        out.push_str(&format!("{} total {:.9e}\n", step, self.total()));
        out
    }
}

fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            op,
            format!("{} vs {}", x.shape(), y.shape()),
        ));
    }
    Ok(())
}

/// Mean absolute difference as a differentiable scalar.
pub fn l1(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("l1", x, y)?;
    Ok(x.sub(y)?.abs().mean_all())
}

/// Mean squared difference as a differentiable scalar.
pub fn l2(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("l2", x, y)?;
    Ok(x.sub(y)?.square().mean_all())
}

/// Peak signal-to-noise ratio in dB for unit-range images, from a mean
/// squared error.
pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// Content objective: mean absolute difference between the restored image
/// and the reference at full resolution and at downscales 2, 4, 8, and 16,
/// all with unit weight.
pub fn fidelity_loss(y0: &Tensor, x: &Tensor) -> Result<LossReport> {
    same_shape("fidelity_loss", y0, x)?;
    let mut terms = Vec::with_capacity(FIDELITY_SCALES.len());
    for factor in FIDELITY_SCALES {
        let term = if factor == 1 {
            l1(y0, x)?
        } else {
            l1(&downscale(y0, factor)?, &downscale(x, factor)?)?
        };
        let value = term.data()[0] as f64;
        terms.push(LossTerm {
            name: format!("l1_x{}", factor),
            weight: 1.0,
            value,
            tensor: term,
        });
    }
    Ok(LossReport { terms })
}

/// Held-out score for content training: full-resolution mean squared error,
/// computed in f64.
pub fn fidelity_validation(y0: &Tensor, x: &Tensor) -> Result<f64> {
    same_shape("fidelity_validation", y0, x)?;
    let n = y0.shape().numel();
    let total: f64 = y0
        .data()
        .iter()
        .zip(x.data().iter())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum();
    Ok(total / n as f64)
}

/// A scalar objective carrying both the differentiable node and a
/// double-precision readout of the same quantity.
pub struct Objective {
    pub tensor: Tensor,
    pub value: f64,
}

/// Relativistic adversarial pair: the critic is trained to score real images
/// above generated ones for matched pairs, the generator to invert that.
///
/// Scores must be one-per-item tensors of equal shape, paired by batch
/// position. Returns (critic objective, generator objective). The readouts
/// are computed from the raw scores in f64, so degenerate cases (equal
/// scores give ln 2) come out exact to double precision.
pub fn rsgan_losses(scores_real: &Tensor, scores_fake: &Tensor) -> Result<(Objective, Objective)> {
    same_shape("rsgan_losses", scores_real, scores_fake)?;
    let s = scores_real.shape();
    if s.channels != 1 || s.height != 1 || s.width != 1 {
        return Err(Error::shape(
            "rsgan_losses",
            format!("expected one score per item, got {}", s),
        ));
    }

    let d_tensor = scores_real
        .sub(scores_fake)?
        .log_sigmoid()
        .mean_all()
        .scale(-1.0);
    let g_tensor = scores_fake
        .sub(scores_real)?
        .log_sigmoid()
        .mean_all()
        .scale(-1.0);

    let mut d_value = 0.0;
    let mut g_value = 0.0;
    for (r, f) in scores_real.data().iter().zip(scores_fake.data().iter()) {
        let diff = *r as f64 - *f as f64;
        d_value -= log_sigmoid_f64(diff);
        g_value -= log_sigmoid_f64(-diff);
    }
    d_value /= s.batch as f64;
    g_value /= s.batch as f64;

    Ok((
        Objective {
            tensor: d_tensor,
            value: d_value,
        },
        Objective {
            tensor: g_tensor,
            value: g_value,
        },
    ))
}

/// Maps an image to a feature tensor for the contextual loss.
pub trait FeatureExtractor {
    fn extract(&self, img: &Tensor) -> Result<Tensor>;
}

/// A fixed, seeded 3-layer convolutional feature map with total stride 4.
///
/// The layers are randomly initialized once and never trained; they stand in
/// for a pretrained deep-feature extractor, keeping the loss structure
/// (spatial feature vectors, cosine matching) without an external weights
/// dependency. Gradients flow through to the image, not into the layers.
pub struct SeededConvExtractor {
    layers: Vec<(ConvSpec, ConvParams)>,
}

impl SeededConvExtractor {
    pub fn new(seed: u64) -> SeededConvExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [
            ConvSpec::normal(3, 16, 3, 2, 1),
            ConvSpec::normal(16, 24, 3, 2, 1),
            ConvSpec::normal(24, 32, 3, 1, 1),
        ];
        let layers = specs
            .iter()
            .map(|spec| {
                // Drawn like trainable layers, then frozen into constants so
                // the tape never accumulates gradients for them.
                let drawn = ConvParams::init(spec, &mut rng);
                let frozen = ConvParams {
                    kernel: Tensor::from_vec(drawn.kernel.shape(), drawn.kernel.data().to_vec())
                        .expect("shape matches data"),
                    bias: Tensor::from_vec(drawn.bias.shape(), drawn.bias.data().to_vec())
                        .expect("shape matches data"),
                };
                (*spec, frozen)
            })
            .collect();
        SeededConvExtractor { layers }
    }
}

impl FeatureExtractor for SeededConvExtractor {
    fn extract(&self, img: &Tensor) -> Result<Tensor> {
        let mut t = img.clone();
        for (spec, p) in &self.layers {
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
}

/// Feature tensor (1, C, h, w) to a position-by-feature matrix (1, 1, h*w, C).
fn feature_matrix(features: &Tensor) -> Result<Tensor> {
    let s = features.shape();
    let rows = Shape::new(1, 1, s.channels, s.height * s.width);
    Ok(features.reshape(rows)?.transpose_hw())
}

/// Rows scaled to unit Euclidean norm.
fn unit_rows(m: &Tensor) -> Result<Tensor> {
    let norms = m.square().sum_axis(3)?.sqrt().add_scalar(1e-12);
    m.div(&norms)
}

fn contextual_one(y: &Tensor, x: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    let fy = feature_matrix(&extractor.extract(y)?)?;
    let fx = feature_matrix(&extractor.extract(x)?)?;
    if fy.shape().height < 2 {
        return Err(Error::invalid(
            "contextual_loss",
            format!("{} feature positions, need at least 2", fy.shape().height),
        ));
    }

    // Both feature sets are shifted by the mean feature of the generated
    // image before the cosine comparison.
    let mu = fy.mean_axis(2)?;
    let ny = unit_rows(&fy.sub(&mu)?)?;
    let nx = unit_rows(&fx.sub(&mu)?)?;

    // Cosine distances: rows index the generated image's positions, columns
    // the reference's.
    let d = ny.matmul(&nx.transpose_hw())?.scale(-1.0).add_scalar(1.0);
    let dmin = d.min_axis(3)?;
    let dn = d.div(&dmin.add_scalar(CX_EPSILON))?;
    let w = dn.scale(-1.0).add_scalar(1.0).scale(1.0 / CX_BANDWIDTH).exp();
    let affinity = w.div(&w.sum_axis(3)?)?;

    // For every reference position take its best-matching generated
    // position, average, and penalize the log.
    let matched = affinity.max_axis(2)?.mean_all();
    Ok(matched.ln().scale(-1.0))
}

/// Contextual objective: cosine-matched feature affinities between the
/// generated image and the reference, insensitive to where in the image a
/// matching feature sits.
///
/// Per-query distance normalization, exponential affinities with bandwidth
/// [`CX_BANDWIDTH`], row normalization, then the negative log of the mean
/// best-match affinity. Batches average the per-item objectives.
pub fn contextual_loss(
    y: &Tensor,
    x: &Tensor,
    extractor: &dyn FeatureExtractor,
) -> Result<Objective> {
    same_shape("contextual_loss", y, x)?;
    let batch = y.shape().batch;
    let mut acc: Option<Tensor> = None;
    for b in 0..batch {
        let item = contextual_one(&y.slice_batch(b, b + 1)?, &x.slice_batch(b, b + 1)?, extractor)?;
        acc = Some(match acc {
            None => item,
            Some(a) => a.add(&item)?,
        });
    }
    let tensor = acc.expect("batch is non-empty").scale(1.0 / batch as f32);
    let value = tensor.data()[0] as f64;
    Ok(Objective { tensor, value })
}

/// Adversarial training objective for the generator: five weighted terms
/// over the noisy output `y1`, the noise-free output `y0`, and the reference
/// `x`.
pub fn perceptual_loss(
    y1: &Tensor,
    y0: &Tensor,
    x: &Tensor,
    critic: &CriticWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<LossReport> {
    same_shape("perceptual_loss", y1, x)?;
    same_shape("perceptual_loss", y0, x)?;

    let scores_real = discriminate(x, critic)?;
    let scores_fake = discriminate(y1, critic)?;
    let (_, adversarial) = rsgan_losses(&scores_real, &scores_fake)?;

    let contextual = contextual_loss(y1, x, extractor)?;
    let noisy_x16 = l1(&downscale(y1, 16)?, &downscale(x, 16)?)?;
    let clean_full = l1(y0, x)?;
    let clean_x16 = l1(&downscale(y0, 16)?, &downscale(x, 16)?)?;

    let from_tensor = |name: &str, weight: f64, tensor: Tensor| LossTerm {
        name: name.to_string(),
        weight,
        value: tensor.data()[0] as f64,
        tensor,
    };
    Ok(LossReport {
        terms: vec![
            LossTerm {
                name: "adversarial".to_string(),
                weight: 0.001,
                value: adversarial.value,
                tensor: adversarial.tensor,
            },
            from_tensor("noisy_x16", 10.0, noisy_x16),
            LossTerm {
                name: "contextual".to_string(),
                weight: 0.1,
                value: contextual.value,
                tensor: contextual.tensor,
            },
            from_tensor("clean_full", 10.0, clean_full),
            from_tensor("clean_x16", 10.0, clean_x16),
        ],
    })
}

/// Held-out score for adversarial training: a no-reference naturalness
/// metric summed over the noisy output at full resolution and downscales 2
/// and 4. The metric is injected; lower readings mean more natural.
pub fn perceptual_validation(
    y1: &Tensor,
    metric: &dyn Fn(&Tensor) -> Result<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for factor in VALIDATION_SCALES {
        let scaled = if factor == 1 {
            y1.clone()
        } else {
            downscale(y1, factor)?
        };
        total += metric(&scaled)?;
    }
    Ok(total)
}

/// Total variation: the sum of absolute differences between horizontally and
/// vertically adjacent pixels, in f64. A summed (not averaged) roughness
/// measure, so coarser renditions of the same content score lower.
pub fn total_variation(img: &Tensor) -> f64 {
    let s = img.shape();
    let d = img.data();
    let mut total = 0.0f64;
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let v = d[s.index(b, c, y, x)] as f64;
                    if x + 1 < s.width {
                        total += (d[s.index(b, c, y, x + 1)] as f64 - v).abs();
                    }
                    if y + 1 < s.height {
                        total += (d[s.index(b, c, y + 1, x)] as f64 - v).abs();
                    }
                }
            }
        }
    }
    total
}

/// Default no-reference naturalness stand-in: the negated mean absolute
/// deviation from the 3x3 local mean, in f64. Sharper, more textured images
/// read lower (more natural); oversmoothed output reads higher. This is a
/// local-contrast proxy, not a fitted statistical naturalness model.
pub fn neg_local_contrast(img: &Tensor) -> Result<f64> {
    let s = img.shape();
    if s.height < 2 || s.width < 2 {
        return Err(Error::ImageTooSmall {
            height: s.height,
            width: s.width,
            min: 2,
        });
    }
    let d = img.data();
    let mut total = 0.0f64;
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    let mut m = 0.0f64;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let yy = (y as i64 + dy).clamp(0, s.height as i64 - 1) as usize;
                            let xx = (x as i64 + dx).clamp(0, s.width as i64 - 1) as usize;
                            m += d[s.index(b, c, yy, xx)] as f64;
                        }
                    }
                    m /= 9.0;
                    total += (d[s.index(b, c, y, x)] as f64 - m).abs();
                }
            }
        }
    }
    Ok(-(total / s.numel() as f64))
}
