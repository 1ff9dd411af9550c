//! Optimization: the quasi-hyperbolic Adam step and the two training loops,
//! a fidelity phase that fits the network without noise and an adversarial
//! phase that alternates critic and generator updates one for one.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{load_site, sample_batch, Batch, PatchStore, SampleSite, DEFAULT_BATCH};
use crate::discriminator::{discriminate, CriticWeights};
use crate::error::{Error, Result};
use crate::format::{save_critic, save_weights};
use crate::generator::{forward, GeneratorWeights, NoiseSource};
use crate::loss::{
    fidelity_loss, fidelity_validation, perceptual_loss, perceptual_validation, rsgan_losses,
    FeatureExtractor,
};
use crate::plan::NetworkPlan;
use crate::tensor::{Shape, Tensor};

/// An epoch is this many batches unless configured otherwise.
pub const DEFAULT_BATCHES_PER_EPOCH: usize = 100;

/// Training aborts when an epoch's mean loss exceeds the first epoch's by
/// this factor.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

/// Quasi-hyperbolic Adam settings. With both interpolation factors at 1 the
/// update is exactly Adam; the defaults damp the immediate gradient term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QhAdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the bias-corrected first moment against the raw gradient.
    pub nu1: f64,
    /// Weight of the bias-corrected second moment against the squared
    /// gradient.
    pub nu2: f64,
    pub epsilon: f64,
}

impl Default for QhAdamConfig {
    fn default() -> QhAdamConfig {
        QhAdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            nu1: 0.7,
            nu2: 1.0,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state for one fixed list of parameters. Moments are keyed by
/// position, so every call must pass the same tensors (or their updated
/// replacements) in the same order.
pub struct OptimizerState {
    config: QhAdamConfig,
    shapes: Vec<Shape>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: QhAdamConfig, params: &[Tensor]) -> OptimizerState {
        let shapes: Vec<Shape> = params.iter().map(|p| p.shape()).collect();
        let m = shapes.iter().map(|s| vec![0.0; s.numel()]).collect();
        let v = shapes.iter().map(|s| vec![0.0; s.numel()]).collect();
        OptimizerState {
            config,
            shapes,
            m,
            v,
            steps: 0,
        }
    }

    /// Steps applied so far; skipped steps do not count.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update from the gradients currently stored on `params`.
    /// A parameter without a gradient contributes zeros. If any gradient
    /// holds a non-finite value the whole step is skipped, state untouched,
    /// and `None` comes back.
    pub fn step(&mut self, params: &[Tensor]) -> Result<Option<Vec<Tensor>>> {
        if params.len() != self.shapes.len() {
            return Err(Error::invalid(
                "optimizer",
                format!("{} parameters, state built for {}", params.len(), self.shapes.len()),
            ));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.shapes[i] {
                return Err(Error::shape(
                    "optimizer",
                    format!(
                        "parameter {} is {}, state was built for {}",
                        i,
                        p.shape(),
                        self.shapes[i]
                    ),
                ));
            }
            let g = p
                .grad()
                .unwrap_or_else(|| vec![0.0; self.shapes[i].numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                log::warn!("skipping optimizer step: non-finite gradient on parameter {}", i);
                return Ok(None);
            }
            grads.push(g);
        }

        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.config;
        let m_corr = 1.0 - c.beta1.powi(t);
        let v_corr = 1.0 - c.beta2.powi(t);
        let mut updated = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let data = p.data();
            let mut next = Vec::with_capacity(data.len());
            for (j, (&w, &gf)) in data.iter().zip(&grads[i]).enumerate() {
                let g = gf as f64;
                let m = c.beta1 * self.m[i][j] + (1.0 - c.beta1) * g;
                let v = c.beta2 * self.v[i][j] + (1.0 - c.beta2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let m_hat = m / m_corr;
                let v_hat = v / v_corr;
                let numerator = c.nu1 * m_hat + (1.0 - c.nu1) * g;
                let denominator = (c.nu2 * v_hat + (1.0 - c.nu2) * g * g).sqrt() + c.epsilon;
                next.push((w as f64 - c.lr * numerator / denominator) as f32);
            }
            updated.push(Tensor::param(self.shapes[i], next)?);
        }
        Ok(Some(updated))
    }
}

/// Shared settings of both training loops.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch: usize,
    pub train_patch: usize,
    pub seed: u64,
    /// Abort threshold relative to the first epoch's mean loss.
    pub divergence_factor: f64,
    /// Where to save generator weights whenever validation improves.
    pub checkpoint: Option<PathBuf>,
    /// Where to save critic weights at the same moments (adversarial phase).
    pub critic_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(epochs: usize, train_patch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batches_per_epoch: DEFAULT_BATCHES_PER_EPOCH,
            batch: DEFAULT_BATCH,
            train_patch,
            seed: 0,
            divergence_factor: DIVERGENCE_FACTOR,
            checkpoint: None,
            critic_checkpoint: None,
        }
    }
}

/// One epoch's outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's applied batches.
    pub train_loss: f64,
    /// Mean validation score, lower is better.
    pub validation: f64,
    /// Whether this epoch improved on the best validation so far.
    pub improved: bool,
}

/// Full run outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
    pub best_validation: f64,
}

/// Deterministic validation set: the center crop of each image's first
/// stored patch, paired with its degraded partner.
pub fn validation_set(store: &PatchStore, train_patch: usize) -> Result<Vec<Batch>> {
    let mut out = Vec::with_capacity(store.images.len());
    let off = (store.patch - train_patch) / 2;
    for image in 0..store.images.len() {
        let site = SampleSite {
            image,
            file: 0,
            oy: off,
            ox: off,
        };
        let hr = load_site(store, &site, train_patch)?;
        let lr = crate::resample::upscale(
            &crate::resample::downscale(&hr, crate::data::LR_FACTOR)?,
            crate::data::LR_FACTOR,
        )?;
        out.push(Batch { hr, lr });
    }
    Ok(out)
}

struct EpochLedger {
    sum: f64,
    counted: usize,
}

impl EpochLedger {
    fn new() -> EpochLedger {
        EpochLedger { sum: 0.0, counted: 0 }
    }

    fn record(&mut self, value: f64) {
        self.sum += value;
        self.counted += 1;
    }

    fn mean(&self) -> f64 {
        if self.counted == 0 {
            f64::NAN
        } else {
            self.sum / self.counted as f64
        }
    }
}

fn check_divergence(
    epoch: usize,
    initial: Option<f64>,
    current: f64,
    factor: f64,
) -> Result<f64> {
    let initial = match initial {
        None => return Ok(current),
        Some(v) => v,
    };
    if !current.is_finite() || current > factor * initial {
        return Err(Error::Diverged {
            epoch,
            initial,
            current,
            factor,
        });
    }
    Ok(initial)
}

fn clear_grads(tensors: &[Tensor]) {
    for t in tensors {
        t.clear_grad();
    }
}

/// Fit the generator with the noise channel silenced, validating each epoch
/// by mean squared error on the held-out center crops and checkpointing on
/// improvement. Aborts with a structured error when an epoch's mean loss
/// exceeds the first epoch's by the configured factor.
pub fn train_fidelity(
    plan: &NetworkPlan,
    weights: &mut GeneratorWeights,
    store: &PatchStore,
    cfg: &TrainConfig,
    opt_cfg: QhAdamConfig,
) -> Result<TrainStats> {
    let mut opt = OptimizerState::new(opt_cfg, &weights.trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let validation = validation_set(store, cfg.train_patch)?;
    let silent = NoiseSource::Sample {
        amplitude: 0.0,
        seed: 0,
    };

    let mut stats = TrainStats {
        epochs: Vec::with_capacity(cfg.epochs),
        best_validation: f64::INFINITY,
    };
    let mut initial: Option<f64> = None;
    for epoch in 0..cfg.epochs {
        let mut ledger = EpochLedger::new();
        for _ in 0..cfg.batches_per_epoch {
            let batch = sample_batch(store, cfg.train_patch, cfg.batch, &mut rng)?;
            let trainables = weights.trainable();
            clear_grads(&trainables);
            let y0 = forward(plan, weights, &batch.lr, &silent)?;
            let report = fidelity_loss(&y0, &batch.hr)?;
            let value = report.total();
            if !value.is_finite() {
                log::warn!("epoch {}: skipping batch with non-finite loss", epoch);
                continue;
            }
            report.total_tensor()?.backward()?;
            if let Some(updated) = opt.step(&trainables)? {
                weights.replace(updated)?;
            }
            ledger.record(value);
        }

        let mut vsum = 0.0;
        for item in &validation {
            let y0 = forward(plan, weights, &item.lr, &silent)?;
            vsum += fidelity_validation(&y0, &item.hr)?;
        }
        let val = vsum / validation.len() as f64;
        let improved = val < stats.best_validation;
        if improved {
            stats.best_validation = val;
            if let Some(path) = &cfg.checkpoint {
                save_weights(path, plan, weights)?;
            }
        }
        let train_loss = ledger.mean();
        log::info!(
            "fidelity epoch {}: loss {:.6e}, validation {:.6e}{}",
            epoch,
            train_loss,
            val,
            if improved { " (best)" } else { "" }
        );
        stats.epochs.push(EpochStats {
            epoch,
            train_loss,
            validation: val,
            improved,
        });
        initial = Some(check_divergence(epoch, initial, train_loss, cfg.divergence_factor)?);
    }
    Ok(stats)
}

/// Adversarial phase: per iteration, one critic update on real against
/// detached generated images, then one generator update on the full
/// composite objective, both from the same batch and the same logged noise
/// seed. Validation applies the injected metric (lower is better) to the
/// noisy output at full, half, and quarter resolution.
pub fn train_perceptual(
    plan: &NetworkPlan,
    weights: &mut GeneratorWeights,
    critic: &mut CriticWeights,
    extractor: &dyn FeatureExtractor,
    metric: &dyn Fn(&Tensor) -> Result<f64>,
    store: &PatchStore,
    cfg: &TrainConfig,
    gen_opt_cfg: QhAdamConfig,
    critic_opt_cfg: QhAdamConfig,
) -> Result<TrainStats> {
    let mut gen_opt = OptimizerState::new(gen_opt_cfg, &weights.trainable());
    let mut critic_opt = OptimizerState::new(critic_opt_cfg, &critic.trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let validation = validation_set(store, cfg.train_patch)?;

    let mut stats = TrainStats {
        epochs: Vec::with_capacity(cfg.epochs),
        best_validation: f64::INFINITY,
    };
    let mut initial: Option<f64> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut ledger = EpochLedger::new();
        for _ in 0..cfg.batches_per_epoch {
            let batch = sample_batch(store, cfg.train_patch, cfg.batch, &mut rng)?;
            let noise_seed: u64 = rng.gen();
            log::debug!("step {}: noise seed {}", step, noise_seed);
            let noisy = NoiseSource::Sample {
                amplitude: 1.0,
                seed: noise_seed,
            };
            let silent = NoiseSource::Sample {
                amplitude: 0.0,
                seed: noise_seed,
            };

            let critic_trainables = critic.trainable();
            clear_grads(&critic_trainables);
            let fake = forward(plan, weights, &batch.lr, &noisy)?.detach();
            let real_scores = discriminate(&batch.hr, critic)?;
            let fake_scores = discriminate(&fake, critic)?;
            let (d_obj, _) = rsgan_losses(&real_scores, &fake_scores)?;
            if d_obj.value.is_finite() {
                d_obj.tensor.backward()?;
                if let Some(updated) = critic_opt.step(&critic_trainables)? {
                    critic.replace(updated)?;
                }
            } else {
                log::warn!("step {}: skipping critic update, non-finite loss", step);
            }

            let gen_trainables = weights.trainable();
            clear_grads(&gen_trainables);
            clear_grads(&critic.trainable());
            let y1 = forward(plan, weights, &batch.lr, &noisy)?;
            let y0 = forward(plan, weights, &batch.lr, &silent)?;
            let report = perceptual_loss(&y1, &y0, &batch.hr, critic, extractor)?;
            let value = report.total();
            if value.is_finite() {
                report.total_tensor()?.backward()?;
                if let Some(updated) = gen_opt.step(&gen_trainables)? {
                    weights.replace(updated)?;
                }
                ledger.record(value);
            } else {
                log::warn!("step {}: skipping generator update, non-finite loss", step);
            }
            step += 1;
        }

        let mut vsum = 0.0;
        for (i, item) in validation.iter().enumerate() {
            let noise = NoiseSource::Sample {
                amplitude: 1.0,
                seed: cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            };
            let y1 = forward(plan, weights, &item.lr, &noise)?;
            vsum += perceptual_validation(&y1, metric)?;
        }
        let val = vsum / validation.len() as f64;
        let improved = val < stats.best_validation;
        if improved {
            stats.best_validation = val;
            if let Some(path) = &cfg.checkpoint {
                save_weights(path, plan, weights)?;
            }
            if let Some(path) = &cfg.critic_checkpoint {
                save_critic(path, critic)?;
            }
        }
        let train_loss = ledger.mean();
        log::info!(
            "adversarial epoch {}: loss {:.6e}, validation {:.6e}{}",
            epoch,
            train_loss,
            val,
            if improved { " (best)" } else { "" }
        );
        stats.epochs.push(EpochStats {
            epoch,
            train_loss,
            validation: val,
            improved,
        });
        initial = Some(check_divergence(epoch, initial, train_loss, cfg.divergence_factor)?);
    }
    Ok(stats)
}
