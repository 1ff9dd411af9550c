mod support;

use std::cell::Cell;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use mgbp::data::{open_store, prep_dataset, PrepConfig};
use mgbp::discriminator::{discriminate, CriticConfig, CriticWeights};
use mgbp::format::load_weights;
use mgbp::generator::{forward, GeneratorWeights, NoiseSource};
use mgbp::loss::{rsgan_losses, total_variation, SeededConvExtractor};
use mgbp::plan::{unfold, PlanConfig};
use mgbp::tensor::{Shape, Tensor};
use mgbp::train::{
    train_fidelity, train_perceptual, validation_set, OptimizerState, QhAdamConfig, TrainConfig,
    DEFAULT_BATCHES_PER_EPOCH, DIVERGENCE_FACTOR,
};
use rand::Rng;
use support::{rand_vec, rng};
use tempfile::TempDir;

fn tiny_plan() -> mgbp::plan::NetworkPlan {
    unfold(PlanConfig::new(1, 2, vec![8, 6], 3)).unwrap()
}

fn write_corpus_png(path: &Path, w: u32, h: u32, seed: u64) {
    let mut r = rng(seed);
    let pixels: Vec<u8> = (0..w * h * 3).map(|_| r.gen()).collect();
    let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, pixels).unwrap();
    buf.save(path).unwrap();
}

/// A prepared two-image store whose patches exactly equal the training crop,
/// so every sampled batch is deterministic in content.
fn small_store(dir: &TempDir) -> mgbp::data::PatchStore {
    let input = dir.path().join("in");
    let output = dir.path().join("out");
    std::fs::create_dir(&input).unwrap();
    write_corpus_png(&input.join("a.png"), 64, 64, 61);
    write_corpus_png(&input.join("b.png"), 64, 64, 62);
    prep_dataset(&input, &output, &PrepConfig { patch: 64, stride: 64 }).unwrap();
    open_store(&output).unwrap()
}

fn weight_bits(w: &GeneratorWeights) -> Vec<u32> {
    w.params
        .iter()
        .flat_map(|p| {
            p.kernel
                .data()
                .iter()
                .chain(p.bias.data().iter())
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        })
        .collect()
}

fn critic_bits(w: &CriticWeights) -> Vec<u32> {
    w.trainable()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn optimizer_defaults_are_pinned() {
    let c = QhAdamConfig::default();
    assert_eq!(c.lr, 1e-4);
    assert_eq!(c.beta1, 0.9);
    assert_eq!(c.beta2, 0.999);
    assert_eq!(c.nu1, 0.7);
    assert_eq!(c.nu2, 1.0);
    assert_eq!(c.epsilon, 1e-8);
    assert_eq!(DEFAULT_BATCHES_PER_EPOCH, 100);
    assert_eq!(DIVERGENCE_FACTOR, 10.0);
}

#[test]
fn unit_interpolation_factors_recover_adam() {
    let mut r = rng(71);
    let start = rand_vec(&mut r, 6, -0.8, 0.8);
    let grads: Vec<Vec<f32>> = (0..10).map(|_| rand_vec(&mut r, 6, -1.0, 1.0)).collect();
    let cfg = QhAdamConfig {
        nu1: 1.0,
        nu2: 1.0,
        ..QhAdamConfig::default()
    };

    let mut w = Tensor::param(Shape::new(1, 1, 2, 3), start.clone()).unwrap();
    let mut opt = OptimizerState::new(cfg, &[w.clone()]);
    for g in &grads {
        w.clear_grad();
        let gt = Tensor::from_vec(Shape::new(1, 1, 2, 3), g.clone()).unwrap();
        w.mul(&gt).unwrap().sum_all().backward().unwrap();
        let updated = opt.step(&[w.clone()]).unwrap().expect("finite step");
        w = updated.into_iter().next().unwrap();
    }

    // Textbook Adam in f64, rounding the parameter to f32 after each step
    // exactly as the engine stores it.
    let mut reference: Vec<f64> = start.iter().map(|v| *v as f64).collect();
    let mut m = vec![0.0f64; 6];
    let mut v = vec![0.0f64; 6];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for j in 0..6 {
            let gj = g[j] as f64;
            m[j] = 0.9 * m[j] + 0.1 * gj;
            v[j] = 0.999 * v[j] + 0.001 * gj * gj;
            let m_hat = m[j] / (1.0 - 0.9f64.powi(t));
            let v_hat = v[j] / (1.0 - 0.999f64.powi(t));
            reference[j] = (reference[j] - 1e-4 * m_hat / (v_hat.sqrt() + 1e-8) as f64) as f32 as f64;
        }
    }
    for (got, want) in w.data().iter().zip(&reference) {
        assert!(
            (*got as f64 - want).abs() < 1e-7,
            "engine {} vs Adam reference {}",
            got,
            want
        );
    }
}

#[test]
fn zero_or_missing_gradients_leave_parameters_unchanged() {
    let start = vec![0.3f32, -0.2, 0.9, 0.0];
    let w = Tensor::param(Shape::new(1, 1, 1, 4), start.clone()).unwrap();
    let mut opt = OptimizerState::new(QhAdamConfig::default(), &[w.clone()]);

    let zeros = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0; 4]).unwrap();
    w.mul(&zeros).unwrap().sum_all().backward().unwrap();
    let updated = opt.step(&[w.clone()]).unwrap().expect("finite step");
    assert_eq!(
        updated[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        start.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    w.clear_grad();
    let updated = opt.step(&[w.clone()]).unwrap().expect("finite step");
    assert_eq!(updated[0].data().to_vec(), start, "no gradient must mean no movement");
}

#[test]
fn non_finite_gradients_skip_the_whole_step() {
    let w = Tensor::param(Shape::new(1, 1, 1, 3), vec![0.5, -0.5, 0.25]).unwrap();
    let mut opt = OptimizerState::new(QhAdamConfig::default(), &[w.clone()]);

    let poisoned = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, f32::INFINITY, 1.0]).unwrap();
    w.mul(&poisoned).unwrap().sum_all().backward().unwrap();
    assert!(opt.step(&[w.clone()]).unwrap().is_none());
    assert_eq!(opt.steps(), 0, "a skipped step must not advance the schedule");

    w.clear_grad();
    let good = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 1.0, 1.0]).unwrap();
    w.mul(&good).unwrap().sum_all().backward().unwrap();
    assert!(opt.step(&[w.clone()]).unwrap().is_some());
    assert_eq!(opt.steps(), 1);
}

#[test]
fn quadratic_objective_descends_monotonically() {
    let cfg = QhAdamConfig {
        lr: 1e-2,
        ..QhAdamConfig::default()
    };
    let mut w = Tensor::param(Shape::new(1, 1, 1, 4), vec![3.0, -2.0, 1.5, 2.5]).unwrap();
    let mut opt = OptimizerState::new(cfg, &[w.clone()]);
    let mut last = f64::INFINITY;
    for step in 0..100 {
        w.clear_grad();
        let loss = w.square().sum_all();
        let value = loss.data()[0] as f64;
        assert!(value < last, "step {}: {} did not improve on {}", step, value, last);
        last = value;
        loss.backward().unwrap();
        let updated = opt.step(&[w.clone()]).unwrap().expect("finite step");
        w = updated.into_iter().next().unwrap();
    }
    assert!(last < 3.0 * 3.0 + 2.0 * 2.0, "descent went nowhere");
}

#[test]
fn optimizer_state_is_keyed_by_position() {
    let a = Tensor::param(Shape::new(1, 1, 1, 4), vec![0.0; 4]).unwrap();
    let b = Tensor::param(Shape::new(1, 1, 2, 2), vec![0.0; 4]).unwrap();
    let mut opt = OptimizerState::new(QhAdamConfig::default(), &[a.clone(), b.clone()]);
    assert!(opt.step(&[a.clone()]).is_err(), "parameter count must match");
    assert!(opt.step(&[b, a]).is_err(), "swapped shapes must be caught");
}

#[test]
fn fidelity_training_learns_and_checkpoints_the_best() {
    let dir = TempDir::new().unwrap();
    let store = small_store(&dir);
    let plan = tiny_plan();
    let mut weights = GeneratorWeights::init(&plan, 81);
    let checkpoint = dir.path().join("best.wts");

    let mut cfg = TrainConfig::new(2, 64);
    cfg.batches_per_epoch = 8;
    cfg.batch = 2;
    cfg.seed = 5;
    cfg.checkpoint = Some(checkpoint.clone());
    let opt = QhAdamConfig {
        lr: 1e-3,
        ..QhAdamConfig::default()
    };
    let stats = train_fidelity(&plan, &mut weights, &store, &cfg, opt).unwrap();

    assert_eq!(stats.epochs.len(), 2);
    assert!(
        stats.epochs[1].train_loss < stats.epochs[0].train_loss,
        "epoch losses {:?} did not improve",
        stats.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>()
    );
    assert!(stats.epochs[0].improved, "first epoch always improves on infinity");
    assert!(checkpoint.is_file());

    // Best validation is the running minimum and the checkpoint reproduces it.
    let mut best = f64::INFINITY;
    for e in &stats.epochs {
        assert_eq!(e.improved, e.validation < best);
        best = best.min(e.validation);
    }
    assert_eq!(stats.best_validation, best);

    let reloaded = load_weights(&checkpoint, &plan).unwrap();
    let validation = validation_set(&store, 64).unwrap();
    let silent = NoiseSource::Sample { amplitude: 0.0, seed: 0 };
    let mut vsum = 0.0;
    for item in &validation {
        let y0 = forward(&plan, &reloaded, &item.lr, &silent).unwrap();
        vsum += mgbp::loss::fidelity_validation(&y0, &item.hr).unwrap();
    }
    let recomputed = vsum / validation.len() as f64;
    assert!(
        (recomputed - stats.best_validation).abs() < 1e-12,
        "checkpoint validates at {} but the run reported {}",
        recomputed,
        stats.best_validation
    );
}

#[test]
fn training_runs_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let store = small_store(&dir);
    let plan = tiny_plan();
    let mut cfg = TrainConfig::new(1, 64);
    cfg.batches_per_epoch = 3;
    cfg.batch = 2;
    cfg.seed = 17;
    let opt = QhAdamConfig {
        lr: 1e-3,
        ..QhAdamConfig::default()
    };

    let mut first = GeneratorWeights::init(&plan, 82);
    let mut second = first.clone();
    let a = train_fidelity(&plan, &mut first, &store, &cfg, opt).unwrap();
    let b = train_fidelity(&plan, &mut second, &store, &cfg, opt).unwrap();
    assert_eq!(a, b, "stats must match bit for bit");
    assert_eq!(weight_bits(&first), weight_bits(&second));
}

#[test]
fn runaway_training_aborts_with_a_structured_error() {
    let dir = TempDir::new().unwrap();
    let store = small_store(&dir);
    let plan = tiny_plan();
    let mut weights = GeneratorWeights::init(&plan, 83);
    let mut cfg = TrainConfig::new(6, 64);
    cfg.batches_per_epoch = 1;
    cfg.batch = 1;
    cfg.seed = 7;
    let opt = QhAdamConfig {
        lr: 50.0,
        ..QhAdamConfig::default()
    };
    match train_fidelity(&plan, &mut weights, &store, &cfg, opt) {
        Err(mgbp::Error::Diverged { epoch, factor, .. }) => {
            assert!(epoch >= 1, "the first epoch sets the baseline");
            assert_eq!(factor, DIVERGENCE_FACTOR);
        }
        Err(other) => panic!("expected a divergence abort, got {}", other),
        Ok(_) => panic!("a 50.0 learning rate should not converge"),
    }
}

#[test]
fn adversarial_alternation_updates_both_networks() {
    let dir = TempDir::new().unwrap();
    let store = small_store(&dir);
    let plan = tiny_plan();
    let mut weights = GeneratorWeights::init(&plan, 84);
    let critic_config = CriticConfig { widths: vec![8, 8, 12, 16] };
    let mut critic = CriticWeights::init(critic_config, 85).unwrap();
    let gen_bits_before = weight_bits(&weights);
    let critic_bits_before = critic_bits(&critic);

    let extractor = SeededConvExtractor::new(86);
    let metric_calls = Cell::new(0usize);
    let metric = |img: &Tensor| {
        metric_calls.set(metric_calls.get() + 1);
        Ok(total_variation(img))
    };

    let mut cfg = TrainConfig::new(1, 64);
    cfg.batches_per_epoch = 2;
    cfg.batch = 2;
    cfg.seed = 29;
    let stats = train_perceptual(
        &plan,
        &mut weights,
        &mut critic,
        &extractor,
        &metric,
        &store,
        &cfg,
        QhAdamConfig::default(),
        QhAdamConfig::default(),
    )
    .unwrap();

    assert_eq!(stats.epochs.len(), 1);
    assert!(stats.epochs[0].train_loss.is_finite());
    assert!(stats.epochs[0].validation.is_finite());
    assert_ne!(weight_bits(&weights), gen_bits_before, "generator never moved");
    assert_ne!(critic_bits(&critic), critic_bits_before, "critic never moved");
    assert_eq!(
        metric_calls.get(),
        store.images.len() * 3,
        "validation must apply the metric at three scales per held-out item"
    );

    // The critic's relativistic loss on a fresh pair sits in its healthy band.
    let mut r = rng(87);
    let seed: u64 = r.gen();
    let validation = validation_set(&store, 64).unwrap();
    let noisy = NoiseSource::Sample { amplitude: 1.0, seed };
    let y1 = forward(&plan, &weights, &validation[0].lr, &noisy).unwrap().detach();
    let real = discriminate(&validation[0].hr, &critic).unwrap();
    let fake = discriminate(&y1, &critic).unwrap();
    let (d_obj, g_obj) = rsgan_losses(&real, &fake).unwrap();
    assert!(d_obj.value > 0.0 && d_obj.value < 4.0, "critic loss {} left (0, 4)", d_obj.value);
    assert!(g_obj.value.is_finite());
}
