//! Objectives: definitional examples, f64 oracles, report bookkeeping, and
//! gradient checks for every differentiable term.

mod support;

use std::cell::Cell;
use std::collections::HashMap;

use mgbp::discriminator::{CriticConfig, CriticWeights};
use mgbp::loss::{
    contextual_loss, fidelity_loss, fidelity_validation, l1, l2, neg_local_contrast,
    perceptual_loss, perceptual_validation, psnr, rsgan_losses, total_variation,
    FeatureExtractor, SeededConvExtractor, CX_BANDWIDTH, CX_EPSILON,
};
use mgbp::resample::{downscale, upscale};
use mgbp::tensor::{Shape, Tensor};
use mgbp::Result;
use support::*;

fn pair(seed: u64, shape: Shape) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (
        rand_tensor(&mut r, shape, 0.0, 1.0),
        rand_tensor(&mut r, shape, 0.0, 1.0),
    )
}

#[test]
fn pointwise_losses_match_their_definitions() {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 0.0]).unwrap();
    let y = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -1.0]).unwrap();
    assert_eq!(l1(&x, &y).unwrap().data()[0], 1.0);
    assert_eq!(l1(&x, &x).unwrap().data()[0], 0.0);

    let a = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0]).unwrap();
    let b = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
    assert_eq!(l2(&a, &b).unwrap().data()[0], 4.0);
    assert_eq!(l2(&b, &b).unwrap().data()[0], 0.0);

    let (u, v) = pair(3, Shape::new(2, 3, 9, 11));
    let n = u.shape().numel() as f64;
    let want_l1: f64 = u
        .data()
        .iter()
        .zip(v.data())
        .map(|(p, q)| (*p as f64 - *q as f64).abs())
        .sum::<f64>()
        / n;
    let want_l2: f64 = u
        .data()
        .iter()
        .zip(v.data())
        .map(|(p, q)| (*p as f64 - *q as f64).powi(2))
        .sum::<f64>()
        / n;
    assert!(rel_err(l1(&u, &v).unwrap().data()[0] as f64, want_l1) < 1e-6);
    assert!(rel_err(l2(&u, &v).unwrap().data()[0] as f64, want_l2) < 1e-6);

    // Mismatched shapes are rejected even when they would broadcast.
    let wide = Tensor::zeros(Shape::new(1, 1, 1, 1));
    assert!(l1(&u, &wide).is_err());
    assert!(l2(&u, &wide).is_err());
}

#[test]
fn psnr_follows_the_mean_squared_error() {
    assert!((psnr(0.01) - 20.0).abs() < 1e-12);
    assert!((psnr(1.0) - 0.0).abs() < 1e-12);
}

#[test]
fn fidelity_loss_sums_five_unit_weight_terms() {
    let (y, x) = pair(5, Shape::new(1, 3, 48, 48));

    let report = fidelity_loss(&y, &x).unwrap();
    let names: Vec<&str> = report.terms.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, vec!["l1_x1", "l1_x2", "l1_x4", "l1_x8", "l1_x16"]);
    assert!(report.terms.iter().all(|t| t.weight == 1.0));

    // Identical inputs zero every term.
    let same = fidelity_loss(&x, &x).unwrap();
    assert_eq!(same.total(), 0.0);

    // A constant offset survives every downscale, so each term reads |c|.
    let c = 0.21875f32;
    let shifted = x.add_scalar(c);
    let offset = fidelity_loss(&shifted, &x).unwrap();
    let want = 5.0 * c as f64;
    assert!(
        (offset.total() - want).abs() < 1e-6 * want,
        "constant offset total {} vs {}",
        offset.total(),
        want
    );

    // The absolute difference is symmetric in its arguments.
    let ab = fidelity_loss(&y, &x).unwrap();
    let ba = fidelity_loss(&x, &y).unwrap();
    assert_eq!(ab.total(), ba.total());
}

#[test]
fn fidelity_validation_is_the_full_resolution_squared_error() {
    let (y, x) = pair(6, Shape::new(1, 3, 20, 20));
    assert_eq!(fidelity_validation(&x, &x).unwrap(), 0.0);

    let c = 0.125f32;
    let off = fidelity_validation(&x.add_scalar(c), &x).unwrap();
    assert!((off - (c as f64).powi(2)).abs() < 1e-9);

    let got = fidelity_validation(&y, &x).unwrap();
    let want: f64 = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / y.shape().numel() as f64;
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn equal_scores_cost_both_sides_ln_2() {
    let scores = rand_tensor(&mut rng(7), Shape::new(3, 1, 1, 1), -2.0, 2.0);
    let (d, g) = rsgan_losses(&scores, &scores).unwrap();
    assert!((d.value - std::f64::consts::LN_2).abs() < 1e-9);
    assert!((g.value - std::f64::consts::LN_2).abs() < 1e-9);
    assert!((d.tensor.data()[0] as f64 - std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn adversarial_losses_are_monotone_in_the_score_gap() {
    let zero = Tensor::zeros(Shape::new(1, 1, 1, 1));
    let mut last_d = f64::INFINITY;
    let mut last_g = 0.0;
    for gap in [0.0f32, 1.0, 3.0, 10.0] {
        let real = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![gap]).unwrap();
        let (d, g) = rsgan_losses(&real, &zero).unwrap();
        assert!(d.value < last_d || gap == 0.0);
        assert!(g.value > last_g || gap == 0.0);
        last_d = d.value;
        last_g = g.value;
    }
    // At a gap of 10 the critic loss has almost vanished: ln(1 + e^-10).
    assert!((last_d - (-10.0f64).exp().ln_1p()).abs() < 1e-12);
    assert!((last_d - 4.5398899e-5).abs() < 1e-9);
}

#[test]
fn adversarial_losses_match_the_direct_formula() {
    let mut r = rng(8);
    let real = rand_tensor(&mut r, Shape::new(5, 1, 1, 1), -3.0, 3.0);
    let fake = rand_tensor(&mut r, Shape::new(5, 1, 1, 1), -3.0, 3.0);
    let (d, g) = rsgan_losses(&real, &fake).unwrap();

    let mut want_d = 0.0f64;
    let mut want_g = 0.0f64;
    for (rv, fv) in real.data().iter().zip(fake.data()) {
        let diff = *rv as f64 - *fv as f64;
        want_d += (1.0 + (-diff).exp()).ln();
        want_g += (1.0 + diff.exp()).ln();
    }
    want_d /= 5.0;
    want_g /= 5.0;
    assert!((d.value - want_d).abs() < 1e-7 * want_d.max(1.0));
    assert!((g.value - want_g).abs() < 1e-7 * want_g.max(1.0));
    assert!((d.tensor.data()[0] as f64 - want_d).abs() < 1e-6 * want_d.max(1.0));

    // Swapping the roles swaps the objectives.
    let (d2, g2) = rsgan_losses(&fake, &real).unwrap();
    assert_eq!(d2.value, g.value);
    assert_eq!(g2.value, d.value);
}

#[test]
fn adversarial_losses_reject_unpaired_scores() {
    let three = Tensor::zeros(Shape::new(3, 1, 1, 1));
    let two = Tensor::zeros(Shape::new(2, 1, 1, 1));
    assert!(rsgan_losses(&three, &two).is_err());
    let wide = Tensor::zeros(Shape::new(3, 1, 1, 2));
    assert!(rsgan_losses(&wide, &wide).is_err());
}

/// Uses the image itself as its feature map, so tests can shape feature sets
/// directly.
struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn extract(&self, img: &Tensor) -> Result<Tensor> {
        Ok(img.clone())
    }
}

#[test]
fn contextual_self_match_is_minimal() {
    let extractor = SeededConvExtractor::new(40);
    let y = rand_tensor(&mut rng(41), Shape::new(1, 3, 16, 16), 0.0, 1.0);
    let self_loss = contextual_loss(&y, &y, &extractor).unwrap();
    assert!(
        self_loss.value.abs() < 1e-6,
        "self match should be free, got {}",
        self_loss.value
    );

    let noise = rand_tensor(&mut rng(42), Shape::new(1, 3, 16, 16), -0.2, 0.2);
    let perturbed = contextual_loss(&y.add(&noise).unwrap(), &y, &extractor).unwrap();
    assert!(perturbed.value > self_loss.value);
    assert!(perturbed.value >= 0.0, "the loss is a negated log of a value in (0, 1]");
}

#[test]
fn contextual_loss_ignores_feature_placement() {
    let mut r = rng(43);
    let shape = Shape::new(1, 3, 4, 4);
    let y = rand_tensor(&mut r, shape, 0.0, 1.0);
    let x = rand_tensor(&mut r, shape, 0.0, 1.0);

    // Scatter Y's positions with a fixed permutation, applied consistently
    // across channels.
    let perm: [usize; 16] = [5, 2, 11, 0, 7, 14, 9, 3, 12, 1, 15, 4, 10, 6, 13, 8];
    let src = y.data();
    let mut scattered = vec![0.0f32; src.len()];
    for c in 0..3 {
        for (to, from) in perm.iter().enumerate() {
            scattered[c * 16 + to] = src[c * 16 + from];
        }
    }
    let y_perm = Tensor::from_vec(shape, scattered).unwrap();

    let a = contextual_loss(&y, &x, &IdentityFeatures).unwrap();
    let b = contextual_loss(&y_perm, &x, &IdentityFeatures).unwrap();
    assert!(
        rel_err(a.value, b.value) < 1e-7,
        "permutation moved the loss: {} vs {}",
        a.value,
        b.value
    );
}

/// The contextual objective recomputed with definitional O(N^2) f64 loops.
fn cx_oracle(fy: &[Vec<f64>], fx: &[Vec<f64>]) -> f64 {
    let c = fy[0].len();
    let mut mu = vec![0.0f64; c];
    for v in fy {
        for (m, x) in mu.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= fy.len() as f64;
    }
    let unit = |set: &[Vec<f64>]| -> Vec<Vec<f64>> {
        set.iter()
            .map(|v| {
                let shifted: Vec<f64> = v.iter().zip(&mu).map(|(a, b)| a - b).collect();
                let norm = shifted.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
                shifted.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    };
    let ny = unit(fy);
    let nx = unit(fx);

    let d: Vec<Vec<f64>> = ny
        .iter()
        .map(|yi| {
            nx.iter()
                .map(|xj| 1.0 - yi.iter().zip(xj).map(|(a, b)| a * b).sum::<f64>())
                .collect()
        })
        .collect();
    let affinities: Vec<Vec<f64>> = d
        .iter()
        .map(|row| {
            let dmin = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = row
                .iter()
                .map(|v| ((1.0 - v / (dmin + CX_EPSILON as f64)) / CX_BANDWIDTH as f64).exp())
                .collect();
            let total: f64 = w.iter().sum();
            w.into_iter().map(|v| v / total).collect()
        })
        .collect();

    let mut acc = 0.0;
    for j in 0..nx.len() {
        acc += affinities
            .iter()
            .map(|row| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
    }
    -(acc / nx.len() as f64).ln()
}

#[test]
fn contextual_loss_matches_a_toy_oracle() {
    // Three feature positions with four channels each, fed through the
    // identity extractor: images shaped (1, 4, 1, 3).
    let mut r = rng(44);
    let shape = Shape::new(1, 4, 1, 3);
    let y = rand_tensor(&mut r, shape, -1.0, 1.0);
    let x = rand_tensor(&mut r, shape, -1.0, 1.0);
    let got = contextual_loss(&y, &x, &IdentityFeatures).unwrap().value;

    let feature = |t: &Tensor, pos: usize| -> Vec<f64> {
        (0..4).map(|c| t.data()[c * 3 + pos] as f64).collect()
    };
    let fy: Vec<Vec<f64>> = (0..3).map(|p| feature(&y, p)).collect();
    let fx: Vec<Vec<f64>> = (0..3).map(|p| feature(&x, p)).collect();
    let want = cx_oracle(&fy, &fx);

    assert!(
        (got - want).abs() < 1e-6 * want.abs().max(1.0),
        "contextual loss {} vs oracle {}",
        got,
        want
    );
}

#[test]
fn contextual_loss_needs_two_positions() {
    let one = Tensor::zeros(Shape::new(1, 4, 1, 1));
    assert!(contextual_loss(&one, &one, &IdentityFeatures).is_err());
}

#[test]
fn perceptual_report_carries_the_published_weights() {
    let shape = Shape::new(1, 3, 32, 32);
    let mut r = rng(45);
    let x = rand_tensor(&mut r, shape, 0.0, 1.0);
    let y1 = rand_tensor(&mut r, shape, 0.0, 1.0);
    let y0 = rand_tensor(&mut r, shape, 0.0, 1.0);
    let critic = CriticWeights::init(CriticConfig::default(), 46).unwrap();
    let extractor = SeededConvExtractor::new(47);

    let report = perceptual_loss(&y1, &y0, &x, &critic, &extractor).unwrap();
    let got: Vec<(&str, f64)> = report
        .terms
        .iter()
        .map(|t| (t.name.as_str(), t.weight))
        .collect();
    assert_eq!(
        got,
        vec![
            ("adversarial", 0.001),
            ("noisy_x16", 10.0),
            ("contextual", 0.1),
            ("clean_full", 10.0),
            ("clean_x16", 10.0),
        ]
    );

    // The report total is the weighted term sum, in both precisions.
    let direct: f64 = report.terms.iter().map(|t| t.weight * t.value).sum();
    assert_eq!(report.total(), direct);
    let tensor_total = report.total_tensor().unwrap().data()[0] as f64;
    assert!((tensor_total - direct).abs() < 1e-6 * direct.abs().max(1.0));

    // All terms are non-negative for arbitrary inputs.
    assert!(report.terms.iter().all(|t| t.value >= 0.0));
}

#[test]
fn perfect_output_leaves_only_the_adversarial_floor() {
    let x = rand_tensor(&mut rng(48), Shape::new(1, 3, 32, 32), 0.0, 1.0);
    let critic = CriticWeights::init(CriticConfig::default(), 49).unwrap();
    let extractor = SeededConvExtractor::new(50);

    let report = perceptual_loss(&x, &x, &x, &critic, &extractor).unwrap();
    for name in ["noisy_x16", "clean_full", "clean_x16"] {
        assert_eq!(report.term(name).unwrap().value, 0.0);
    }
    assert!(report.term("contextual").unwrap().value.abs() < 1e-6);
    // Matching scores on both sides of the pairing leave exactly ln 2.
    let floor = 0.001 * std::f64::consts::LN_2;
    assert!((report.total() - floor).abs() < 1e-7);
}

#[test]
fn report_log_lines_round_trip() {
    let (y, x) = pair(51, Shape::new(1, 3, 24, 24));
    let report = fidelity_loss(&y, &x).unwrap();
    let log = report.log_lines(17);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), report.terms.len() + 1);
    for (line, term) in lines.iter().zip(&report.terms) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields[0], "17");
        assert_eq!(fields[1], term.name);
        let parsed: f64 = fields[2].parse().unwrap();
        assert!(rel_err(parsed, term.value) < 1e-8);
    }
    let total_fields: Vec<&str> = lines.last().unwrap().split_whitespace().collect();
    assert_eq!(total_fields[1], "total");
    assert!(rel_err(total_fields[2].parse::<f64>().unwrap(), report.total()) < 1e-8);
}

#[test]
fn validation_metric_runs_at_three_scales() {
    // A constant image stays constant at every scale, so a mean-reading
    // metric sums to three times the constant.
    let c = 0.375f32;
    let flat = Tensor::from_vec(Shape::new(1, 3, 32, 32), vec![c; 3 * 32 * 32]).unwrap();
    let mean_metric = |img: &Tensor| -> Result<f64> {
        Ok(img.data().iter().map(|v| *v as f64).sum::<f64>() / img.shape().numel() as f64)
    };
    let got = perceptual_validation(&flat, &mean_metric).unwrap();
    assert!((got - 3.0 * c as f64).abs() < 1e-6);

    // Exactly the full image and the 2x and 4x reductions are visited.
    let seen = Cell::new(0usize);
    let widths = std::cell::RefCell::new(Vec::new());
    let spy = |img: &Tensor| -> Result<f64> {
        seen.set(seen.get() + 1);
        widths.borrow_mut().push(img.shape().width);
        Ok(0.0)
    };
    perceptual_validation(&flat, &spy).unwrap();
    assert_eq!(seen.get(), 3);
    assert_eq!(*widths.borrow(), vec![32, 16, 8]);
}

/// A deterministic stand-in for a photograph: smooth shading plus oriented
/// texture and a little seeded grain.
fn natural_test_image(h: usize, w: usize) -> Tensor {
    let mut r = rng(52);
    let grain = rand_vec(&mut r, 3 * h * w, -0.02, 0.02);
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let fy = y as f32 / h as f32;
                let fx = x as f32 / w as f32;
                let shade = 0.5 + 0.3 * (2.0 * std::f32::consts::PI * (fy + 0.5 * fx)).sin();
                let texture = 0.1 * (14.0 * fx + 3.0 * c as f32).sin() * (11.0 * fy).cos();
                let v = shade + texture + grain[(c * h + y) * w + x];
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).unwrap()
}

#[test]
fn total_variation_shrinks_across_scales() {
    let img = natural_test_image(64, 64);
    let tv1 = total_variation(&img);
    let tv2 = total_variation(&downscale(&img, 2).unwrap());
    let tv4 = total_variation(&downscale(&img, 4).unwrap());
    assert!(tv1 > tv2 && tv2 > tv4, "{} {} {}", tv1, tv2, tv4);

    let metric = |img: &Tensor| -> Result<f64> { Ok(total_variation(img)) };
    let summed = perceptual_validation(&img, &metric).unwrap();
    assert!((summed - (tv1 + tv2 + tv4)).abs() < 1e-9);
}

#[test]
fn contrast_proxy_prefers_texture_over_blur() {
    let img = natural_test_image(48, 48);
    // An oversmoothed rendition at the same resolution: shrink and blow back
    // up, which strips the grain and fine texture.
    let softened = upscale(&downscale(&img, 2).unwrap(), 2).unwrap();
    let crisp = neg_local_contrast(&img).unwrap();
    let soft = neg_local_contrast(&softened).unwrap();
    assert!(crisp < soft, "crisp {} soft {}", crisp, soft);

    let sliver = Tensor::zeros(Shape::new(1, 3, 1, 5));
    assert!(neg_local_contrast(&sliver).is_err());
}

#[test]
fn every_training_term_is_differentiable() {
    // Content objective, through the resampling pyramid to the image.
    let mut r = rng(53);
    let y = rand_param(&mut r, Shape::new(1, 3, 16, 16), 0.0, 1.0);
    let x = rand_tensor(&mut r, Shape::new(1, 3, 16, 16), 0.0, 1.0);
    let total = fidelity_loss(&y, &x).unwrap().total_tensor().unwrap();
    total.backward().unwrap();
    let analytic = y.grad().expect("image gradient");
    let err = fd_check(
        y.data(),
        &analytic,
        |v| {
            let subs = HashMap::from([(y.id(), v.to_vec())]);
            total.eval_f64(&subs).unwrap()
        },
        1e-6,
        16,
    );
    assert!(err < 1e-3, "content objective gradient error {}", err);

    // Adversarial pair, to the scores.
    let real = rand_param(&mut r, Shape::new(4, 1, 1, 1), -2.0, 2.0);
    let fake = rand_param(&mut r, Shape::new(4, 1, 1, 1), -2.0, 2.0);
    let (d, g) = rsgan_losses(&real, &fake).unwrap();
    d.tensor.backward().unwrap();
    g.tensor.backward().unwrap();
    for (scores, label) in [(&real, "real"), (&fake, "fake")] {
        let analytic = scores.grad().expect("score gradient");
        let err = fd_check(
            scores.data(),
            &analytic,
            |v| {
                let subs = HashMap::from([(scores.id(), v.to_vec())]);
                // Both objectives were backpropagated, so check their sum.
                d.tensor.eval_f64(&subs).unwrap() + g.tensor.eval_f64(&subs).unwrap()
            },
            1e-6,
            8,
        );
        assert!(err < 1e-3, "adversarial {} score gradient error {}", label, err);
    }

    // Contextual objective, through the extractor to the image.
    let extractor = SeededConvExtractor::new(54);
    let yc = rand_param(&mut r, Shape::new(1, 3, 12, 12), 0.0, 1.0);
    let xc = rand_tensor(&mut r, Shape::new(1, 3, 12, 12), 0.0, 1.0);
    let cx = contextual_loss(&yc, &xc, &extractor).unwrap();
    cx.tensor.backward().unwrap();
    let analytic = yc.grad().expect("contextual image gradient");
    assert!(analytic.iter().any(|v| v.abs() > 1e-10));
    let err = fd_check(
        yc.data(),
        &analytic,
        |v| {
            let subs = HashMap::from([(yc.id(), v.to_vec())]);
            cx.tensor.eval_f64(&subs).unwrap()
        },
        1e-6,
        12,
    );
    assert!(err < 1e-3, "contextual gradient error {}", err);
}
