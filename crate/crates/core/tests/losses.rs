use ge2ae::autodiff::Graph;
use ge2ae::fourier::{dft2d, Spectrum2D};
use ge2ae::losses::{
    focal_frequency_loss, frequency_distance_gamma, pixel_reconstruction_loss, total_loss, total_loss_var, LossConfig,
    LossToggles, Predictions,
};
use ge2ae::model::{patchify, random_masking, MaskPlan};
use ge2ae::{ComplexTensor, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(rng: &mut ChaCha8Rng, h: usize, c: usize) -> Tensor {
    Tensor::from_fn(vec![h, h, c], |_| rng.random_range(0.0..1.0))
}

fn spectrum(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Spectrum2D {
    let re = Tensor::from_fn(shape.clone(), |_| rng.random_range(-2.0..2.0));
    let im = Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0));
    Spectrum2D::new(ComplexTensor::from_parts(re, im).unwrap()).unwrap()
}

/// Masked MSE by explicit pixel coordinates rather than patch rows.
fn masked_mse_oracle(pred: &Tensor, target: &Tensor, plan: &MaskPlan, p: usize) -> f64 {
    let (h, c) = (pred.shape()[0], pred.shape()[2]);
    let g = h / p;
    let masked: std::collections::BTreeSet<usize> = plan.masked().iter().copied().collect();
    let (mut acc, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..h {
            if !masked.contains(&((y / p) * g + x / p)) {
                continue;
            }
            for ch in 0..c {
                acc += (pred.at(&[y, x, ch]) - target.at(&[y, x, ch])).powi(2);
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[test]
fn pixel_loss_matches_coordinate_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..5 {
        let (pred, target) = (image(&mut rng, 8, 3), image(&mut rng, 8, 3));
        let plan = random_masking(16, 0.75, seed).unwrap();
        let (got, degenerate) = pixel_reconstruction_loss(&pred, &target, &plan, 2).unwrap();
        assert!(!degenerate);
        assert!((got - masked_mse_oracle(&pred, &target, &plan, 2)).abs() <= 1e-12);
    }
}

#[test]
fn pixel_loss_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let target = image(&mut rng, 4, 1);
    assert_eq!(pixel_reconstruction_loss(&target, &target, &random_masking(4, 0.5, 0).unwrap(), 2).unwrap(), (0.0, false));
    let none = MaskPlan::identity(4);
    assert_eq!(pixel_reconstruction_loss(&image(&mut rng, 4, 1), &target, &none, 2).unwrap(), (0.0, true));
    // one masked patch carrying a constant error
    let plan = MaskPlan::new(vec![0, 1, 3, 2], 3).unwrap();
    let mut pred = target.clone();
    for y in 2..4 {
        for x in 0..2 {
            pred.set(&[y, x, 0], target.at(&[y, x, 0]) + 0.3);
        }
    }
    let (l, _) = pixel_reconstruction_loss(&pred, &target, &plan, 2).unwrap();
    assert!((l - 0.09).abs() < 1e-15);
}

#[test]
fn gamma_and_single_bin_focal() {
    assert_eq!(frequency_distance_gamma((3.0, 4.0), (0.0, 0.0)), 5.0);
    assert_eq!(frequency_distance_gamma((1.5, -2.0), (1.5, -2.0)), 0.0);
    assert_eq!(frequency_distance_gamma((1.0, 1.0), (1.0, -1.0)), 2.0);
    let one = |re: f64| Spectrum2D::new(ComplexTensor::new(vec![1, 1, 1], vec![re], vec![0.0]).unwrap()).unwrap();
    let l = focal_frequency_loss(&one(2.0), &one(0.0), 1.0).unwrap();
    assert!((l - 8.0).abs() < 1e-10);
}

#[test]
fn focal_with_zero_beta_is_spectral_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (spectrum(&mut rng, vec![4, 4, 1]), spectrum(&mut rng, vec![4, 4, 1]));
    let mut acc = 0.0;
    for u in 0..4 {
        for v in 0..4 {
            let (p, t) = (a.at(u, v, 0), b.at(u, v, 0));
            acc += (p.0 - t.0).powi(2) + (p.1 - t.1).powi(2);
        }
    }
    assert!((focal_frequency_loss(&a, &b, 0.0).unwrap() - acc / 16.0).abs() <= 1e-12);
}

#[test]
fn perfect_predictions_give_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = image(&mut rng, 8, 3);
    let gf = dft2d(&img).unwrap();
    let plan = random_masking(16, 0.75, 1).unwrap();
    // P equals the image only on masked patches; visible patches hold garbage
    let mut pixels = patchify(&img, 2).unwrap();
    let w = pixels.shape()[1];
    for &i in plan.visible() {
        pixels.data_mut()[i * w..(i + 1) * w].iter_mut().for_each(|v| *v = 9.0);
    }
    let pixels = ge2ae::model::unpatchify(&pixels, 2, 3).unwrap().reshape(vec![8, 8, 3]).unwrap();
    let b = total_loss(&pixels, &gf, &img, &gf, &img, &plan, 2, &LossConfig::default()).unwrap();
    assert_eq!((b.pix_re, b.freq_con, b.freq_re), (0.0, 0.0, 0.0));
    assert!(b.pix_con <= 1e-20 && b.total <= 1e-20, "{b:?}");
}

#[test]
fn pixel_only_row_and_lambda_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = image(&mut rng, 8, 3);
    let gf = dft2d(&img).unwrap();
    let pred = image(&mut rng, 8, 3);
    let q = spectrum(&mut rng, vec![8, 8, 3]);
    let plan = random_masking(16, 0.75, 2).unwrap();
    let pix = LossConfig { toggles: LossToggles::preset("pix-only").unwrap(), ..Default::default() };
    let b = total_loss(&pred, &q, &img, &gf, &img, &plan, 2, &pix).unwrap();
    assert_eq!(b.total, b.pix_re);
    assert_eq!(b.terms()[1..], [0.0; 3]);

    let zero = LossConfig { lambda: 0.0, ..Default::default() };
    let b = total_loss(&pred, &q, &img, &gf, &img, &plan, 2, &zero).unwrap();
    assert_eq!(b.total, b.pix_re + b.freq_con);
}

fn graph_breakdown(toggles: LossToggles, seed: u64) -> ge2ae::losses::LossBreakdown {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = Tensor::from_fn(vec![2, 8, 8, 1], |_| rng.random_range(0.0..1.0));
    let pixels = Tensor::from_fn(vec![2, 8, 8, 1], |_| rng.random_range(0.0..1.0));
    let re = Tensor::from_fn(vec![2, 8, 8, 1], |_| rng.random_range(-3.0..3.0));
    let im = Tensor::from_fn(vec![2, 8, 8, 1], |_| rng.random_range(-3.0..3.0));
    let plans = [random_masking(16, 0.75, seed).unwrap(), random_masking(16, 0.75, seed + 1).unwrap()];
    let mut g = Graph::new();
    let p = g.param("P", pixels);
    let (qr, qi) = (g.param("re", re), g.param("im", im));
    let pred = Predictions { pixels: Some(p), spectrum: Some((qr, qi)) };
    let cfg = LossConfig { toggles, ..Default::default() };
    let lv = total_loss_var(&mut g, pred, &target, &target, &plans, 2, false, &cfg).unwrap();
    lv.breakdown(&g)
}

#[test]
fn graph_and_value_paths_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let target = image(&mut rng, 8, 2);
    let pixels = image(&mut rng, 8, 2);
    let q = spectrum(&mut rng, vec![8, 8, 2]);
    let plan = random_masking(16, 0.75, 8).unwrap();
    let gf = dft2d(&target).unwrap();
    let cfg = LossConfig::default();
    let want = total_loss(&pixels, &q, &target, &gf, &target, &plan, 2, &cfg).unwrap();

    let mut g = Graph::new();
    let batch = |t: &Tensor| t.clone().reshape(vec![1, 8, 8, 2]).unwrap();
    let p = g.param("P", batch(&pixels));
    let (qre, qim) = q.values().clone().into_parts();
    let qr = g.param("re", batch(&qre));
    let qi = g.param("im", batch(&qim));
    let pred = Predictions { pixels: Some(p), spectrum: Some((qr, qi)) };
    let got = total_loss_var(&mut g, pred, &batch(&target), &batch(&target), &[plan], 2, false, &cfg).unwrap().breakdown(&g);
    for (a, b) in got.terms().iter().zip(want.terms()) {
        assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{got:?} vs {want:?}");
    }
}

#[test]
fn freq_con_ignores_visible_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = Tensor::from_fn(vec![1, 8, 8, 3], |_| rng.random_range(0.0..1.0));
    let plan = random_masking(16, 0.75, 9).unwrap();
    let mut g = Graph::new();
    let p = g.param("P", Tensor::from_fn(vec![1, 8, 8, 3], |_| rng.random_range(0.0..1.0)));
    let cfg = LossConfig { toggles: LossToggles { pix_re: false, freq_con: true, freq_re: false, pix_con: false }, ..Default::default() };
    let lv = total_loss_var(&mut g, Predictions { pixels: Some(p), spectrum: None }, &target, &target, std::slice::from_ref(&plan), 2, false, &cfg).unwrap();
    let grad = patchify(&g.backward(lv.total).unwrap()["P"], 2).unwrap();
    let w = grad.shape()[1];
    for &i in plan.visible() {
        assert!(grad.data()[i * w..(i + 1) * w].iter().all(|v| *v == 0.0));
    }
    assert!(plan.masked().iter().any(|&i| grad.data()[i * w..(i + 1) * w].iter().any(|v| *v != 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn terms_are_nonnegative_and_toggle_independent(seed in 0u64..10_000, mask in 1u8..16) {
        let toggles = LossToggles { pix_re: mask & 1 != 0, freq_con: mask & 2 != 0, freq_re: mask & 4 != 0, pix_con: mask & 8 != 0 };
        let part = graph_breakdown(toggles, seed);
        let full = graph_breakdown(LossToggles::ALL, seed);
        let on = [toggles.pix_re, toggles.freq_con, toggles.freq_re, toggles.pix_con];
        for ((p, f), enabled) in part.terms().iter().zip(full.terms()).zip(on) {
            prop_assert!(*p >= 0.0);
            if enabled { prop_assert_eq!(*p, f); } else { prop_assert_eq!(*p, 0.0); }
        }
        let want = part.pix_re + part.freq_con + 0.5 * (part.freq_re + part.pix_con);
        prop_assert!((part.total - want).abs() <= 1e-12 * want.max(1.0));
    }
}
