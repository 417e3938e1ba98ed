use ge2ae::analysis::{
    cka, cka_matrix, extract_features, fit_power_law, hsic, linear_probe, write_cka_csv, FeatureMatrix, ProbeConfig,
};
use ge2ae::model::{ModelConfig, ModelParams};
use ge2ae::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Orthogonal matrix from Gram-Schmidt on random columns.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

fn transform(x: &FeatureMatrix, m: &DMatrix<f64>, scale: f64) -> FeatureMatrix {
    let xm = DMatrix::from_row_slice(x.rows, x.cols, &x.data) * m * scale;
    let mut data = Vec::with_capacity(x.rows * m.ncols());
    for r in 0..x.rows {
        data.extend(xm.row(r).iter());
    }
    FeatureMatrix::new(x.rows, m.ncols(), data).unwrap()
}

#[test]
fn prescribed_spectrum_is_recovered() {
    let n = 64;
    let mut data = vec![0.0; n * n];
    for i in 1..=n {
        data[(i - 1) * n + (i - 1)] = (n as f64 * (i as f64).powf(-1.5)).sqrt();
    }
    let f = FeatureMatrix::new(n, n, data).unwrap();
    let fit = fit_power_law(&f, 1, n, false).unwrap();
    assert!((fit.alpha - 1.5).abs() <= 1e-6, "{}", fit.alpha);
    for (j, l) in fit.eigenvalues.iter().enumerate() {
        assert!((l - ((j + 1) as f64).powf(-1.5)).abs() <= 1e-12);
    }
    let fit = fit_power_law(&f, 10, 32, false).unwrap();
    assert!((fit.alpha - 1.5).abs() <= 1e-6);
}

#[test]
fn isotropic_features_are_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = orthogonal(&mut rng, 32);
    let data: Vec<f64> = (0..32).flat_map(|r| q.row(r).iter().map(|v| v * 3.0).collect::<Vec<_>>()).collect();
    let f = FeatureMatrix::new(32, 32, data).unwrap();
    let fit = fit_power_law(&f, 1, 32, false).unwrap();
    assert!(fit.alpha.abs() <= 1e-6, "{}", fit.alpha);
}

#[test]
fn eigenvalues_are_a_trace_decomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_features(&mut rng, 50, 20);
    let fit = fit_power_law(&f, 1, 20, false).unwrap();
    let trace: f64 = f.data.iter().map(|v| v * v).sum::<f64>() / 50.0;
    let sum: f64 = fit.eigenvalues.iter().sum();
    assert!((sum - trace).abs() <= 1e-8 * trace);
    assert!(fit.eigenvalues.iter().all(|l| *l >= 0.0));
    assert!(fit.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn cka_hand_case_and_identities() {
    let x1 = FeatureMatrix::new(2, 1, vec![1.0, 0.0]).unwrap();
    let x2 = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
    let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let l = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
    assert!((hsic(&k, &l).unwrap() - 0.25).abs() <= 1e-15);
    assert!((cka(&x1, &x2).unwrap() - 1.0).abs() <= 1e-15);

    // explicit H·K·H with the centering matrix
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_features(&mut rng, 9, 4);
    let y = random_features(&mut rng, 9, 6);
    let m = |f: &FeatureMatrix| DMatrix::from_row_slice(f.rows, f.cols, &f.data);
    let h = DMatrix::<f64>::identity(9, 9) - DMatrix::from_element(9, 9, 1.0 / 9.0);
    let (kx, ly) = (m(&x) * m(&x).transpose(), m(&y) * m(&y).transpose());
    let hk = &h * &kx * &h;
    let hl = &h * &ly * &h;
    let want = hk.dot(&hl) / 64.0;
    assert!((hsic(&kx, &ly).unwrap() - want).abs() <= 1e-12 * want.abs().max(1.0));
}

#[test]
fn layer_matrix_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layers: Vec<FeatureMatrix> = (0..4).map(|i| random_features(&mut rng, 20, 3 + i)).collect();
    let m = cka_matrix(&layers, &layers).unwrap();
    for i in 0..4 {
        assert!((m[i][i] - 1.0).abs() <= 1e-9);
        for j in 0..4 {
            assert!((0.0..=1.0 + 1e-12).contains(&m[i][j]));
            assert!((m[i][j] - m[j][i]).abs() <= 1e-9);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cka.csv");
    write_cka_csv(&m, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("layer_a,layer_b,cka\n"));
    assert_eq!(text.lines().count(), 17);
}

#[test]
fn probe_on_permuted_labels_is_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut accs = Vec::new();
    for seed in 0..5u64 {
        let tr = random_features(&mut rng, 600, 16);
        let te = random_features(&mut rng, 1000, 16);
        let mut ytr: Vec<i32> = (0..600).map(|i| i % 10).collect();
        let mut yte: Vec<i32> = (0..1000).map(|i| i % 10).collect();
        ytr.shuffle(&mut rng);
        yte.shuffle(&mut rng);
        let cfg = ProbeConfig { epochs: 5, ..ProbeConfig::default() };
        accs.push(linear_probe(&tr, &ytr, &te, &yte, &cfg, seed).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.10).abs() <= 0.03, "{accs:?}");
}

#[test]
fn features_follow_dataset_order() {
    let cfg = ModelConfig { in_chans: 3, ..ModelConfig::micro() };
    let params = ModelParams::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Tensor::from_fn(vec![8, 8, 3], |_| rng.random_range(0.0..1.0));
    let b = Tensor::from_fn(vec![8, 8, 3], |_| rng.random_range(0.0..1.0));
    let imgs = vec![a.clone(), b, a];
    let f = extract_features(&cfg, &params, &imgs, &[0, 1]).unwrap();
    assert_eq!(f.len(), 2);
    for m in &f {
        assert_eq!((m.rows, m.cols), (3, cfg.enc_dim));
        assert_eq!(m.row(0), m.row(2));
        assert_ne!(m.row(0), m.row(1));
    }
    assert!(extract_features(&cfg, &params, &imgs, &[2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cka_invariances(seed in any::<u64>(), scale in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_features(&mut rng, 12, 5);
        let y = random_features(&mut rng, 12, 4);
        let r = orthogonal(&mut rng, 5);
        let xr = transform(&x, &r, scale);
        prop_assert!((cka(&x, &xr).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert!((cka(&x, &y).unwrap() - cka(&xr, &y).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn alpha_ignores_scale_and_row_order(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_features(&mut rng, 40, 16);
        let base = fit_power_law(&x, 2, 12, false).unwrap().alpha;
        let scaled = FeatureMatrix::new(40, 16, x.data.iter().map(|v| v * scale).collect()).unwrap();
        prop_assert!((fit_power_law(&scaled, 2, 12, false).unwrap().alpha - base).abs() <= 1e-9);
        let mut order: Vec<usize> = (0..40).collect();
        order.shuffle(&mut rng);
        let permuted = FeatureMatrix::new(40, 16, order.iter().flat_map(|&r| x.row(r).to_vec()).collect()).unwrap();
        prop_assert!((fit_power_law(&permuted, 2, 12, false).unwrap().alpha - base).abs() <= 1e-9);
    }
}
