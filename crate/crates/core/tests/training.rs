use std::collections::BTreeMap;
use std::fs;

use ge2ae::model::ModelConfig;
use ge2ae::training::data::{encode_cifar10, CIFAR_RECORD};
use ge2ae::training::{
    adamw_step, augment, ingest_dataset, load_checkpoint, lr_at_step, pretrain, restore_model, save_checkpoint,
    synthetic_cifar, AdamWConfig, Checkpoint, DatasetFormat, OptimizerState, TrainRunConfig, LOG_HEADER,
};
use ge2ae::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_run(dir: &std::path::Path, seed: u64) -> TrainRunConfig {
    TrainRunConfig {
        model: ModelConfig { image_size: 8, in_chans: 3, ..ModelConfig::micro() },
        epochs: 3,
        batch_size: 5,
        warmup_epochs: 1,
        base_lr: 1e-2,
        seed,
        checkpoint_every: 2,
        output_dir: dir.to_path_buf(),
        ..TrainRunConfig::default()
    }
}

#[test]
fn schedule_landmarks() {
    let base = 1e-3;
    assert_eq!(lr_at_step(10, 110, 10, base).unwrap(), base);
    assert!((lr_at_step(60, 110, 10, base).unwrap() - base / 2.0).abs() < 1e-18);
    assert!(lr_at_step(100_009, 100_010, 10, base).unwrap() < 1e-12);
    assert_eq!(lr_at_step(0, 110, 10, base).unwrap(), base / 10.0);
    assert!(lr_at_step(110, 110, 10, base).is_err());
    assert!(lr_at_step(0, 10, 10, base).is_err());
}

/// Adam written out by hand, compared step by step with `adamw_step` at zero decay.
#[test]
fn zero_decay_matches_plain_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let init: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut params = BTreeMap::from([("w".to_string(), Tensor::new(vec![2, 3], init.clone()).unwrap())]);
    let mut state = OptimizerState::new(&params);
    let hp = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let (b1, b2, eps, lr) = (0.9f64, 0.95f64, 1e-8, 3e-3);
    let (mut theta, mut m, mut v) = (init, vec![0.0; 6], vec![0.0; 6]);
    for t in 1..=25 {
        let g: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..6 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![2, 3], g).unwrap())]);
        adamw_step(&mut params, &grads, &mut state, lr, &hp, |_, _| true).unwrap();
        for (a, b) in params["w"].data().iter().zip(&theta) {
            assert!((a - b).abs() <= 1e-12, "step {t}");
        }
    }
    assert_eq!(state.step, 25);
}

#[test]
fn adamw_examples() {
    let mut p = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![1, 1]))]);
    let mut s = OptimizerState::new(&p);
    let hp = AdamWConfig { weight_decay: 0.0, ..Default::default() };
    let g = BTreeMap::from([("w".to_string(), Tensor::ones(vec![1, 1]))]);
    adamw_step(&mut p, &g, &mut s, 0.1, &hp, |_, _| true).unwrap();
    assert_eq!(p["w"].item(), -0.1 / (1.0 + 1e-8));

    let mut p = BTreeMap::from([("w".to_string(), Tensor::full(vec![2, 2], 2.0))]);
    let mut s = OptimizerState::new(&p);
    let hp = AdamWConfig { weight_decay: 0.05, ..Default::default() };
    let g = BTreeMap::from([("w".to_string(), Tensor::zeros(vec![2, 2]))]);
    adamw_step(&mut p, &g, &mut s, 0.1, &hp, |_, _| true).unwrap();
    assert!(p["w"].data().iter().all(|v| (v - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15));

    let bad = BTreeMap::from([("w".to_string(), Tensor::full(vec![2, 2], f64::NAN))]);
    let err = adamw_step(&mut p, &bad, &mut s, 0.1, &hp, |_, _| true).unwrap_err();
    assert!(err.to_string().contains('w'));
}

#[test]
fn cifar_file_arithmetic_and_order() {
    let store = synthetic_cifar(10_000, 1);
    let bytes = encode_cifar10(&store).unwrap();
    assert_eq!(bytes.len(), 30_730_000);
    assert_eq!(bytes.len(), 10_000 * CIFAR_RECORD);
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("data_batch_2.bin"), &bytes[..CIFAR_RECORD * 3]).unwrap();
    fs::write(dir.path().join("data_batch_1.bin"), &bytes[CIFAR_RECORD * 3..CIFAR_RECORD * 5]).unwrap();
    let loaded = ingest_dataset(dir.path(), DatasetFormat::Cifar10Bin).unwrap();
    assert_eq!(loaded.len(), 5);
    // batch_1 sorts first
    assert_eq!(loaded.image_bytes(0), store.image_bytes(3));
    assert_eq!(loaded.image_bytes(2), store.image_bytes(0));
    let img = loaded.image(0);
    assert_eq!(img.shape(), &[32, 32, 3]);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));

    fs::write(dir.path().join("data_batch_3.bin"), &bytes[..CIFAR_RECORD + 7]).unwrap();
    match ingest_dataset(dir.path(), DatasetFormat::Cifar10Bin) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
        other => panic!("expected a format error, got {:?}", other.map(|s| s.len())),
    }
}

#[test]
fn checkpoint_bytes_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&tiny_run(dir.path(), 1), &synthetic_cifar(12, 1)).unwrap();
    let first = dir.path().join("final.ge2a");
    let again = dir.path().join("again.ge2a");
    save_checkpoint(&load_checkpoint(&first).unwrap(), &again).unwrap();
    assert_eq!(fs::read(&first).unwrap(), fs::read(&again).unwrap());
    assert_eq!(fs::read(&first).unwrap(), out.checkpoint.to_bytes().unwrap());

    let mut bytes = fs::read(&first).unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("bad magic"));

    let restored = restore_model(&load_checkpoint(&first).unwrap()).unwrap();
    assert_eq!(restored.params.tensors(), out.params.tensors());
    assert_eq!(restored.normalization, out.normalization);
    assert_eq!(restored.optimizer.step, out.optimizer.step);
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let data = synthetic_cifar(12, 4);
    pretrain(&tiny_run(a.path(), 7), &data).unwrap();
    pretrain(&tiny_run(b.path(), 7), &data).unwrap();
    pretrain(&tiny_run(c.path(), 8), &data).unwrap();
    for name in ["final.ge2a", "checkpoint_epoch0002.ge2a", "log.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    assert_ne!(fs::read(a.path().join("final.ge2a")).unwrap(), fs::read(c.path().join("final.ge2a")).unwrap());

    let log = fs::read_to_string(a.path().join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert_eq!(lines.count(), 3);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainRunConfig { epochs: 1, warmup_epochs: 0, base_lr: 0.0, ..tiny_run(dir.path(), 3) };
    let out = pretrain(&cfg, &synthetic_cifar(7, 2)).unwrap();
    // initialization consumes the generator's first word
    let seed = ChaCha8Rng::seed_from_u64(3).random::<u64>();
    let init = ge2ae::model::ModelParams::init(&cfg.model, seed).unwrap();
    assert_eq!(out.params.tensors(), init.tensors());
    assert_eq!(out.optimizer.step, 2);
}

#[test]
fn augmentation_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::from_fn(vec![32, 32, 3], |_| rng.random_range(0.0..1.0));
    for seed in 0..20 {
        let a = augment(&img, seed);
        assert_eq!(a.shape(), &[32, 32, 3]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, augment(&img, seed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_continuous(total in 2u64..400, warm_frac in 0.0f64..0.9, base in 1e-6f64..1.0) {
        let warmup = ((total as f64 * warm_frac) as u64).min(total - 1);
        let bound = base * f64::max(if warmup > 0 { 1.0 / warmup as f64 } else { 0.0 }, std::f64::consts::PI / (total - warmup) as f64);
        let mut prev = lr_at_step(0, total, warmup, base).unwrap();
        for s in 1..total {
            let lr = lr_at_step(s, total, warmup, base).unwrap();
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
            prop_assert!((lr - prev).abs() <= bound * (1.0 + 1e-9));
            prev = lr;
        }
    }
}
