use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::optim::{adamw_step, default_decay, AdamWConfig, OptimizerState};

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 50, batch_size: 256, lr: 1e-3, weight_decay: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Top-1 accuracy on the test set after the last epoch.
    pub accuracy: f64,
    pub history: Vec<ProbeEpoch>,
}

fn standardize(train: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (train.rows, train.cols);
    let mut mean = vec![0.0; c];
    for i in 0..n {
        mean.iter_mut().zip(train.row(i)).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut std = vec![0.0; c];
    for i in 0..n {
        std.iter_mut().zip(train.row(i)).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
    (mean, std)
}

fn apply_standardize(x: &FeatureMatrix, mean: &[f64], std: &[f64]) -> Vec<f64> {
    let c = x.cols;
    x.data.iter().enumerate().map(|(i, v)| (v - mean[i % c]) / std[i % c]).collect()
}

/// Logits `x·W + b` for `rows` standardized samples.
fn logits(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (c, k) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let o = &mut out[r * k..(r + 1) * k];
        o.copy_from_slice(b.data());
        for (f, &xv) in x[r * c..(r + 1) * c].iter().enumerate() {
            let wrow = &w.data()[f * k..(f + 1) * k];
            o.iter_mut().zip(wrow).for_each(|(acc, wv)| *acc += xv * wv);
        }
    }
    out
}

fn accuracy(x: &[f64], labels: &[usize], w: &Tensor, b: &Tensor) -> f64 {
    let k = w.shape()[1];
    let z = logits(x, labels.len(), w, b);
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = &z[r * k..(r + 1) * k];
            let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))).unwrap().0;
            arg == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

fn class_labels(labels: &[i32], what: &str) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| usize::try_from(l).map_err(|_| Error::invalid(format!("{what} contains unlabelled record ({l})"))))
        .collect()
}

/// Trains a softmax classifier on standardized frozen features and reports
/// test top-1 accuracy after every epoch. Shuffling uses `seed`.
pub fn linear_probe(
    train: &FeatureMatrix,
    train_labels: &[i32],
    test: &FeatureMatrix,
    test_labels: &[i32],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train.rows != train_labels.len() || test.rows != test_labels.len() {
        return Err(Error::invalid("label count differs from feature rows"));
    }
    if train.cols != test.cols {
        return Err(Error::invalid("train and test feature widths differ"));
    }
    if test.rows == 0 || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("probe needs test samples, epochs >= 1 and batch size >= 1"));
    }
    let ytr = class_labels(train_labels, "train set")?;
    let yte = class_labels(test_labels, "test set")?;
    let mut distinct = ytr.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("train set has fewer than two classes".into()));
    }
    let k = ytr.iter().chain(&yte).max().unwrap() + 1;
    let c = train.cols;
    let (mean, std) = standardize(train);
    let xtr = apply_standardize(train, &mean, &std);
    let xte = apply_standardize(test, &mean, &std);

    let mut params =
        BTreeMap::from([("head.w".to_string(), Tensor::zeros(vec![c, k])), ("head.b".to_string(), Tensor::zeros(vec![k]))]);
    let mut state = OptimizerState::new(&params);
    let hp = AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.rows).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let bsz = chunk.len();
            let mut xb = Vec::with_capacity(bsz * c);
            for &i in chunk {
                xb.extend_from_slice(&xtr[i * c..(i + 1) * c]);
            }
            let mut z = logits(&xb, bsz, &params["head.w"], &params["head.b"]);
            for (r, &i) in chunk.iter().enumerate() {
                let row = &mut z[r * k..(r + 1) * k];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                loss_sum += sum.ln() + mx - row[ytr[i]];
                row.iter_mut().for_each(|v| *v = (*v - mx).exp() / sum);
                row[ytr[i]] -= 1.0;
                row.iter_mut().for_each(|v| *v /= bsz as f64);
            }
            let mut gw = vec![0.0; c * k];
            let mut gb = vec![0.0; k];
            for r in 0..bsz {
                let dz = &z[r * k..(r + 1) * k];
                gb.iter_mut().zip(dz).for_each(|(g, d)| *g += d);
                for f in 0..c {
                    let xv = xb[r * c + f];
                    gw[f * k..(f + 1) * k].iter_mut().zip(dz).for_each(|(g, d)| *g += xv * d);
                }
            }
            let grads = BTreeMap::from([
                ("head.w".to_string(), Tensor::new(vec![c, k], gw)?),
                ("head.b".to_string(), Tensor::new(vec![k], gb)?),
            ]);
            adamw_step(&mut params, &grads, &mut state, cfg.lr, &hp, default_decay)?;
        }
        let test_acc = accuracy(&xte, &yte, &params["head.w"], &params["head.b"]);
        history.push(ProbeEpoch { epoch, train_loss: loss_sum / train.rows as f64, test_acc });
    }
    Ok(ProbeResult { accuracy: history.last().unwrap().test_acc, history })
}

/// `epoch,train_loss,test_acc` rows.
pub fn write_probe_csv(result: &ProbeResult, path: &Path) -> Result<()> {
    let mut s = String::from("epoch,train_loss,test_acc\n");
    for e in &result.history {
        let _ = writeln!(s, "{},{:?},{:?}", e.epoch, e.train_loss, e.test_acc);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
