//! Pretraining loop and its periphery: datasets, augmentation, AdamW with a
//! warmup and cosine schedule, and checkpoint persistence.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod optim;
mod run;
pub mod schedule;
pub mod synthetic;

use std::path::PathBuf;

pub use augment::{augment, AugmentParams, Crop};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DType, StoredTensor};
pub use data::{ingest_dataset, DatasetFormat, ImageStore, Normalization};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use run::{pretrain, pretrain_with, restore_model, EpochRecord, PretrainOutcome, RestoredModel, LOG_HEADER};
pub use schedule::{lr_at_step, scaled_lr};
pub use synthetic::synthetic_cifar;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

/// Where the training images come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub path: PathBuf,
    pub format: DatasetFormat,
    /// Keep only the first `limit` records; 0 keeps all.
    pub limit: usize,
    /// Held-out split used by probing and analysis; empty falls back to `path`.
    pub test_path: PathBuf,
    pub test_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::new(),
            format: DatasetFormat::Cifar10Bin,
            limit: 0,
            test_path: PathBuf::new(),
            test_limit: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate per 256 images; the effective peak is `base_lr·batch/256`.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub data: DataConfig,
    /// Run directory; empty disables all file output.
    pub output_dir: PathBuf,
}

impl Default for TrainRunConfig {
    /// The large-scale pretraining recipe.
    fn default() -> Self {
        TrainRunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            epochs: 800,
            batch_size: 4096,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            warmup_epochs: 40,
            seed: 0,
            augment: true,
            checkpoint_every: 0,
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/ge2ae"),
        }
    }
}

impl TrainRunConfig {
    /// 32² toy profile: 4×128 encoder, 2×64 decoders, batch 128, warmup 2, 20 epochs.
    pub fn toy() -> Self {
        TrainRunConfig {
            model: ModelConfig::toy(),
            epochs: 20,
            batch_size: 128,
            warmup_epochs: 2,
            ..Self::default()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: optim::ADAM_EPS, weight_decay: self.weight_decay }
    }

    /// Errors name the offending config key.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if let Err(e) = self.model.validate() {
            let m = &self.model;
            let key = if !(0.0..1.0).contains(&m.mask_ratio) || m.num_visible() == 0 {
                "model.mask_ratio"
            } else if m.enc_heads == 0 || m.enc_dim % m.enc_heads != 0 {
                "model.enc_heads"
            } else if m.dec_heads == 0 || m.dec_dim % m.dec_heads != 0 {
                "model.dec_heads"
            } else if !(m.ln_eps > 0.0) {
                "model.ln_eps"
            } else if m.in_chans == 0 || m.enc_depth == 0 || m.dec_depth == 0 || m.mlp_ratio == 0 {
                "model.enc_depth"
            } else {
                "model.patch_size"
            };
            return Err((key, e.to_string()));
        }
        if let Err(e) = self.loss.validate() {
            let key = if !self.loss.toggles.any() { "loss.toggles.pix_re" } else { "loss.lambda" };
            return Err((key, e.to_string()));
        }
        if self.epochs < 1 {
            return Err(("train.epochs", "must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(("train.batch_size", "must be >= 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(("train.warmup_epochs", format!("must be < train.epochs ({})", self.epochs)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(("train.base_lr", "must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(("train.weight_decay", "must be finite and >= 0".into()));
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err((key, "must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn check(&self) -> Result<()> {
        self.validate().map_err(|(key, reason)| Error::Config { key: key.into(), location: "resolved config".into(), reason })
    }
}
