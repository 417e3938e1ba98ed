//! The pretraining loop.
//!
//! Randomness comes from one ChaCha8 generator seeded with `train.seed` and is
//! consumed in a fixed order: one draw for parameter initialization, then per
//! epoch a shuffle of the record order, then per image (in batch order) the
//! augmentation parameters followed by the mask permutation.

use std::fs::{self, File};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::augment::{self, AugmentParams};
use super::checkpoint::{save_checkpoint, Checkpoint, StoredTensor};
use super::data::{ImageStore, Normalization};
use super::optim::{adamw_step, default_decay, OptimizerState};
use super::schedule::{lr_at_step, scaled_lr};
use super::TrainRunConfig;
use crate::autodiff::Graph;
use crate::config;
use crate::error::{Error, Result};
use crate::losses::{total_loss_var, LossBreakdown, Predictions};
use crate::model::{MaskPlan, ModelConfig, ModelParams, Network};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,pix_re,freq_con,freq_re,pix_con,total,lr";

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Sample-weighted mean losses of one epoch and the learning rate of its last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!("{},{:?},{:?},{:?},{:?},{:?},{:?}", self.epoch, l.pix_re, l.freq_con, l.freq_re, l.pix_con, l.total, self.lr)
    }
}

pub struct PretrainOutcome {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub normalization: Normalization,
    pub log: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

struct Snapshot<'a> {
    cfg: &'a TrainRunConfig,
    params: &'a ModelParams,
    opt: &'a OptimizerState,
    norm: &'a Normalization,
    epoch: usize,
    rng: &'a ChaCha8Rng,
}

impl Snapshot<'_> {
    fn checkpoint(&self) -> Checkpoint {
        // where the run was written is not part of the model
        let mut cfg: Vec<(String, String)> =
            config::train_pairs(self.cfg).into_iter().filter(|(k, _)| k != "output.dir").collect();
        cfg.push(("state.epoch".into(), self.epoch.to_string()));
        cfg.push(("state.normalization".into(), self.norm.encode()));
        cfg.push(("state.rng_word_pos".into(), self.rng.get_word_pos().to_string()));
        let mut tensors = std::collections::BTreeMap::new();
        for (k, t) in self.params.tensors() {
            tensors.insert(format!("{PARAM_PREFIX}{k}"), StoredTensor::f64(t.clone()));
        }
        for (k, t) in &self.opt.m {
            tensors.insert(format!("{M_PREFIX}{k}"), StoredTensor::f64(t.clone()));
        }
        for (k, t) in &self.opt.v {
            tensors.insert(format!("{V_PREFIX}{k}"), StoredTensor::f64(t.clone()));
        }
        Checkpoint { config: cfg, step: self.opt.step, tensors }
    }
}

/// Model configuration, weights and input normalization recovered from a checkpoint.
pub struct RestoredModel {
    pub train: TrainRunConfig,
    pub params: ModelParams,
    pub normalization: Normalization,
    pub optimizer: OptimizerState,
}

impl RestoredModel {
    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }
}

pub fn restore_model(cp: &Checkpoint) -> Result<RestoredModel> {
    let pairs: Vec<(String, String)> = cp.config.iter().filter(|(k, _)| !k.starts_with("state.")).cloned().collect();
    let train = config::train_from_pairs(&pairs).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let params = ModelParams::from_map(cp.tensors_with_prefix(PARAM_PREFIX));
    params.check_against(&train.model).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let normalization = match cp.config_value("state.normalization") {
        Some(s) => Normalization::decode(s)?,
        None => Normalization::identity(train.model.in_chans),
    };
    if normalization.mean.len() != train.model.in_chans {
        return Err(Error::Checkpoint("normalization channel count differs from model.in_chans".into()));
    }
    let optimizer = OptimizerState { step: cp.step, m: cp.tensors_with_prefix(M_PREFIX), v: cp.tensors_with_prefix(V_PREFIX) };
    Ok(RestoredModel { train, params, normalization, optimizer })
}

pub fn pretrain(cfg: &TrainRunConfig, store: &ImageStore) -> Result<PretrainOutcome> {
    pretrain_with(cfg, store, |_| {})
}

/// Like [`pretrain`], calling `on_epoch` after every epoch.
pub fn pretrain_with(
    cfg: &TrainRunConfig,
    store: &ImageStore,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<PretrainOutcome> {
    cfg.check()?;
    let m = &cfg.model;
    let (h, w, c) = store.dims();
    if store.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if c != m.in_chans {
        return Err(Error::invalid(format!("dataset has {c} channels, model expects {}", m.in_chans)));
    }
    if !cfg.augment && (h, w) != (m.image_size, m.image_size) {
        return Err(Error::invalid(format!(
            "images are {h}×{w} but the model expects {0}×{0}; enable train.augment to resize",
            m.image_size
        )));
    }
    let out_dir = (!cfg.output_dir.as_os_str().is_empty()).then_some(cfg.output_dir.as_path());
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("log.csv");
            let mut f = File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&p, e))?;
            Some((f, p))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(m, rng.next_u64())?;
    let mut opt = OptimizerState::new(params.tensors());
    let norm = Normalization::from_store(store);
    let hp = cfg.optimizer();
    let n = store.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;
    let peak_lr = scaled_lr(cfg.base_lr, cfg.batch_size);
    let side = m.image_size;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut parts = Vec::with_capacity(steps_per_epoch as usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(chunk.len() * side * side * c);
            let mut plans = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let raw = store.image(i);
                let mut img = if cfg.augment {
                    let p = AugmentParams::sample(h, w, &mut rng);
                    augment::apply(&raw, &p, side, side)
                } else {
                    raw
                };
                norm.apply(&mut img);
                images.extend_from_slice(img.data());
                plans.push(MaskPlan::from_rng(m.num_patches(), m.mask_ratio, &mut rng)?);
            }
            let images = Tensor::new(vec![chunk.len(), side, side, c], images)?;

            let mut g = Graph::new();
            let vars = params.register(&mut g, true);
            let net = Network::new(m, &vars);
            let toggles = cfg.loss.toggles;
            let step_result = (|| -> Result<_> {
                let enc = net.encode(&mut g, &images, &plans)?;
                let pixels = toggles.uses_pixel_decoder().then(|| net.pixel_decode(&mut g, &enc, &plans)).transpose()?;
                let spectrum =
                    toggles.uses_frequency_decoder().then(|| net.frequency_decode(&mut g, &enc, &plans)).transpose()?;
                let pred = Predictions { pixels, spectrum };
                let lv = total_loss_var(&mut g, pred, &images, &images, &plans, m.patch_size, m.norm_pix_target, &cfg.loss)?;
                let b = lv.breakdown(&g);
                if !b.total.is_finite() {
                    return Err(Error::NonFinite { what: format!("total loss at epoch {epoch}, step {}", opt.step) });
                }
                let grads = g.backward(lv.total)?;
                lr = lr_at_step(opt.step, total_steps, warmup_steps, peak_lr)?;
                adamw_step(params.tensors_mut(), &grads, &mut opt, lr, &hp, default_decay)?;
                Ok(b)
            })();
            match step_result {
                Ok(b) => parts.push((b, chunk.len())),
                Err(e) => {
                    if let Some(dir) = out_dir {
                        let snap = Snapshot { cfg, params: &params, opt: &opt, norm: &norm, epoch: epoch - 1, rng: &rng };
                        save_checkpoint(&snap.checkpoint(), &dir.join("last_good.ge2a"))?;
                    }
                    return Err(e);
                }
            }
        }
        let record = EpochRecord { epoch, losses: LossBreakdown::weighted_mean(&parts), lr };
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", record.csv_line()).and_then(|_| f.flush()).map_err(|e| Error::io(&*p, e))?;
        }
        on_epoch(&record);
        log.push(record);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                let snap = Snapshot { cfg, params: &params, opt: &opt, norm: &norm, epoch, rng: &rng };
                save_checkpoint(&snap.checkpoint(), &dir.join(format!("checkpoint_epoch{epoch:04}.ge2a")))?;
            }
        }
    }
    let checkpoint = Snapshot { cfg, params: &params, opt: &opt, norm: &norm, epoch: cfg.epochs, rng: &rng }.checkpoint();
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, &dir.join("final.ge2a"))?;
    }
    Ok(PretrainOutcome { params, optimizer: opt, normalization: norm, log, checkpoint })
}
