//! Flat `key = value` run configuration.
//!
//! Values resolve as defaults, then the config file, then `--preset`, then
//! each `--set key=value` in order, then `--seed`. Lines starting with `#`
//! are comments, and so is anything after ` #` on a line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{AnalysisConfig, ProbeConfig};
use crate::error::{Error, Result};
use crate::losses::LossToggles;
use crate::training::TrainRunConfig;

/// Everything a CLI invocation can be configured with.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainRunConfig,
    pub probe: ProbeConfig,
    pub analysis: AnalysisConfig,
}

/// Every accepted key, in the order `resolved.cfg` lists them.
pub const KEYS: &[&str] = &[
    "model.image_size",
    "model.patch_size",
    "model.in_chans",
    "model.enc_dim",
    "model.enc_depth",
    "model.enc_heads",
    "model.dec_dim",
    "model.dec_depth",
    "model.dec_heads",
    "model.mlp_ratio",
    "model.mask_ratio",
    "model.norm_pix_target",
    "model.ln_eps",
    "loss.lambda",
    "loss.beta",
    "loss.toggles.pix_re",
    "loss.toggles.freq_con",
    "loss.toggles.freq_re",
    "loss.toggles.pix_con",
    "train.epochs",
    "train.batch_size",
    "train.base_lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.warmup_epochs",
    "train.seed",
    "train.augment",
    "train.checkpoint_every",
    "data.path",
    "data.format",
    "data.limit",
    "data.test_path",
    "data.test_limit",
    "output.dir",
    "probe.epochs",
    "probe.batch_size",
    "probe.lr",
    "probe.weight_decay",
    "analysis.j0",
    "analysis.j1",
    "analysis.center",
    "analysis.max_images",
    "analysis.visualize_count",
];

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn float(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = num(v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("`{v}` is not a finite number"))
    }
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn unit_interval(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if (0.0..1.0).contains(&x) {
        Ok(x)
    } else {
        Err(format!("{x} is outside [0, 1)"))
    }
}

fn non_negative(v: &str) -> std::result::Result<f64, String> {
    let x = float(v)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(format!("{x} must be >= 0"))
    }
}

impl RunConfig {
    /// Current value of `key` in its canonical text form.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let m = &t.model;
        let l = &t.loss;
        let (p, a) = (&self.probe, &self.analysis);
        let f = |x: f64| format!("{x:?}");
        Some(match key {
            "model.image_size" => m.image_size.to_string(),
            "model.patch_size" => m.patch_size.to_string(),
            "model.in_chans" => m.in_chans.to_string(),
            "model.enc_dim" => m.enc_dim.to_string(),
            "model.enc_depth" => m.enc_depth.to_string(),
            "model.enc_heads" => m.enc_heads.to_string(),
            "model.dec_dim" => m.dec_dim.to_string(),
            "model.dec_depth" => m.dec_depth.to_string(),
            "model.dec_heads" => m.dec_heads.to_string(),
            "model.mlp_ratio" => m.mlp_ratio.to_string(),
            "model.mask_ratio" => f(m.mask_ratio),
            "model.norm_pix_target" => m.norm_pix_target.to_string(),
            "model.ln_eps" => f(m.ln_eps),
            "loss.lambda" => f(l.lambda),
            "loss.beta" => f(l.beta),
            "loss.toggles.pix_re" => l.toggles.pix_re.to_string(),
            "loss.toggles.freq_con" => l.toggles.freq_con.to_string(),
            "loss.toggles.freq_re" => l.toggles.freq_re.to_string(),
            "loss.toggles.pix_con" => l.toggles.pix_con.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.base_lr" => f(t.base_lr),
            "train.weight_decay" => f(t.weight_decay),
            "train.beta1" => f(t.beta1),
            "train.beta2" => f(t.beta2),
            "train.warmup_epochs" => t.warmup_epochs.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.augment" => t.augment.to_string(),
            "train.checkpoint_every" => t.checkpoint_every.to_string(),
            "data.path" => t.data.path.display().to_string(),
            "data.format" => t.data.format.to_string(),
            "data.limit" => t.data.limit.to_string(),
            "data.test_path" => t.data.test_path.display().to_string(),
            "data.test_limit" => t.data.test_limit.to_string(),
            "output.dir" => t.output_dir.display().to_string(),
            "probe.epochs" => p.epochs.to_string(),
            "probe.batch_size" => p.batch_size.to_string(),
            "probe.lr" => f(p.lr),
            "probe.weight_decay" => f(p.weight_decay),
            "analysis.j0" => a.j0.to_string(),
            "analysis.j1" => a.j1.to_string(),
            "analysis.center" => a.center.to_string(),
            "analysis.max_images" => a.max_images.to_string(),
            "analysis.visualize_count" => a.visualize_count.to_string(),
            _ => return None,
        })
    }

    /// Parses and stores one value. Range checks that need no other key happen here.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let m = &mut t.model;
        let l = &mut t.loss;
        let (p, a) = (&mut self.probe, &mut self.analysis);
        match key {
            "model.image_size" => m.image_size = num(v)?,
            "model.patch_size" => m.patch_size = num(v)?,
            "model.in_chans" => m.in_chans = num(v)?,
            "model.enc_dim" => m.enc_dim = num(v)?,
            "model.enc_depth" => m.enc_depth = num(v)?,
            "model.enc_heads" => m.enc_heads = num(v)?,
            "model.dec_dim" => m.dec_dim = num(v)?,
            "model.dec_depth" => m.dec_depth = num(v)?,
            "model.dec_heads" => m.dec_heads = num(v)?,
            "model.mlp_ratio" => m.mlp_ratio = num(v)?,
            "model.mask_ratio" => m.mask_ratio = unit_interval(v)?,
            "model.norm_pix_target" => m.norm_pix_target = flag(v)?,
            "model.ln_eps" => m.ln_eps = float(v)?,
            "loss.lambda" => l.lambda = non_negative(v)?,
            "loss.beta" => l.beta = non_negative(v)?,
            "loss.toggles.pix_re" => l.toggles.pix_re = flag(v)?,
            "loss.toggles.freq_con" => l.toggles.freq_con = flag(v)?,
            "loss.toggles.freq_re" => l.toggles.freq_re = flag(v)?,
            "loss.toggles.pix_con" => l.toggles.pix_con = flag(v)?,
            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.base_lr" => t.base_lr = non_negative(v)?,
            "train.weight_decay" => t.weight_decay = non_negative(v)?,
            "train.beta1" => t.beta1 = unit_interval(v)?,
            "train.beta2" => t.beta2 = unit_interval(v)?,
            "train.warmup_epochs" => t.warmup_epochs = num(v)?,
            "train.seed" => t.seed = num(v)?,
            "train.augment" => t.augment = flag(v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(v)?,
            "data.path" => t.data.path = PathBuf::from(v),
            "data.format" => t.data.format = v.parse().map_err(|e: Error| e.to_string())?,
            "data.limit" => t.data.limit = num(v)?,
            "data.test_path" => t.data.test_path = PathBuf::from(v),
            "data.test_limit" => t.data.test_limit = num(v)?,
            "output.dir" => t.output_dir = PathBuf::from(v),
            "probe.epochs" => p.epochs = num(v)?,
            "probe.batch_size" => p.batch_size = num(v)?,
            "probe.lr" => p.lr = non_negative(v)?,
            "probe.weight_decay" => p.weight_decay = non_negative(v)?,
            "analysis.j0" => a.j0 = num(v)?,
            "analysis.j1" => a.j1 = num(v)?,
            "analysis.center" => a.center = flag(v)?,
            "analysis.max_images" => a.max_images = num(v)?,
            "analysis.visualize_count" => a.visualize_count = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Cross-key checks; the error names the key most responsible.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        self.train.validate()?;
        if self.probe.epochs == 0 {
            return Err(("probe.epochs", "must be >= 1".into()));
        }
        if self.probe.batch_size == 0 {
            return Err(("probe.batch_size", "must be >= 1".into()));
        }
        if self.analysis.j0 == 0 {
            return Err(("analysis.j0", "must be >= 1".into()));
        }
        if self.analysis.j1 != 0 && self.analysis.j1 < self.analysis.j0 + 3 {
            return Err(("analysis.j1", "must be 0 (automatic) or at least analysis.j0 + 3".into()));
        }
        Ok(())
    }

    /// The resolved configuration in the same syntax the parser accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved ge2ae configuration\n");
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }
}

/// Accumulates values from several sources while remembering where each key was set.
#[derive(Debug, Default)]
pub struct ConfigBuilder {
    config: RunConfig,
    origin: BTreeMap<String, String>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn set(&mut self, key: &str, value: &str, location: String) -> Result<()> {
        self.config
            .set(key, value)
            .map_err(|reason| Error::Config { key: key.into(), location: location.clone(), reason })?;
        self.origin.insert(key.to_string(), location);
        Ok(())
    }

    /// Applies config-file text; `name` is used in error locations.
    pub fn apply_text(&mut self, text: &str, name: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(" #").next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let location = format!("{name}:{}", i + 1);
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                location: location.clone(),
                reason: "expected `key = value`".into(),
            })?;
            self.set(k.trim(), v.trim(), location)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let t = LossToggles::preset(name).ok_or_else(|| Error::Config {
            key: "loss.toggles".into(),
            location: "--preset".into(),
            reason: format!("unknown preset `{name}` (pix-only | no-fd | freq-only | no-pd | no-con | full)"),
        })?;
        for (k, on) in [
            ("loss.toggles.pix_re", t.pix_re),
            ("loss.toggles.freq_con", t.freq_con),
            ("loss.toggles.freq_re", t.freq_re),
            ("loss.toggles.pix_con", t.pix_con),
        ] {
            self.set(k, &on.to_string(), format!("--preset {name}"))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override; `index` counts from 1.
    pub fn apply_override(&mut self, assignment: &str, index: usize) -> Result<()> {
        let location = format!("--set #{index}");
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: assignment.to_string(),
            location: location.clone(),
            reason: "expected key=value".into(),
        })?;
        self.set(k.trim(), v.trim(), location)
    }

    pub fn apply_seed(&mut self, seed: u64) -> Result<()> {
        self.set("train.seed", &seed.to_string(), "--seed".into())
    }

    pub fn build(self) -> Result<RunConfig> {
        self.config.validate().map_err(|(key, reason)| Error::Config {
            key: key.to_string(),
            location: self.origin.get(key).cloned().unwrap_or_else(|| "default".into()),
            reason,
        })?;
        Ok(self.config)
    }
}

/// Resolves a configuration from an optional file and command-line overrides.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[String],
    preset: Option<&str>,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut b = ConfigBuilder::new();
    if let Some(p) = path {
        b.apply_file(p)?;
    }
    if let Some(name) = preset {
        b.apply_preset(name)?;
    }
    for (i, o) in overrides.iter().enumerate() {
        b.apply_override(o, i + 1)?;
    }
    if let Some(s) = seed {
        b.apply_seed(s)?;
    }
    b.build()
}

fn is_train_key(k: &str) -> bool {
    ["model.", "loss.", "train.", "data.", "output."].iter().any(|p| k.starts_with(p))
}

/// Training-related keys and values, as embedded in checkpoints.
pub fn train_pairs(train: &TrainRunConfig) -> Vec<(String, String)> {
    let rc = RunConfig { train: train.clone(), ..Default::default() };
    KEYS.iter().filter(|k| is_train_key(k)).map(|k| (k.to_string(), rc.get(k).unwrap())).collect()
}

/// Inverse of [`train_pairs`]; keys outside the training sections are rejected.
pub fn train_from_pairs(pairs: &[(String, String)]) -> Result<TrainRunConfig> {
    let mut b = ConfigBuilder::new();
    for (k, v) in pairs {
        if !is_train_key(k) {
            return Err(Error::Config { key: k.clone(), location: "checkpoint".into(), reason: "unknown key".into() });
        }
        b.set(k, v, "checkpoint".into())?;
    }
    b.train_only()
}

impl ConfigBuilder {
    fn train_only(self) -> Result<TrainRunConfig> {
        self.config.train.validate().map_err(|(key, reason)| Error::Config {
            key: key.to_string(),
            location: self.origin.get(key).cloned().unwrap_or_else(|| "default".into()),
            reason,
        })?;
        Ok(self.config.train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut b = ConfigBuilder::new();
        b.apply_text("", "empty.cfg").unwrap();
        let c = b.build().unwrap();
        assert_eq!(c.train.model.mask_ratio, 0.75);
        assert_eq!(c.train.loss.lambda, 0.5);
        assert_eq!(c.train.loss.beta, 1.0);
        assert_eq!(c.train.model.dec_depth, 8);
        assert_eq!(c.train.base_lr, 1.5e-4);
        assert_eq!((c.train.beta1, c.train.beta2), (0.9, 0.95));
        assert_eq!(c.train.warmup_epochs, 40);
        assert_eq!(c.train.weight_decay, 0.05);
    }

    #[test]
    fn override_beats_file() {
        let mut b = ConfigBuilder::new();
        b.apply_text("loss.lambda = 0.5\n", "f.cfg").unwrap();
        b.apply_override("loss.lambda=0.2", 1).unwrap();
        assert_eq!(b.build().unwrap().train.loss.lambda, 0.2);
    }

    #[test]
    fn rejects_with_key_and_line() {
        let mut b = ConfigBuilder::new();
        let err = b.apply_text("# comment\nmodel.mask_ratio = 1.5\n", "bad.cfg").unwrap_err();
        match err {
            Error::Config { key, location, .. } => {
                assert_eq!(key, "model.mask_ratio");
                assert_eq!(location, "bad.cfg:2");
            }
            e => panic!("{e}"),
        }
        let err = ConfigBuilder::new().apply_text("model.mask_ration = 0.5", "t.cfg").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert!(ConfigBuilder::new().apply_text("train.epochs = many", "t.cfg").is_err());
    }

    #[test]
    fn cross_key_errors_point_at_the_source() {
        let mut b = ConfigBuilder::new();
        b.apply_text("train.epochs = 5\n", "a.cfg").unwrap();
        match b.build().unwrap_err() {
            Error::Config { key, location, .. } => {
                assert_eq!(key, "train.warmup_epochs");
                assert_eq!(location, "default");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut b = ConfigBuilder::new();
        b.apply_text("train.base_lr = 3e-4\ndata.path = /tmp/x y\nmodel.ln_eps = 1e-6 # inline\n", "a.cfg").unwrap();
        b.apply_preset("no-con").unwrap();
        let c = b.build().unwrap();
        let text = c.to_text();
        let mut again = ConfigBuilder::new();
        again.apply_text(&text, "resolved.cfg").unwrap();
        let c2 = again.build().unwrap();
        assert_eq!(c2, c);
        assert_eq!(c2.to_text(), text);
        assert_eq!(c.train.data.path, PathBuf::from("/tmp/x y"));
    }

    #[test]
    fn pixel_only_row_via_sets() {
        let sets: Vec<String> = ["loss.toggles.freq_re=false", "loss.toggles.pix_con=false", "loss.toggles.freq_con=false"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let c = parse_config(None, &sets, None, Some(3)).unwrap();
        assert_eq!(c.train.loss.toggles, LossToggles::preset("pix-only").unwrap());
        assert_eq!(c.train.seed, 3);
    }

    #[test]
    fn train_pairs_round_trip() {
        let t = TrainRunConfig::toy();
        let back = train_from_pairs(&train_pairs(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn every_key_is_gettable_and_settable() {
        let mut c = RunConfig::default();
        for k in KEYS {
            let v = c.get(k).unwrap();
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, RunConfig::default());
    }
}
