//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! failures while running.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    cka_matrix, default_fit_range, emit_visualizations, extract_features, fit_power_law, linear_probe, spectrum_map,
    write_cka_csv, write_last_layer_csv, write_powerlaw_csv, write_probe_csv,
};
use crate::config::{parse_config, RunConfig};
use crate::error::Error;
use crate::fourier;
use crate::ppm::Ppm;
use crate::selftest::run_selftest;
use crate::tensor::Tensor;
use crate::training::augment::{self, AugmentParams};
use crate::training::data::encode_cifar10;
use crate::training::{
    ingest_dataset, load_checkpoint, pretrain_with, restore_model, synthetic_cifar, ImageStore, RestoredModel,
};

pub const THREADS_ENV: &str = "GE2AE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "ge2ae", version, about = "Geminated pixel/frequency masked autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Loss-term preset: pix-only, no-fd, freq-only, no-pd, no-con or full.
    #[arg(long)]
    preset: Option<String>,
    /// Shorthand for `--set train.seed=S`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain from scratch and write log.csv and checkpoints to output.dir.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Linear probe on frozen final-layer features; writes probe.csv.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Power-law spectrum and layer-wise CKA; writes powerlaw.csv and cka.csv.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint for cross-model CKA (defaults to the first).
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Reconstruction, spectrum and filter images as PPM files.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Centered log-amplitude spectrum and phase-only image of a PPM file.
    Fft {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in FFT, gradient and loss oracle checks.
    Selftest,
    /// Write procedurally generated 32×32 images in CIFAR-10 binary layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn invalid(e: Error) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(f) = check_threads() {
        return report(f);
    }
    let result = match cli.command {
        Command::Pretrain { common } => cmd_pretrain(&common),
        Command::Probe { common, checkpoint } => cmd_probe(&common, &checkpoint),
        Command::Analyze { common, checkpoint, compare } => cmd_analyze(&common, &checkpoint, compare.as_deref()),
        Command::Visualize { common, checkpoint } => cmd_visualize(&common, &checkpoint),
        Command::Fft { input, out } => cmd_fft(&input, &out),
        Command::Selftest => cmd_selftest(),
        Command::Synth { out, count, seed } => cmd_synth(&out, count, seed),
    };
    match result {
        Ok(()) => 0,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> i32 {
    match &f {
        Failure::Invalid(m) => eprintln!("error: {m}"),
        Failure::Runtime(m) => eprintln!("failed: {m}"),
    }
    f.code()
}

/// Every computation here is sequential, so any cap is already satisfied;
/// the variable is still validated so typos are not silently ignored.
fn check_threads() -> Outcome {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().parse::<usize>().is_err() => {
            Err(Failure::Invalid(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")))
        }
        _ => Ok(()),
    }
}

fn resolve(common: &Common) -> std::result::Result<RunConfig, Failure> {
    parse_config(common.config.as_deref(), &common.set, common.preset.as_deref(), common.seed).map_err(invalid)
}

fn prepare_output(cfg: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    let dir = cfg.train.output_dir.clone();
    if dir.as_os_str().is_empty() {
        return Err(Failure::Invalid("output.dir must not be empty".into()));
    }
    fs::create_dir_all(&dir).map_err(|e| runtime(Error::io(&dir, e)))?;
    let p = dir.join("resolved.cfg");
    fs::write(&p, cfg.to_text()).map_err(|e| runtime(Error::io(&p, e)))?;
    Ok(dir)
}

fn load_split(cfg: &RunConfig, test: bool) -> std::result::Result<ImageStore, Failure> {
    let d = &cfg.train.data;
    let (path, limit) = if test && !d.test_path.as_os_str().is_empty() { (&d.test_path, d.test_limit) } else { (&d.path, d.limit) };
    if path.as_os_str().is_empty() {
        let key = if test { "data.test_path" } else { "data.path" };
        return Err(Failure::Invalid(format!("{key} is not set")));
    }
    let mut store = ingest_dataset(path, d.format).map_err(runtime)?;
    store.truncate(limit);
    Ok(store)
}

/// Images in model geometry, normalized as during training.
fn model_inputs(store: &ImageStore, model: &RestoredModel, cap: usize) -> std::result::Result<Vec<Tensor>, Failure> {
    let m = model.model();
    let (h, w, c) = store.dims();
    if c != m.in_chans {
        return Err(Failure::Runtime(format!("dataset has {c} channels, model expects {}", m.in_chans)));
    }
    let count = if cap > 0 { cap.min(store.len()) } else { store.len() };
    Ok((0..count)
        .map(|i| {
            let mut img = store.image(i);
            if (h, w) != (m.image_size, m.image_size) {
                img = augment::apply(&img, &AugmentParams::identity(h, w), m.image_size, m.image_size);
            }
            model.normalization.apply(&mut img);
            img
        })
        .collect())
}

fn restore(path: &Path) -> std::result::Result<RestoredModel, Failure> {
    let cp = load_checkpoint(path).map_err(runtime)?;
    restore_model(&cp).map_err(runtime)
}

fn cmd_pretrain(common: &Common) -> Outcome {
    let mut cfg = resolve(common)?;
    let dir = prepare_output(&cfg)?;
    cfg.train.output_dir = dir.clone();
    let store = load_split(&cfg, false)?;
    eprintln!("pretraining on {} images, {} epochs", store.len(), cfg.train.epochs);
    let outcome = pretrain_with(&cfg.train, &store, |r| {
        let l = &r.losses;
        eprintln!(
            "epoch {:>4}  total {:.6e}  pix_re {:.4e}  freq_con {:.4e}  freq_re {:.4e}  pix_con {:.4e}  lr {:.3e}",
            r.epoch, l.total, l.pix_re, l.freq_con, l.freq_re, l.pix_con, r.lr
        );
    })
    .map_err(runtime)?;
    println!("wrote {} (step {})", dir.join("final.ge2a").display(), outcome.checkpoint.step);
    Ok(())
}

fn cmd_probe(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = resolve(common)?;
    if cfg.train.data.test_path.as_os_str().is_empty() {
        return Err(Failure::Invalid("probe needs data.test_path for the held-out split".into()));
    }
    let dir = prepare_output(&cfg)?;
    let model = restore(checkpoint)?;
    let train = load_split(&cfg, false)?;
    let test = load_split(&cfg, true)?;
    let depth = model.model().enc_depth;
    let feats = |store: &ImageStore| -> std::result::Result<_, Failure> {
        let imgs = model_inputs(store, &model, 0)?;
        let mut f = extract_features(model.model(), &model.params, &imgs, &[depth]).map_err(runtime)?;
        Ok(f.remove(0))
    };
    let (ftr, fte) = (feats(&train)?, feats(&test)?);
    let result =
        linear_probe(&ftr, train.labels(), &fte, test.labels(), &cfg.probe, cfg.train.seed).map_err(runtime)?;
    write_probe_csv(&result, &dir.join("probe.csv")).map_err(runtime)?;
    println!("top1 {:.4}", result.accuracy);
    Ok(())
}

fn cmd_analyze(common: &Common, checkpoint: &Path, compare: Option<&Path>) -> Outcome {
    let cfg = resolve(common)?;
    let dir = prepare_output(&cfg)?;
    let a = restore(checkpoint)?;
    let store = load_split(&cfg, true)?;
    let cap = cfg.analysis.max_images;
    let layers = |m: &RestoredModel| (0..=m.model().enc_depth).collect::<Vec<_>>();
    let fa = extract_features(a.model(), &a.params, &model_inputs(&store, &a, cap)?, &layers(&a)).map_err(runtime)?;
    let fb = match compare {
        Some(p) => {
            let b = restore(p)?;
            extract_features(b.model(), &b.params, &model_inputs(&store, &b, cap)?, &layers(&b)).map_err(runtime)?
        }
        None => fa.clone(),
    };

    let last = fa.last().expect("at least one layer");
    let (d0, d1) = default_fit_range(last.rows, last.cols);
    let j0 = cfg.analysis.j0;
    let j1 = if cfg.analysis.j1 == 0 { d1 } else { cfg.analysis.j1 };
    let j0 = if cfg.analysis.j1 == 0 && j0 + 3 > j1 { d0 } else { j0 };
    let fit = fit_power_law(last, j0, j1, cfg.analysis.center).map_err(runtime)?;
    write_powerlaw_csv(&fit, &dir.join("powerlaw.csv")).map_err(runtime)?;
    println!("alpha {:.6} over [{}, {}] (rms residual {:.3e})", fit.alpha, fit.j0, fit.j1, fit.residual);

    let m = cka_matrix(&fa, &fb).map_err(runtime)?;
    write_cka_csv(&m, &dir.join("cka.csv")).map_err(runtime)?;
    write_last_layer_csv(&m, &dir.join("cka_last.csv")).map_err(runtime)?;
    println!("cka {}×{} written to {}", m.len(), m[0].len(), dir.display());
    Ok(())
}

fn cmd_visualize(common: &Common, checkpoint: &Path) -> Outcome {
    let cfg = resolve(common)?;
    let dir = prepare_output(&cfg)?;
    let model = restore(checkpoint)?;
    let store = load_split(&cfg, true)?;
    let m = model.model();
    let count = cfg.analysis.visualize_count.min(store.len());
    let (h, w, _) = store.dims();
    let raw: Vec<Tensor> = (0..count)
        .map(|i| {
            let img = store.image(i);
            if (h, w) == (m.image_size, m.image_size) {
                img
            } else {
                augment::apply(&img, &AugmentParams::identity(h, w), m.image_size, m.image_size)
            }
        })
        .collect();
    let files = emit_visualizations(m, &model.params, &model.normalization, &raw, cfg.train.seed, &dir).map_err(runtime)?;
    println!("wrote {} images to {}", files.len(), dir.display());
    Ok(())
}

fn cmd_fft(input: &Path, out: &Path) -> Outcome {
    let img = Ppm::read(input).map_err(runtime)?.to_tensor();
    fs::create_dir_all(out).map_err(|e| runtime(Error::io(out, e)))?;
    let spec = fourier::dft2d(&img).map_err(runtime)?;
    Ppm::from_tensor_minmax(&spectrum_map(&spec)).and_then(|p| p.write(&out.join("spectrum.ppm"))).map_err(runtime)?;
    let phase = fourier::phase_only_image(&img).map_err(runtime)?;
    Ppm::from_tensor_minmax(&phase).and_then(|p| p.write(&out.join("phase_only.ppm"))).map_err(runtime)?;
    println!("wrote spectrum.ppm and phase_only.ppm to {}", out.display());
    Ok(())
}

fn cmd_selftest() -> Outcome {
    let results = run_selftest();
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        println!("{} [{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.suite, r.name, r.detail);
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{failed} selftest checks failed")))
    }
}

fn cmd_synth(out: &Path, count: usize, seed: u64) -> Outcome {
    if count == 0 {
        return Err(Failure::Invalid("--count must be positive".into()));
    }
    let bytes = encode_cifar10(&synthetic_cifar(count, seed)).map_err(runtime)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| runtime(Error::io(parent, e)))?;
    }
    fs::write(out, bytes).map_err(|e| runtime(Error::io(out, e)))?;
    println!("wrote {count} records to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(dispatch(["ge2ae", "frobnicate"]), 1);
        assert_eq!(dispatch(["ge2ae"]), 1);
        assert_eq!(dispatch(["ge2ae", "--help"]), 0);
    }

    #[test]
    fn bad_config_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = dispatch([
            "ge2ae",
            "pretrain",
            "--set",
            "model.mask_ratio=1.5",
            "--set",
            &format!("output.dir={}", out.display()),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_data_is_runtime_failure() {
        let dir = tempfile::tempdir().unwrap();
        let code = dispatch([
            "ge2ae".to_string(),
            "pretrain".into(),
            "--set".into(),
            format!("data.path={}", dir.path().join("nope.bin").display()),
            "--set".into(),
            format!("output.dir={}", dir.path().join("run").display()),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn fft_writes_both_maps() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.ppm");
        Ppm::new(4, 4, vec![128; 48]).unwrap().write(&input).unwrap();
        let out = dir.path().join("out");
        assert_eq!(dispatch(["ge2ae", "fft", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let spec = Ppm::read(&out.join("spectrum.ppm")).unwrap();
        assert_eq!((spec.width, spec.height), (4, 4));
        assert_eq!(&spec.pixels[(2 * 4 + 2) * 3..(2 * 4 + 2) * 3 + 3], &[255, 255, 255]);
        assert!(out.join("phase_only.ppm").is_file());
    }
}
