//! Built-in oracle suites run by the `selftest` subcommand.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::fourier::{self, naive_dft2d, Spectrum2D};
use crate::gradcheck::{self, check, primitive_cases};
use crate::losses::{self, total_loss_var, total_loss_var_taped, FocalWeights, LossConfig, Predictions};
use crate::model::{fsp_block, random_masking, ModelConfig, ModelParams, Network};
use crate::tensor::{ComplexTensor, Tensor};

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn record(out: &mut Vec<CheckResult>, suite: &'static str, name: impl Into<String>, value: f64, tol: f64) {
    out.push(CheckResult {
        suite,
        name: name.into(),
        passed: value <= tol && value.is_finite(),
        detail: format!("{value:.3e} (tol {tol:.0e})"),
    });
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn fft_suite(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for shape in [vec![8, 8, 3], vec![16, 16, 1], vec![5, 6, 2]] {
        let tag = format!("{shape:?}");
        let x = random_tensor(&mut rng, shape.clone());
        let fast = fourier::dft2d(&x)?;
        let zero = Tensor::zeros(shape.clone());
        let naive = naive_dft2d(&ComplexTensor::from_parts(x.clone(), zero)?, false)?;
        record(out, "fft", format!("forward vs direct sum {tag}"), fast.values().max_abs_diff(&naive), 1e-10);
        let back = fourier::idft2d(&fast)?;
        let naive_back = naive_dft2d(fast.values(), true)?;
        record(out, "fft", format!("inverse vs direct sum {tag}"), back.max_abs_diff(&naive_back), 1e-10);
        record(out, "fft", format!("roundtrip {tag}"), back.real_part().max_abs_diff(&x), 1e-10);
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = fast.values().re().iter().zip(fast.values().im()).map(|(r, i)| r * r + i * i).sum();
        let hw = (shape[0] * shape[1]) as f64;
        record(out, "fft", format!("parseval {tag}"), (energy - spec / hw).abs() / energy, 1e-9);
    }
    Ok(())
}

fn gradient_suite(out: &mut Vec<CheckResult>) -> Result<()> {
    for case in primitive_cases(5) {
        let r = case.run(1e-5, 1e-8)?;
        record(out, "gradients", format!("primitive {}", case.kind), r.max_rel_err(), 1e-6);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut fsp = BTreeMap::new();
    fsp.insert("x".to_string(), random_tensor(&mut rng, vec![2, 4, 4, 6]));
    let cfg = ModelConfig { dec_dim: 6, dec_heads: 2, ..ModelConfig::micro() };
    let block = ModelParams::init(&cfg, 2)?;
    for (k, t) in block.tensors() {
        if let Some(rest) = k.strip_prefix("fd.blocks.0.") {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            fsp.insert(format!("fd.blocks.0.{rest}"), t);
        }
    }
    let r = check(&fsp, 1e-5, 1e-8, |g, v| {
        let y = fsp_block(g, v, "fd.blocks.0", v["x"], 1e-6)?;
        gradcheck::project(g, y)
    })?;
    record(out, "gradients", "spectral filter block (incl. omega)", r.max_rel_err(), 1e-5);

    let r = micro_objective_check(7)?;
    record(out, "gradients", "micro model total objective", r.max_rel_err(), 1e-3);
    Ok(())
}

/// Finite-difference check of the full objective on the micro model.
pub fn micro_objective_check(seed: u64) -> Result<gradcheck::GradCheck> {
    let cfg = ModelConfig::micro();
    let mut params = ModelParams::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // perturb away from the symmetric initialization (unit scales, all-ones filters)
    for t in params.tensors_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let images = Tensor::from_fn(vec![2, 8, 8, 1], |_| rng.random_range(0.0..1.0));
    let plans = vec![random_masking(16, cfg.mask_ratio, seed)?, random_masking(16, cfg.mask_ratio, seed + 1)?];
    let loss_cfg = LossConfig::default();
    let build_with = |g: &mut Graph, v: &BTreeMap<String, Var>, w: &mut FocalWeights| -> Result<Var> {
        let net = Network::new(&cfg, v);
        let o = net.forward(g, &images, &plans)?;
        let pred = Predictions { pixels: Some(o.pixels), spectrum: Some((o.spectrum_re, o.spectrum_im)) };
        Ok(total_loss_var_taped(g, pred, &images, &images, &plans, cfg.patch_size, false, &loss_cfg, w)?.total)
    };
    // focal weights are frozen at the base point on both sides of the comparison
    let mut tape = FocalWeights::Record(Vec::new());
    let mut g = Graph::new();
    let vars = params.register(&mut g, true);
    build_with(&mut g, &vars, &mut tape)?;
    let tape = tape.into_replay();
    check(params.tensors(), 1e-5, 1e-6, |g, v| build_with(g, v, &mut tape.clone()))
}

fn loss_suite(out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let image = Tensor::from_fn(vec![8, 8, 3], |_| rng.random_range(0.0..1.0));
    let gf = fourier::dft2d(&image)?;
    let plan = random_masking(16, 0.75, 3)?;
    let cfg = LossConfig::default();
    let perfect = losses::total_loss(&image, &gf, &image, &gf, &image, &plan, 2, &cfg)?;
    record(out, "losses", "perfect prediction total", perfect.total.abs(), 1e-20);

    let noise = random_tensor(&mut rng, vec![8, 8, 3]);
    let noisy = Tensor::from_fn(vec![8, 8, 3], |i| image.data()[i] + 0.1 * noise.data()[i]);
    let qs = fourier::dft2d(&noisy)?;
    let zero_lambda = LossConfig { lambda: 0.0, ..cfg };
    let b = losses::total_loss(&noisy, &qs, &image, &gf, &image, &plan, 2, &zero_lambda)?;
    record(out, "losses", "lambda = 0 keeps only the pixel group", (b.total - (b.pix_re + b.freq_con)).abs(), 0.0);

    let a = Spectrum2D::new(ComplexTensor::from_parts(random_tensor(&mut rng, vec![4, 4, 1]), random_tensor(&mut rng, vec![4, 4, 1]))?)?;
    let t = Spectrum2D::new(ComplexTensor::from_parts(random_tensor(&mut rng, vec![4, 4, 1]), random_tensor(&mut rng, vec![4, 4, 1]))?)?;
    let focal = losses::focal_frequency_loss(&a, &t, 0.0)?;
    let plain = (0..16)
        .map(|i| (a.values().re()[i] - t.values().re()[i]).powi(2) + (a.values().im()[i] - t.values().im()[i]).powi(2))
        .sum::<f64>()
        / 16.0;
    record(out, "losses", "beta = 0 is unweighted spectral MSE", (focal - plain).abs(), 1e-12);

    // gradient support: visible patches of P receive nothing from pix_re and freq_con
    let batch = image.clone().reshape(vec![1, 8, 8, 3])?;
    let pixels = noisy.clone().reshape(vec![1, 8, 8, 3])?;
    let mut worst: f64 = 0.0;
    for toggles in [losses::LossToggles::preset("pix-only").unwrap(), losses::LossToggles { pix_re: false, freq_con: true, freq_re: false, pix_con: false }] {
        let mut g = Graph::new();
        let p = g.param("P", pixels.clone());
        let lc = LossConfig { toggles, ..cfg };
        let lv = total_loss_var(&mut g, Predictions { pixels: Some(p), spectrum: None }, &batch, &batch, std::slice::from_ref(&plan), 2, false, &lc)?;
        let grad = crate::model::patchify(&g.backward(lv.total)?["P"], 2)?;
        let w = grad.shape()[1];
        for &i in plan.visible() {
            worst = worst.max(grad.data()[i * w..(i + 1) * w].iter().fold(0.0, |m, v| m.max(v.abs())));
        }
    }
    record(out, "losses", "no gradient on visible patches", worst, 0.0);
    Ok(())
}

/// Runs every suite; errors inside a suite become failed checks.
pub fn run_selftest() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let suites: [(&'static str, fn(&mut Vec<CheckResult>) -> Result<()>); 3] =
        [("fft", fft_suite), ("gradients", gradient_suite), ("losses", loss_suite)];
    for (name, suite) in suites {
        if let Err(e) = suite(&mut out) {
            out.push(CheckResult { suite: name, name: "suite aborted".into(), passed: false, detail: e.to_string() });
        }
    }
    out
}
