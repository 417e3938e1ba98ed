//! The four-term geminated objective.
//!
//! `total = pix_re + freq_con + λ·(freq_re + pix_con)`, where
//! * `pix_re`: MSE between `P` and the target on masked patches,
//! * `freq_con`: focal frequency loss between the spectrum of the composed
//!   image (predicted masked patches, true visible patches) and the target spectrum,
//! * `freq_re`: focal frequency loss between `Q̃` and the target spectrum,
//! * `pix_con`: MSE over all pixels between `Re(IDFT(Q̃))` and the target.
//!
//! Spectral losses average `ω·γ²` over frequencies, channels and batch, with
//! `ω = (γ² + 1e-12)^{β/2}` held constant during differentiation.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fourier::{self, dft2d_real_var, idft2d_var, Spectrum2D};
use crate::model::{compose_full_image, compose_image, patchify, patchify_var, MaskPlan};
use crate::tensor::{ComplexTensor, Tensor};

pub const WEIGHT_EPS: f64 = 1e-12;

/// Which of the four terms participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossToggles {
    pub pix_re: bool,
    pub freq_con: bool,
    pub freq_re: bool,
    pub pix_con: bool,
}

impl LossToggles {
    pub const ALL: LossToggles = LossToggles { pix_re: true, freq_con: true, freq_re: true, pix_con: true };

    /// Ablation presets: `full`, `pix-only`, `no-fd`, `freq-only`, `no-pd`, `no-con`.
    pub fn preset(name: &str) -> Option<Self> {
        let t = |pix_re, freq_con, freq_re, pix_con| LossToggles { pix_re, freq_con, freq_re, pix_con };
        Some(match name {
            "full" => Self::ALL,
            "pix-only" => t(true, false, false, false),
            "no-fd" => t(true, true, false, false),
            "freq-only" => t(false, false, true, false),
            "no-pd" => t(false, false, true, true),
            "no-con" => t(true, false, true, false),
            _ => return None,
        })
    }

    pub fn any(&self) -> bool {
        self.pix_re || self.freq_con || self.freq_re || self.pix_con
    }

    /// Whether the frequency decoder contributes to the objective.
    pub fn uses_frequency_decoder(&self) -> bool {
        self.freq_re || self.pix_con
    }

    /// Whether the pixel decoder contributes to the objective.
    pub fn uses_pixel_decoder(&self) -> bool {
        self.pix_re || self.freq_con
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the frequency-level group.
    pub lambda: f64,
    /// Focal exponent of the spectrum weight.
    pub beta: f64,
    pub toggles: LossToggles,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.5, beta: 1.0, toggles: LossToggles::ALL }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !self.toggles.any() {
            return Err(Error::invalid("at least one loss term must be enabled"));
        }
        Ok(())
    }
}

/// Values of the four terms and their weighted total; disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pix_re: f64,
    pub freq_con: f64,
    pub freq_re: f64,
    pub pix_con: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 4] {
        [self.pix_re, self.freq_con, self.freq_re, self.pix_con]
    }

    fn add_assign_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.pix_re += other.pix_re * s;
        self.freq_con += other.freq_con * s;
        self.freq_re += other.freq_re * s;
        self.pix_con += other.pix_con * s;
        self.total += other.total * s;
    }

    /// Sample-weighted mean of several breakdowns.
    pub fn weighted_mean(items: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = items.iter().map(|(_, w)| w).sum();
        let mut acc = LossBreakdown::default();
        for (b, w) in items {
            acc.add_assign_scaled(b, *w as f64 / n.max(1) as f64);
        }
        acc
    }
}

/// Graph handles of the enabled terms plus the weighted total.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub pix_re: Option<Var>,
    pub freq_con: Option<Var>,
    pub freq_re: Option<Var>,
    pub pix_con: Option<Var>,
    pub total: Var,
    /// Set when `pix_re` was requested but no patch is masked.
    pub degenerate_mask: bool,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBreakdown {
            pix_re: v(self.pix_re),
            freq_con: v(self.freq_con),
            freq_re: v(self.freq_re),
            pix_con: v(self.pix_con),
            total: g.value(self.total).item(),
        }
    }
}

/// `γ(f, f̂)`: Euclidean distance in the complex plane.
pub fn frequency_distance_gamma(f: (f64, f64), f_hat: (f64, f64)) -> f64 {
    (f.0 - f_hat.0).hypot(f.1 - f_hat.1)
}

/// Focal frequency loss between two equally shaped spectra (value only).
pub fn focal_frequency_loss(pred: &Spectrum2D, target: &Spectrum2D, beta: f64) -> Result<f64> {
    let (p, t) = (pred.values(), target.values());
    if p.shape() != t.shape() {
        return Err(Error::shape("focal_frequency_loss", &[p.shape(), t.shape()]));
    }
    let mut acc = 0.0;
    for i in 0..p.len() {
        let d2 = (p.re()[i] - t.re()[i]).powi(2) + (p.im()[i] - t.im()[i]).powi(2);
        acc += focal_weight(d2, beta) * d2;
    }
    Ok(acc / p.len() as f64)
}

fn focal_weight(gamma_sq: f64, beta: f64) -> f64 {
    if beta == 0.0 {
        1.0
    } else {
        (gamma_sq + WEIGHT_EPS).powf(beta / 2.0)
    }
}

/// Differentiable focal frequency loss of `(re, im)` against a constant target.
pub fn focal_frequency_loss_var(g: &mut Graph, pred: (Var, Var), target: &ComplexTensor, beta: f64) -> Result<Var> {
    focal_frequency_loss_taped(g, pred, target, beta, &mut FocalWeights::Live)
}

/// Where the focal weights come from while a graph is built.
///
/// The weights carry no gradient, so a finite-difference check of the
/// analytic gradient has to hold them fixed too: record them once at the base
/// point, then replay the same tensors at every perturbed point.
#[derive(Clone, Debug, Default)]
pub enum FocalWeights {
    /// Compute from the current distances.
    #[default]
    Live,
    /// Compute from the current distances and append them.
    Record(Vec<Tensor>),
    /// Use stored weights in order; the cursor advances per focal term.
    Replay(Vec<Tensor>, usize),
}

impl FocalWeights {
    /// Turns a finished recording into a replay starting at the first term.
    pub fn into_replay(self) -> Self {
        match self {
            FocalWeights::Record(w) | FocalWeights::Replay(w, _) => FocalWeights::Replay(w, 0),
            FocalWeights::Live => FocalWeights::Live,
        }
    }

    fn weight(&mut self, d2: &Tensor, beta: f64) -> Result<Tensor> {
        match self {
            FocalWeights::Live => Ok(d2.map(|v| focal_weight(v, beta))),
            FocalWeights::Record(w) => {
                let t = d2.map(|v| focal_weight(v, beta));
                w.push(t.clone());
                Ok(t)
            }
            FocalWeights::Replay(w, i) => {
                let t = w.get(*i).ok_or_else(|| Error::invalid("focal weight replay ran out of recorded terms"))?;
                if t.shape() != d2.shape() {
                    return Err(Error::shape("focal weight replay", &[t.shape(), d2.shape()]));
                }
                *i += 1;
                Ok(t.clone())
            }
        }
    }
}

fn focal_frequency_loss_taped(
    g: &mut Graph,
    pred: (Var, Var),
    target: &ComplexTensor,
    beta: f64,
    weights: &mut FocalWeights,
) -> Result<Var> {
    if g.shape(pred.0) != target.shape() || g.shape(pred.1) != target.shape() {
        return Err(Error::shape("focal_frequency_loss", &[g.shape(pred.0), target.shape()]));
    }
    let (tre, tim) = target.clone().into_parts();
    let tre = g.constant(tre);
    let tim = g.constant(tim);
    let dr = g.sub(pred.0, tre)?;
    let di = g.sub(pred.1, tim)?;
    let dr2 = g.power(dr, 2.0)?;
    let di2 = g.power(di, 2.0)?;
    let d2 = g.add(dr2, di2)?;
    let weight = weights.weight(g.value(d2), beta)?;
    let weight = g.constant(weight);
    let weighted = g.mul(d2, weight)?;
    g.mean(weighted)
}

/// Masked-patch MSE (value only) for one `H×W×C` image. Returns `(loss, degenerate)`;
/// an empty masked set yields `(0, true)`.
pub fn pixel_reconstruction_loss(pred: &Tensor, target: &Tensor, plan: &MaskPlan, patch_size: usize) -> Result<(f64, bool)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("pixel_reconstruction_loss", &[pred.shape(), target.shape()]));
    }
    if plan.masked().is_empty() {
        return Ok((0.0, true));
    }
    let (pp, tp) = (patchify(pred, patch_size)?, patchify(target, patch_size)?);
    if pp.shape()[0] != plan.num_patches() {
        return Err(Error::invalid("mask plan does not match the patch grid"));
    }
    let w = pp.shape()[1];
    let mut acc = 0.0;
    for &i in plan.masked() {
        for j in 0..w {
            acc += (pp.data()[i * w + j] - tp.data()[i * w + j]).powi(2);
        }
    }
    Ok((acc / (plan.num_masked() * w) as f64, false))
}

/// Per-patch standardized copy of `[rows, d]` patches (mean 0, unit variance, ε = 1e-6).
fn normalize_patches(patches: &Tensor) -> Tensor {
    let d = patches.shape()[1];
    let mut out = patches.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d as f64 - 1.0).max(1.0);
        let rstd = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * rstd);
    }
    out
}

/// Differentiable masked-patch MSE over a batch. `None` when nothing is masked.
pub fn pixel_reconstruction_loss_var(
    g: &mut Graph,
    pixels: Var,
    target: &Tensor,
    plans: &[MaskPlan],
    patch_size: usize,
    norm_pix_target: bool,
) -> Result<Option<Var>> {
    if g.shape(pixels) != target.shape() {
        return Err(Error::shape("pixel_reconstruction_loss", &[g.shape(pixels), target.shape()]));
    }
    let pred = patchify_var(g, pixels, patch_size)?;
    let n = g.shape(pred)[0] / plans.len().max(1);
    let rows: Vec<usize> =
        plans.iter().enumerate().flat_map(|(b, p)| p.masked().iter().map(move |&i| b * n + i)).collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let mut tp = patchify(target, patch_size)?;
    if norm_pix_target {
        tp = normalize_patches(&tp);
    }
    let tv = g.constant(tp);
    let tm = g.gather_rows(tv, rows.clone())?;
    let pm = g.gather_rows(pred, rows)?;
    let d = g.sub(pm, tm)?;
    let d2 = g.power(d, 2.0)?;
    g.mean(d2).map(Some)
}

/// Decoder outputs feeding the objective.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    /// `P`, `[B,H,W,C]`.
    pub pixels: Option<Var>,
    /// `Q̃` as `(re, im)`, each `[B,H,W,C]`.
    pub spectrum: Option<(Var, Var)>,
}

/// Builds the enabled terms and the weighted total.
///
/// `target` is `Ĝ_p` (`[B,H,W,C]`); `Ĝ_f` is its spectrum. `images` supplies
/// the visible patches for the composed image (normally identical to `target`).
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var(
    g: &mut Graph,
    pred: Predictions,
    target: &Tensor,
    images: &Tensor,
    plans: &[MaskPlan],
    patch_size: usize,
    norm_pix_target: bool,
    cfg: &LossConfig,
) -> Result<LossVars> {
    total_loss_var_taped(g, pred, target, images, plans, patch_size, norm_pix_target, cfg, &mut FocalWeights::Live)
}

/// [`total_loss_var`] with explicit control over the focal weights.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var_taped(
    g: &mut Graph,
    pred: Predictions,
    target: &Tensor,
    images: &Tensor,
    plans: &[MaskPlan],
    patch_size: usize,
    norm_pix_target: bool,
    cfg: &LossConfig,
    weights: &mut FocalWeights,
) -> Result<LossVars> {
    cfg.validate()?;
    let t = cfg.toggles;
    let need_px = || pred.pixels.ok_or_else(|| Error::invalid("pixel prediction required by enabled terms"));
    let need_q = || pred.spectrum.ok_or_else(|| Error::invalid("spectrum prediction required by enabled terms"));
    let target_spectrum = if t.freq_con || t.freq_re {
        let mut re = target.data().to_vec();
        let mut im = vec![0.0; re.len()];
        fourier::transform(target.shape(), &mut re, &mut im, false);
        Some(ComplexTensor::new(target.shape().to_vec(), re, im)?)
    } else {
        None
    };

    let mut degenerate_mask = false;
    let pix_re = if t.pix_re {
        let v = pixel_reconstruction_loss_var(g, need_px()?, target, plans, patch_size, norm_pix_target)?;
        degenerate_mask = v.is_none();
        Some(v.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
    } else {
        None
    };
    let freq_con = if t.freq_con {
        let composed = compose_full_image(g, need_px()?, images, plans, patch_size)?;
        let spec = dft2d_real_var(g, composed)?;
        Some(focal_frequency_loss_taped(g, spec, target_spectrum.as_ref().unwrap(), cfg.beta, weights)?)
    } else {
        None
    };
    let freq_re = if t.freq_re {
        Some(focal_frequency_loss_taped(g, need_q()?, target_spectrum.as_ref().unwrap(), cfg.beta, weights)?)
    } else {
        None
    };
    let pix_con = if t.pix_con {
        let (qr, qi) = need_q()?;
        let (q, _) = idft2d_var(g, qr, qi)?;
        let tv = g.constant(target.clone());
        let d = g.sub(q, tv)?;
        let d2 = g.power(d, 2.0)?;
        Some(g.mean(d2)?)
    } else {
        None
    };

    let pixel_group = sum_terms(g, &[pix_re, freq_con])?;
    let freq_group = sum_terms(g, &[freq_re, pix_con])?;
    let total = match (pixel_group, freq_group) {
        (Some(p), Some(f)) => {
            let f = g.scale(f, cfg.lambda)?;
            g.add(p, f)?
        }
        (Some(p), None) => p,
        (None, Some(f)) => g.scale(f, cfg.lambda)?,
        (None, None) => unreachable!("validated: at least one term enabled"),
    };
    Ok(LossVars { pix_re, freq_con, freq_re, pix_con, total, degenerate_mask })
}

fn sum_terms(g: &mut Graph, terms: &[Option<Var>]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            Some(a) => g.add(a, *t)?,
            None => *t,
        });
    }
    Ok(acc)
}

/// Value of the objective for one `H×W×C` image and detached predictions.
///
/// `target_spectrum` is `Ĝ_f`; it must equal the DFT of `target` for the
/// terms to carry their usual meaning.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    pixels: &Tensor,
    spectrum: &Spectrum2D,
    target: &Tensor,
    target_spectrum: &Spectrum2D,
    image: &Tensor,
    plan: &MaskPlan,
    patch_size: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let t = cfg.toggles;
    let mut out = LossBreakdown::default();
    if t.pix_re {
        out.pix_re = pixel_reconstruction_loss(pixels, target, plan, patch_size)?.0;
    }
    if t.freq_con {
        let composed = compose_image(pixels, image, plan, patch_size)?;
        out.freq_con = focal_frequency_loss(&fourier::dft2d(&composed)?, target_spectrum, cfg.beta)?;
    }
    if t.freq_re {
        out.freq_re = focal_frequency_loss(spectrum, target_spectrum, cfg.beta)?;
    }
    if t.pix_con {
        let q = fourier::idft2d(spectrum)?.real_part();
        if q.shape() != target.shape() {
            return Err(Error::shape("pix_con", &[q.shape(), target.shape()]));
        }
        out.pix_con = q.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / q.len() as f64;
    }
    out.total = out.pix_re + out.freq_con + cfg.lambda * (out.freq_re + out.pix_con);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_masking;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Spectrum2D {
        Spectrum2D::new(ComplexTensor::new(shape, re, im).unwrap()).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(frequency_distance_gamma((3.0, 4.0), (0.0, 0.0)), 5.0);
        assert_eq!(frequency_distance_gamma((1.5, -2.0), (1.5, -2.0)), 0.0);
        assert_eq!(frequency_distance_gamma((1.0, 1.0), (1.0, -1.0)), 2.0);
    }

    #[test]
    fn focal_single_component() {
        let p = spec(vec![1, 1, 1], vec![2.0], vec![0.0]);
        let t = spec(vec![1, 1, 1], vec![0.0], vec![0.0]);
        let l = focal_frequency_loss(&p, &t, 1.0).unwrap();
        assert!((l - 8.0).abs() < 1e-11);
        assert_eq!(focal_frequency_loss(&p, &p, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn focal_beta_zero_is_plain_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = || (0..16).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect::<Vec<_>>();
        let p = spec(vec![4, 4, 1], r(), r());
        let t = spec(vec![4, 4, 1], r(), r());
        let mut plain = 0.0;
        for i in 0..16 {
            plain += (p.values().re()[i] - t.values().re()[i]).powi(2) + (p.values().im()[i] - t.values().im()[i]).powi(2);
        }
        plain /= 16.0;
        assert!((focal_frequency_loss(&p, &t, 0.0).unwrap() - plain).abs() < 1e-12);
    }

    #[test]
    fn focal_shape_mismatch() {
        let p = spec(vec![2, 2, 1], vec![0.0; 4], vec![0.0; 4]);
        let t = spec(vec![1, 4, 1], vec![0.0; 4], vec![0.0; 4]);
        assert!(focal_frequency_loss(&p, &t, 1.0).is_err());
    }

    #[test]
    fn pixel_loss_constant_error() {
        let target = Tensor::zeros(vec![4, 4, 1]);
        let pred = Tensor::full(vec![4, 4, 1], 0.3);
        // one masked patch out of four
        let plan = MaskPlan::new(vec![0, 1, 2, 3], 3).unwrap();
        let (l, deg) = pixel_reconstruction_loss(&pred, &target, &plan, 2).unwrap();
        assert!(!deg);
        assert!((l - 0.09).abs() < 1e-15);
        assert_eq!(pixel_reconstruction_loss(&target, &target, &plan, 2).unwrap().0, 0.0);
        let (l, deg) = pixel_reconstruction_loss(&pred, &target, &MaskPlan::identity(4), 2).unwrap();
        assert_eq!((l, deg), (0.0, true));
    }

    #[test]
    fn presets_cover_the_ablation_rows() {
        let p = LossToggles::preset("pix-only").unwrap();
        assert!(p.pix_re && !p.freq_con && !p.freq_re && !p.pix_con);
        for name in ["full", "pix-only", "no-fd", "freq-only", "no-pd", "no-con"] {
            assert!(LossToggles::preset(name).unwrap().any());
        }
        assert!(LossToggles::preset("bogus").is_none());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        let none = LossToggles { pix_re: false, freq_con: false, freq_re: false, pix_con: false };
        assert!(LossConfig { toggles: none, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn perfect_prediction_and_lambda_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = Tensor::from_fn(vec![8, 8, 2], |_| rng.random::<f64>());
        let gf = fourier::dft2d(&image).unwrap();
        let plan = random_masking(16, 0.75, 0).unwrap();
        let b = total_loss(&image, &gf, &image, &gf, &image, &plan, 2, &LossConfig::default()).unwrap();
        assert!(b.total.abs() < 1e-20, "{b:?}");

        let noisy = image.map(|v| v + 0.1);
        let qs = fourier::dft2d(&noisy).unwrap();
        let cfg0 = LossConfig { lambda: 0.0, ..Default::default() };
        let b = total_loss(&noisy, &qs, &image, &gf, &image, &plan, 2, &cfg0).unwrap();
        assert_eq!(b.total, b.pix_re + b.freq_con);
        assert!(b.freq_re > 0.0 && b.pix_con > 0.0);
    }
}
