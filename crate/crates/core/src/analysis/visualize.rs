use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fourier::{self, amplitude_phase, fftshift, idft2d, unit_amplitude, Spectrum2D};
use crate::model::{compose_image, patchify, predict, unpatchify, MaskPlan, ModelConfig, ModelParams};
use crate::ppm::Ppm;
use crate::tensor::Tensor;
use crate::training::Normalization;

/// Centered `log(1 + amplitude)` per channel.
pub fn spectrum_map(spec: &Spectrum2D) -> Tensor {
    let (amp, _) = amplitude_phase(spec);
    fftshift(&amp.map(f64::ln_1p))
}

fn phase_only(spec: &Spectrum2D) -> Result<Tensor> {
    Ok(idft2d(&unit_amplitude(spec))?.real_part())
}

fn masked_input(raw: &Tensor, plan: &MaskPlan, p: usize) -> Result<Tensor> {
    let c = raw.shape()[2];
    let mut patches = patchify(raw, p)?;
    let w = patches.shape()[1];
    for &i in plan.masked() {
        patches.data_mut()[i * w..(i + 1) * w].iter_mut().for_each(|v| *v = 0.5);
    }
    unpatchify(&patches, p, c)?.reshape(raw.shape().to_vec())
}

/// Tiles the `G×G` planes of a `G×G×D` filter into one gray image,
/// `ceil(√D)` tiles per row, min-max scaled over the whole filter.
fn tile_filter(omega: &Tensor) -> Result<Ppm> {
    let (g, d) = match omega.shape() {
        &[g, g2, d] if g == g2 => (g, d),
        s => return Err(Error::invalid(format!("filter must be G×G×D, got {s:?}"))),
    };
    let cols = (d as f64).sqrt().ceil() as usize;
    let rows = d.div_ceil(cols);
    let mut img = Tensor::full(vec![rows * g, cols * g, 1], f64::NAN);
    for ch in 0..d {
        let (ty, tx) = (ch / cols, ch % cols);
        for y in 0..g {
            for x in 0..g {
                img.set(&[ty * g + y, tx * g + x, 0], omega.at(&[y, x, ch]));
            }
        }
    }
    let lo = omega.data().iter().copied().fold(f64::INFINITY, f64::min);
    let filled = img.map(|v| if v.is_nan() { lo } else { v });
    Ppm::from_tensor_minmax(&filled)
}

/// Writes, for each raw `[0, 1]` image: the masked input, the composed
/// pixel reconstruction, log-amplitude maps of both predicted spectra, the
/// frequency branch's pixel image and phase-only images of both spectra.
/// Also writes one tiled image per frequency-decoder filter. Masks are drawn
/// from a generator seeded with `seed`. Returns the written paths in order.
pub fn emit_visualizations(
    cfg: &ModelConfig,
    params: &ModelParams,
    norm: &Normalization,
    images: &[Tensor],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::new();
    let mut put = |name: String, ppm: Ppm| -> Result<()> {
        let p = out_dir.join(name);
        ppm.write(&p)?;
        written.push(p);
        Ok(())
    };
    for (i, raw) in images.iter().enumerate() {
        let plan = MaskPlan::from_rng(cfg.num_patches(), cfg.mask_ratio, &mut rng)?;
        let mut x = raw.clone();
        norm.apply(&mut x);
        let pred = predict(cfg, params, &x, &plan)?;
        let composed = compose_image(&pred.pixels, &x, &plan, cfg.patch_size)?;
        let p_spec = fourier::dft2d(&composed)?;
        let mut composed_raw = composed.clone();
        norm.invert(&mut composed_raw);
        let mut q = idft2d(&pred.spectrum)?.real_part();
        norm.invert(&mut q);

        let stem = format!("img{i:03}");
        put(format!("{stem}_masked.ppm"), Ppm::from_unit_tensor(&masked_input(raw, &plan, cfg.patch_size)?)?)?;
        put(format!("{stem}_composed.ppm"), Ppm::from_unit_tensor(&composed_raw)?)?;
        put(format!("{stem}_p_spectrum.ppm"), Ppm::from_tensor_minmax(&spectrum_map(&p_spec))?)?;
        put(format!("{stem}_q_spectrum.ppm"), Ppm::from_tensor_minmax(&spectrum_map(&pred.spectrum))?)?;
        put(format!("{stem}_q.ppm"), Ppm::from_unit_tensor(&q)?)?;
        put(format!("{stem}_p_phase.ppm"), Ppm::from_tensor_minmax(&phase_only(&p_spec)?)?)?;
        put(format!("{stem}_q_phase.ppm"), Ppm::from_tensor_minmax(&phase_only(&pred.spectrum)?)?)?;
    }
    for l in 0..cfg.dec_depth {
        let name = format!("fd.blocks.{l}.omega");
        let omega = params.get(&name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        put(format!("fsp_block{l}.ppm"), tile_filter(omega)?)?;
    }
    Ok(written)
}
