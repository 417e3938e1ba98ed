//! Patch geometry: row `i` of a patchified image holds the patch at grid
//! position `(i / G, i % G)`, pixels row-major with channels fastest.

use crate::autodiff::{permute, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn geometry(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, h, w, c) = match *shape {
        [h, w, c] => (1, h, w, c),
        [b, h, w, c] => (b, h, w, c),
        _ => return Err(Error::invalid(format!("expected [B,]H×W×C image, got {shape:?}"))),
    };
    if p == 0 || h != w || h % p != 0 {
        return Err(Error::invalid(format!("image {h}×{w} cannot be cut into {p}×{p} patches")));
    }
    Ok((b, h / p, p, c))
}

/// `[H,W,C]` or `[B,H,W,C]` → `[B·n, p²·C]`.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (b, g, p, c) = geometry(image.shape(), p)?;
    let split = image.clone().reshape(vec![b, g, p, g, p, c])?;
    permute(&split, &[0, 1, 3, 2, 4, 5])?.reshape(vec![b * g * g, p * p * c])
}

/// Inverse of [`patchify`]; `[B·n, p²·C]` → `[B,H,W,C]`.
pub fn unpatchify(patches: &Tensor, p: usize, channels: usize) -> Result<Tensor> {
    let (b, g) = unpatch_dims(patches.shape(), p, channels)?;
    let split = patches.clone().reshape(vec![b, g, g, p, p, channels])?;
    permute(&split, &[0, 1, 3, 2, 4, 5])?.reshape(vec![b, g * p, g * p, channels])
}

/// A single image's patch matrix must hold a square number of rows.
fn unpatch_dims(shape: &[usize], p: usize, c: usize) -> Result<(usize, usize)> {
    let [rows, width] = *shape else {
        return Err(Error::invalid(format!("patch matrix must be 2D, got {shape:?}")));
    };
    if width != p * p * c {
        return Err(Error::invalid(format!("patch width {width} != {p}²·{c}")));
    }
    let g = (rows as f64).sqrt().round() as usize;
    if g * g != rows {
        return Err(Error::invalid(format!("{rows} patches do not form a square grid")));
    }
    Ok((1, g))
}

/// Batched inverse of [`patchify`] when the batch size is known.
pub fn unpatchify_batch(patches: &Tensor, batch: usize, p: usize, channels: usize) -> Result<Tensor> {
    let rows = patches.shape()[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::invalid(format!("{rows} patches do not split into {batch} images")));
    }
    let per = rows / batch;
    let g = (per as f64).sqrt().round() as usize;
    if g * g != per || patches.shape()[1] != p * p * channels {
        return Err(Error::shape("unpatchify", &[patches.shape()]));
    }
    let split = patches.clone().reshape(vec![batch, g, g, p, p, channels])?;
    permute(&split, &[0, 1, 3, 2, 4, 5])?.reshape(vec![batch, g * p, g * p, channels])
}

/// Differentiable [`patchify`] of a `[B,H,W,C]` variable.
pub fn patchify_var(g: &mut Graph, image: Var, p: usize) -> Result<Var> {
    let (b, gs, p, c) = geometry(g.shape(image), p)?;
    let x = g.reshape(image, vec![b, gs, p, gs, p, c])?;
    let x = g.transpose(x, vec![0, 1, 3, 2, 4, 5])?;
    g.reshape(x, vec![b * gs * gs, p * p * c])
}

/// Differentiable inverse of [`patchify_var`].
pub fn unpatchify_var(g: &mut Graph, patches: Var, batch: usize, p: usize, channels: usize) -> Result<Var> {
    let rows = g.shape(patches)[0];
    let per = rows / batch.max(1);
    let gs = (per as f64).sqrt().round() as usize;
    if batch == 0 || gs * gs * batch != rows || g.shape(patches)[1] != p * p * channels {
        return Err(Error::shape("unpatchify", &[g.shape(patches)]));
    }
    let x = g.reshape(patches, vec![batch, gs, gs, p, p, channels])?;
    let x = g.transpose(x, vec![0, 1, 3, 2, 4, 5])?;
    g.reshape(x, vec![batch, gs * p, gs * p, channels])
}
