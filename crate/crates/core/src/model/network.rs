//! Forward passes of the encoder and the two decoders, built on [`Graph`].

use std::rc::Rc;

use super::config::ModelConfig;
use super::mask::MaskPlan;
use super::params::ParamVars;
use super::patch::{patchify, patchify_var, unpatchify_var};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fourier::{dft2d_real_var, idft2d_var};
use crate::tensor::Tensor;

/// Encoder activations for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final (layer-normed) visible tokens, `[B·k, D_enc]`, image-major.
    pub tokens: Var,
    /// Output of every block followed by the final layer-normed tokens
    /// (`enc_depth + 1` entries), each `[B·k, D_enc]`.
    pub layers: Vec<Var>,
    pub batch: usize,
    pub keep: usize,
}

/// Predictions of both decoders.
#[derive(Clone, Debug)]
pub struct GeminatedOutput {
    /// Pixel-decoder image `P`, `[B,H,W,C]`.
    pub pixels: Var,
    /// Real plane of the frequency-decoder spectrum `Q̃`, `[B,H,W,C]`.
    pub spectrum_re: Var,
    /// Imaginary plane of `Q̃`.
    pub spectrum_im: Var,
    pub encoded: Encoded,
}

/// A model configuration bound to registered parameters.
pub struct Network<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamVars,
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamVars) -> Self {
        Network { cfg, params }
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    fn p(&self, name: &str) -> Result<Var> {
        param(self.params, name)
    }

    fn check_batch(&self, images: &Tensor, plans: &[MaskPlan]) -> Result<(usize, usize)> {
        let c = self.cfg;
        let want = [plans.len(), c.image_size, c.image_size, c.in_chans];
        if images.shape() != want {
            return Err(Error::shape("encode", &[images.shape(), &want]));
        }
        let keep = plans.first().map(MaskPlan::num_visible).unwrap_or(0);
        if plans.is_empty()
            || plans.iter().any(|p| p.num_patches() != c.num_patches() || p.num_visible() != keep)
        {
            return Err(Error::invalid("mask plans must be non-empty and share n and k with the config"));
        }
        Ok((plans.len(), keep))
    }

    /// Patch embedding of the visible patches, positional embeddings, encoder blocks, final norm.
    pub fn encode(&self, g: &mut Graph, images: &Tensor, plans: &[MaskPlan]) -> Result<Encoded> {
        let (batch, keep) = self.check_batch(images, plans)?;
        let n = self.cfg.num_patches();
        let patches = patchify(images, self.cfg.patch_size)?;
        let rows: Vec<usize> =
            plans.iter().enumerate().flat_map(|(b, p)| p.visible().iter().map(move |&i| b * n + i)).collect();
        let pos_rows: Vec<usize> = plans.iter().flat_map(|p| p.visible().iter().copied()).collect();

        let all = g.constant(patches);
        let visible = g.gather_rows(all, rows)?;
        let x = g.linear(visible, self.p("enc.patch_embed.w")?, self.p("enc.patch_embed.b")?)?;
        let pos = g.gather_rows(self.p("enc.pos")?, pos_rows)?;
        let mut x = g.add(x, pos)?;

        let mut layers = Vec::with_capacity(self.cfg.enc_depth + 1);
        for i in 0..self.cfg.enc_depth {
            x = vit_block(g, self.params, &format!("enc.blocks.{i}"), x, batch, keep, self.cfg.enc_heads, self.cfg.ln_eps)?;
            ensure_finite(g, x, || format!("encoder layer {i}"))?;
            layers.push(x);
        }
        let tokens = norm(g, self.params, "enc.norm", x, self.cfg.ln_eps)?;
        layers.push(tokens);
        Ok(Encoded { tokens, layers, batch, keep })
    }

    /// Projects visible tokens to decoder width, fills masked slots with the
    /// decoder's mask token and adds decoder positional embeddings: `[B·n, D_dec]`.
    fn decoder_input(&self, g: &mut Graph, prefix: &str, enc: &Encoded, plans: &[MaskPlan]) -> Result<Var> {
        let n = self.cfg.num_patches();
        let (batch, keep) = (enc.batch, enc.keep);
        let vis = g.linear(enc.tokens, self.p(&format!("{prefix}.embed.w"))?, self.p(&format!("{prefix}.embed.b"))?)?;
        let stacked = g.concat(&[vis, self.p(&format!("{prefix}.mask_token"))?], 0)?;
        let mask_row = batch * keep;
        let mut index = Vec::with_capacity(batch * n);
        for (b, plan) in plans.iter().enumerate() {
            index.extend(plan.slots().into_iter().map(|s| s.map_or(mask_row, |j| b * keep + j)));
        }
        let full = g.gather_rows(stacked, index)?;
        let tiled: Rc<[usize]> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.gather_rows(self.p(&format!("{prefix}.pos"))?, tiled)?;
        g.add(full, pos)
    }

    /// Pixel decoder: ViT blocks over all `n` tokens and a patchwise linear head; returns `P`.
    pub fn pixel_decode(&self, g: &mut Graph, enc: &Encoded, plans: &[MaskPlan]) -> Result<Var> {
        let c = self.cfg;
        let mut x = self.decoder_input(g, "pd", enc, plans)?;
        for i in 0..c.dec_depth {
            x = vit_block(g, self.params, &format!("pd.blocks.{i}"), x, enc.batch, c.num_patches(), c.dec_heads, c.ln_eps)?;
            ensure_finite(g, x, || format!("pixel decoder layer {i}"))?;
        }
        let x = norm(g, self.params, "pd.norm", x, c.ln_eps)?;
        let out = g.linear(x, self.p("pd.head.w")?, self.p("pd.head.b")?)?;
        unpatchify_var(g, out, enc.batch, c.patch_size, c.in_chans)
    }

    /// Frequency decoder: spectral-filter blocks over the `G×G×D` token grid,
    /// a final norm and 2D-DFT, then a patchwise head predicting the real and
    /// imaginary planes of the image spectrum `Q̃`.
    pub fn frequency_decode(&self, g: &mut Graph, enc: &Encoded, plans: &[MaskPlan]) -> Result<(Var, Var)> {
        let c = self.cfg;
        let (gs, d, pd) = (c.grid(), c.dec_dim, c.patch_dim());
        let x = self.decoder_input(g, "fd", enc, plans)?;
        let mut x = g.reshape(x, vec![enc.batch, gs, gs, d])?;
        for i in 0..c.dec_depth {
            x = fsp_block(g, self.params, &format!("fd.blocks.{i}"), x, c.ln_eps)?;
            ensure_finite(g, x, || format!("frequency decoder layer {i}"))?;
        }
        let x = norm(g, self.params, "fd.norm", x, c.ln_eps)?;
        let (re, im) = dft2d_real_var(g, x)?;
        let both = g.concat(&[re, im], 3)?;
        let both = g.reshape(both, vec![enc.batch * gs * gs, 2 * d])?;
        let out = g.linear(both, self.p("fd.head.w")?, self.p("fd.head.b")?)?;
        let out_re = g.slice(out, 1, 0, pd)?;
        let out_im = g.slice(out, 1, pd, 2 * pd)?;
        let q_re = unpatchify_var(g, out_re, enc.batch, c.patch_size, c.in_chans)?;
        let q_im = unpatchify_var(g, out_im, enc.batch, c.patch_size, c.in_chans)?;
        Ok((q_re, q_im))
    }

    pub fn forward(&self, g: &mut Graph, images: &Tensor, plans: &[MaskPlan]) -> Result<GeminatedOutput> {
        let encoded = self.encode(g, images, plans)?;
        let pixels = self.pixel_decode(g, &encoded, plans)?;
        let (spectrum_re, spectrum_im) = self.frequency_decode(g, &encoded, plans)?;
        Ok(GeminatedOutput { pixels, spectrum_re, spectrum_im, encoded })
    }
}

fn param(params: &ParamVars, name: &str) -> Result<Var> {
    params.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

fn ensure_finite(g: &Graph, x: Var, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(x).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what() })
    }
}

fn norm(g: &mut Graph, params: &ParamVars, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let s = param(params, &format!("{prefix}.scale"))?;
    let b = param(params, &format!("{prefix}.shift"))?;
    g.layer_norm(x, s, b, eps)
}

fn mlp(g: &mut Graph, params: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = g.linear(x, param(params, &format!("{prefix}.fc1.w"))?, param(params, &format!("{prefix}.fc1.b"))?)?;
    let h = g.gelu(h)?;
    g.linear(h, param(params, &format!("{prefix}.fc2.w"))?, param(params, &format!("{prefix}.fc2.b"))?)
}

/// Multi-head self-attention over `batch` sequences of `seq` rows in `x: [batch·seq, D]`.
pub fn self_attention(
    g: &mut Graph,
    params: &ParamVars,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let bh = batch * heads;
    let qkv = g.linear(x, param(params, &format!("{prefix}.qkv.w"))?, param(params, &format!("{prefix}.qkv.b"))?)?;
    let qkv = g.reshape(qkv, vec![batch, seq, 3, heads, dh])?;
    let qkv = g.transpose(qkv, vec![2, 0, 3, 1, 4])?;
    let qkv = g.reshape(qkv, vec![3 * bh, seq, dh])?;
    let q = g.slice(qkv, 0, 0, bh)?;
    let k = g.slice(qkv, 0, bh, 2 * bh)?;
    let v = g.slice(qkv, 0, 2 * bh, 3 * bh)?;
    let kt = g.transpose(k, vec![0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.reshape(ctx, vec![batch, heads, seq, dh])?;
    let ctx = g.transpose(ctx, vec![0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, vec![batch * seq, d])?;
    g.linear(ctx, param(params, &format!("{prefix}.proj.w"))?, param(params, &format!("{prefix}.proj.b"))?)
}

/// Pre-norm transformer block: `x + MHSA(LN1 x)`, then `+ FFN(LN2 ·)`.
#[allow(clippy::too_many_arguments)]
pub fn vit_block(
    g: &mut Graph,
    params: &ParamVars,
    prefix: &str,
    x: Var,
    batch: usize,
    seq: usize,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let h = norm(g, params, &format!("{prefix}.ln1"), x, eps)?;
    let h = self_attention(g, params, &format!("{prefix}.attn"), h, batch, seq, heads)?;
    let x = g.add(x, h)?;
    let h = norm(g, params, &format!("{prefix}.ln2"), x, eps)?;
    let h = mlp(g, params, &format!("{prefix}.mlp"), h)?;
    g.add(x, h)
}

/// Spectral-filter block on a `[..., G, G, D]` grid:
/// `u = x + Re(IDFT(Ω ⊙ DFT(LN1 x)))`, `y = u + FFN(LN2 u)`, with real `Ω: [G, G, D]`
/// scaling real and imaginary parts alike.
pub fn fsp_block(g: &mut Graph, params: &ParamVars, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let omega = param(params, &format!("{prefix}.omega"))?;
    let r = shape.len();
    if r < 3 || g.shape(omega) != &shape[r - 3..] {
        return Err(Error::shape("fsp_block", &[&shape, g.shape(omega)]));
    }
    let lead: usize = shape[..r - 3].iter().product();
    let cell: usize = shape[r - 3..].iter().product();

    let h = norm(g, params, &format!("{prefix}.ln1"), x, eps)?;
    let (fr, fi) = dft2d_real_var(g, h)?;
    let flat = g.reshape(omega, vec![1, cell])?;
    let tiled = g.gather_rows(flat, vec![0; lead])?;
    let om = g.reshape(tiled, shape.clone())?;
    let fr = g.mul(fr, om)?;
    let fi = g.mul(fi, om)?;
    let (spatial, _) = idft2d_var(g, fr, fi)?;
    let u = g.add(x, spatial)?;

    let h = norm(g, params, &format!("{prefix}.ln2"), u, eps)?;
    let h = mlp(g, params, &format!("{prefix}.mlp"), h)?;
    g.add(u, h)
}

/// `P`'s patches at masked positions, `original`'s at visible ones. Gradients
/// reach `pixels` only through masked patches.
pub fn compose_full_image(
    g: &mut Graph,
    pixels: Var,
    original: &Tensor,
    plans: &[MaskPlan],
    patch_size: usize,
) -> Result<Var> {
    let shape = g.shape(pixels).to_vec();
    if original.shape() != shape.as_slice() || shape.len() != 4 || shape[0] != plans.len() {
        return Err(Error::shape("compose_full_image", &[&shape, original.shape()]));
    }
    let (batch, channels) = (shape[0], shape[3]);
    let pred = patchify_var(g, pixels, patch_size)?;
    let n = g.shape(pred)[0] / batch;
    let rows: Vec<usize> =
        plans.iter().enumerate().flat_map(|(b, p)| p.visible().iter().map(move |&i| b * n + i)).collect();
    let orig = patchify(original, patch_size)?;
    let src = g.constant(orig);
    let src = g.gather_rows(src, rows.clone())?;
    let mixed = g.scatter_rows(pred, src, rows)?;
    unpatchify_var(g, mixed, batch, patch_size, channels)
}
