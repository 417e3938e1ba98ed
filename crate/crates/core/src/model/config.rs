use crate::autodiff::DEFAULT_LN_EPS;
use crate::error::{Error, Result};

/// Architecture and masking hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    /// Block count `L`, shared by the pixel and frequency decoders.
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub norm_pix_target: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    /// ViT-B/16 encoder at 224², 8-block decoders, 75 % masking.
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            in_chans: 3,
            enc_dim: 768,
            enc_depth: 12,
            enc_heads: 12,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 16,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            norm_pix_target: false,
            ln_eps: DEFAULT_LN_EPS,
        }
    }
}

impl ModelConfig {
    /// Desk-scale profile: 32² inputs, patch 4 (64 tokens), 4×128 encoder, 2×64 decoders.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            in_chans: 3,
            enc_dim: 128,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 64,
            dec_depth: 2,
            dec_heads: 4,
            ..Self::default()
        }
    }

    /// Smallest useful network, used by gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            in_chans: 1,
            enc_dim: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_chans
    }

    /// Visible-token count `⌊n·(1−r)⌋`.
    pub fn num_visible(&self) -> usize {
        visible_count(self.num_patches(), self.mask_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch_size));
        }
        if self.in_chans == 0 || self.enc_depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return bad("channel, depth and mlp ratio must be positive".into());
        }
        if self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            return bad(format!("encoder dim {} not divisible by {} heads", self.enc_dim, self.enc_heads));
        }
        if self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            return bad(format!("decoder dim {} not divisible by {} heads", self.dec_dim, self.dec_heads));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.num_visible() == 0 {
            return bad(format!("mask ratio {} leaves no visible patch", self.mask_ratio));
        }
        if !(self.ln_eps > 0.0) {
            return bad("layer-norm epsilon must be positive".into());
        }
        Ok(())
    }
}

pub(crate) fn visible_count(n: usize, ratio: f64) -> usize {
    // nudge guards against 0.75 * 64 style products landing a hair below an integer
    ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_valid() {
        for c in [ModelConfig::default(), ModelConfig::toy(), ModelConfig::micro()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::toy().num_patches(), 64);
        assert_eq!(ModelConfig::default().num_visible(), 49);
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = ModelConfig { image_size: 30, ..ModelConfig::toy() };
        assert!(c.validate().is_err());
        let c = ModelConfig { mask_ratio: 1.0, ..ModelConfig::toy() };
        assert!(c.validate().is_err());
    }
}
