//! The geminated autoencoder: masked ViT encoder, pixel decoder and
//! spectral-filter frequency decoder.

mod config;
mod mask;
mod network;
mod params;
mod patch;

pub use config::ModelConfig;
pub use mask::{random_masking, MaskPlan};
pub use network::{compose_full_image, fsp_block, self_attention, vit_block, Encoded, GeminatedOutput, Network};
pub use params::{ModelParams, ParamVars, INIT_STD};
pub use patch::{patchify, patchify_var, unpatchify, unpatchify_batch, unpatchify_var};

use crate::autodiff::Graph;
use crate::error::Result;
use crate::fourier::Spectrum2D;
use crate::tensor::{ComplexTensor, Tensor};

/// Decoder outputs for one image, detached from any graph.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `P`: pixel-decoder image, `H×W×C`.
    pub pixels: Tensor,
    /// `Q̃`: frequency-decoder spectrum, `H×W×C`.
    pub spectrum: Spectrum2D,
    pub plan: MaskPlan,
}

/// Runs both decoders on a single `H×W×C` image without recording gradients.
pub fn predict(cfg: &ModelConfig, params: &ModelParams, image: &Tensor, plan: &MaskPlan) -> Result<Prediction> {
    let batch = image.clone().reshape(with_batch(image.shape()))?;
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let out = Network::new(cfg, &vars).forward(&mut g, &batch, std::slice::from_ref(plan))?;
    let shape = image.shape().to_vec();
    let pixels = g.value(out.pixels).clone().reshape(shape.clone())?;
    let re = g.value(out.spectrum_re).clone().reshape(shape.clone())?;
    let im = g.value(out.spectrum_im).clone().reshape(shape)?;
    let spectrum = Spectrum2D::new(ComplexTensor::from_parts(re, im)?)?;
    Ok(Prediction { pixels, spectrum, plan: plan.clone() })
}

/// Value-level composition for one `H×W×C` image: `pixels` on masked
/// patches, `original` on visible ones.
pub fn compose_image(pixels: &Tensor, original: &Tensor, plan: &MaskPlan, patch_size: usize) -> Result<Tensor> {
    if pixels.shape() != original.shape() || pixels.rank() != 3 {
        return Err(crate::error::Error::shape("compose_image", &[pixels.shape(), original.shape()]));
    }
    let c = pixels.shape()[2];
    let mut out = patchify(pixels, patch_size)?;
    let orig = patchify(original, patch_size)?;
    if out.shape()[0] != plan.num_patches() {
        return Err(crate::error::Error::invalid("mask plan does not match the patch grid"));
    }
    let w = out.shape()[1];
    for &i in plan.visible() {
        out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&orig.data()[i * w..(i + 1) * w]);
    }
    unpatchify(&out, patch_size, c)?.reshape(pixels.shape().to_vec())
}

fn with_batch(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}
