use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{MaskPlan, ModelConfig, ModelParams, Network};
use crate::tensor::Tensor;

const BATCH: usize = 64;

/// `rows × cols` row-major samples of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Block index; `enc_depth` denotes the final normed output.
    pub layer: usize,
    pub pooling: &'static str,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("{} values for a {rows}×{cols} feature matrix", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "feature matrix".into() });
        }
        Ok(FeatureMatrix { rows, cols, data, layer: 0, pooling: "none" })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

/// Runs the unmasked encoder over `images` (each already normalized
/// `H×W×C`) and mean-pools the tokens of each requested layer. Layers
/// `0..enc_depth` are block outputs and `enc_depth` is the final norm.
pub fn extract_features(
    cfg: &ModelConfig,
    params: &ModelParams,
    images: &[Tensor],
    layers: &[usize],
) -> Result<Vec<FeatureMatrix>> {
    if images.is_empty() {
        return Err(Error::invalid("no images to extract features from"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l > cfg.enc_depth) {
        return Err(Error::invalid(format!("layer {bad} out of range 0..={}", cfg.enc_depth)));
    }
    let n = cfg.num_patches();
    let d = cfg.enc_dim;
    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(images.len() * d); layers.len()];
    let eval_cfg = ModelConfig { mask_ratio: 0.0, ..cfg.clone() };
    for chunk in images.chunks(BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * chunk[0].len());
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        let batch = Tensor::new([&[chunk.len()][..], chunk[0].shape()].concat(), data)?;
        let plans = vec![MaskPlan::identity(n); chunk.len()];
        let mut g = Graph::new();
        let vars = params.register(&mut g, false);
        let enc = Network::new(&eval_cfg, &vars).encode(&mut g, &batch, &plans)?;
        for (slot, &l) in out.iter_mut().zip(layers) {
            let tokens = g.value(enc.layers[l]).data();
            for b in 0..chunk.len() {
                let mut pooled = vec![0.0; d];
                for t in 0..n {
                    let row = &tokens[(b * n + t) * d..(b * n + t + 1) * d];
                    pooled.iter_mut().zip(row).for_each(|(p, v)| *p += v);
                }
                slot.extend(pooled.into_iter().map(|v| v / n as f64));
            }
        }
    }
    layers
        .iter()
        .zip(out)
        .map(|(&layer, data)| {
            let mut fm = FeatureMatrix::new(images.len(), d, data)?;
            fm.layer = layer;
            fm.pooling = "mean";
            Ok(fm)
        })
        .collect()
}
