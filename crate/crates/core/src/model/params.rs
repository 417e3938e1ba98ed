use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Every learnable tensor of the encoder and both decoders, by stable name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph handles for a registered [`ModelParams`].
pub type ParamVars = BTreeMap<String, Var>;

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    /// Truncated-normal (σ = 0.02, cut at 2σ) projections, positional embeddings and
    /// mask tokens; zero biases; unit/zero layer norms; all-ones spectral filters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { rng: &mut rng, tensors: BTreeMap::new() };
        let (n, pd, de, dd) = (cfg.num_patches(), cfg.patch_dim(), cfg.enc_dim, cfg.dec_dim);
        let g = cfg.grid();

        b.linear("enc.patch_embed", pd, de);
        b.normal("enc.pos", vec![n, de]);
        for i in 0..cfg.enc_depth {
            b.vit_block(&format!("enc.blocks.{i}"), de, cfg.mlp_ratio);
        }
        b.layer_norm("enc.norm", de);

        b.linear("pd.embed", de, dd);
        b.normal("pd.mask_token", vec![1, dd]);
        b.normal("pd.pos", vec![n, dd]);
        for i in 0..cfg.dec_depth {
            b.vit_block(&format!("pd.blocks.{i}"), dd, cfg.mlp_ratio);
        }
        b.layer_norm("pd.norm", dd);
        b.linear("pd.head", dd, pd);

        b.linear("fd.embed", de, dd);
        b.normal("fd.mask_token", vec![1, dd]);
        b.normal("fd.pos", vec![n, dd]);
        for i in 0..cfg.dec_depth {
            let p = format!("fd.blocks.{i}");
            b.layer_norm(&format!("{p}.ln1"), dd);
            b.tensors.insert(format!("{p}.omega"), Tensor::ones(vec![g, g, dd]));
            b.layer_norm(&format!("{p}.ln2"), dd);
            b.mlp(&format!("{p}.mlp"), dd, cfg.mlp_ratio);
        }
        b.layer_norm("fd.norm", dd);
        b.linear("fd.head", 2 * dd, 2 * pd);

        Ok(ModelParams { tensors: b.tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Registers every tensor in `g`, as trainable leaves or as constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        self.tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(k.clone(), t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect()
    }

    /// Checks that every tensor the architecture needs is present with the right shape.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(cfg, 0)?;
        for (k, t) in &reference.tensors {
            match self.tensors.get(k) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(Error::invalid(format!(
                        "parameter {k} has shape {:?}, expected {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("missing parameter {k}"))),
            }
        }
        Ok(())
    }
}

struct Builder<'a, R: Rng> {
    rng: &'a mut R,
    tensors: BTreeMap<String, Tensor>,
}

impl<R: Rng> Builder<'_, R> {
    fn normal(&mut self, name: &str, shape: Vec<usize>) {
        let dist = Normal::new(0.0, INIT_STD).unwrap();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        });
        self.tensors.insert(name.to_string(), t);
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.normal(&format!("{name}.w"), vec![din, dout]);
        self.tensors.insert(format!("{name}.b"), Tensor::zeros(vec![dout]));
    }

    fn layer_norm(&mut self, name: &str, d: usize) {
        self.tensors.insert(format!("{name}.scale"), Tensor::ones(vec![d]));
        self.tensors.insert(format!("{name}.shift"), Tensor::zeros(vec![d]));
    }

    fn mlp(&mut self, name: &str, d: usize, ratio: usize) {
        self.linear(&format!("{name}.fc1"), d, d * ratio);
        self.linear(&format!("{name}.fc2"), d * ratio, d);
    }

    fn vit_block(&mut self, p: &str, d: usize, ratio: usize) {
        self.layer_norm(&format!("{p}.ln1"), d);
        self.linear(&format!("{p}.attn.qkv"), d, 3 * d);
        self.linear(&format!("{p}.attn.proj"), d, d);
        self.layer_norm(&format!("{p}.ln2"), d);
        self.mlp(&format!("{p}.mlp"), d, ratio);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_finite_and_seeded() {
        let cfg = ModelConfig::micro();
        let a = ModelParams::init(&cfg, 1).unwrap();
        assert!(a.is_finite());
        assert_eq!(a, ModelParams::init(&cfg, 1).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 2).unwrap());
        let omega = a.get("fd.blocks.0.omega").unwrap();
        assert_eq!(omega.shape(), &[4, 4, 8]);
        assert!(omega.data().iter().all(|&v| v == 1.0));
        let w = a.get("enc.patch_embed.w").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 0.04));
        a.check_against(&cfg).unwrap();
    }
}
