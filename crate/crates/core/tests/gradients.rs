//! Analytic gradients against central finite differences.

use std::collections::BTreeMap;

use ge2ae::autodiff::{Graph, PrimitiveKind, Var};
use ge2ae::fourier::dft2d_real_var;
use ge2ae::gradcheck::{check, primitive_cases};
use ge2ae::model::{fsp_block, random_masking, ModelConfig, ModelParams, Network};
use ge2ae::selftest::micro_objective_check;
use ge2ae::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn every_primitive_on_three_inputs() {
    let mut seen = Vec::new();
    for seed in [1, 2, 3] {
        for case in primitive_cases(seed) {
            let r = case.run(H, 1e-8).unwrap();
            assert!(r.max_rel_err() <= 1e-6, "{} seed {seed}: {:?}", case.kind, r.worst());
            seen.push(case.kind);
        }
    }
    for kind in PrimitiveKind::ALL {
        assert_eq!(seen.iter().filter(|k| **k == kind).count(), 3, "{kind} not covered");
    }
}

#[test]
fn sum_of_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = BTreeMap::from([
        ("x".to_string(), random(&mut rng, vec![8])),
        ("scale".to_string(), random(&mut rng, vec![8])),
        ("shift".to_string(), random(&mut rng, vec![8])),
    ]);
    let r = check(&params, H, 1e-8, |g, v| {
        let y = g.layer_norm(v["x"], v["scale"], v["shift"], 1e-6)?;
        g.sum(y)
    })
    .unwrap();
    assert!(r.max_rel_err() <= 1e-6, "{:?}", r.worst());
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.param("x", random(&mut rng, vec![3, 7]));
    let s = g.softmax(x).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads["x"].data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn scalar_function_of_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = BTreeMap::from([("img".to_string(), random(&mut rng, vec![4, 8, 2]))]);
    let r = check(&params, H, 1e-8, |g, v| {
        let (re, im) = dft2d_real_var(g, v["img"])?;
        let r2 = g.power(re, 2.0)?;
        let i3 = g.power(im, 3.0)?;
        let s = g.add(r2, i3)?;
        g.mean(s)
    })
    .unwrap();
    assert!(r.max_rel_err() <= 1e-5, "{:?}", r.worst());
}

/// A G=4, D=8 spectral block with random (not all-ones) filter.
#[test]
fn spectral_block_filter_gradient() {
    let cfg = ModelConfig { dec_dim: 8, dec_heads: 2, ..ModelConfig::micro() };
    assert_eq!(cfg.grid(), 4);
    let init = ModelParams::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut params: BTreeMap<String, Tensor> = init
        .tensors()
        .iter()
        .filter(|(k, _)| k.starts_with("fd.blocks.0."))
        .map(|(k, t)| (k.clone(), Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + rng.random_range(-0.5..0.5))))
        .collect();
    params.insert("x".into(), random(&mut rng, vec![4, 4, 8]));
    let weights = random(&mut rng, vec![4, 4, 8]);
    let r = check(&params, H, 1e-8, |g, v| {
        let y = fsp_block(g, v, "fd.blocks.0", v["x"], 1e-6)?;
        let w = g.constant(weights.clone());
        let yw = g.mul(y, w)?;
        g.sum(yw)
    })
    .unwrap();
    assert!(r.rel_err["fd.blocks.0.omega"] <= 1e-4, "{:?}", r.rel_err);
    assert!(r.max_rel_err() <= 1e-4, "{:?}", r.worst());
}

#[test]
fn mean_pixel_prediction_wrt_mask_token() {
    let cfg = ModelConfig::micro();
    let base = ModelParams::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = Tensor::from_fn(vec![2, 8, 8, 1], |_| rng.random_range(0.0..1.0));
    let plans = vec![random_masking(16, 0.75, 3).unwrap(), random_masking(16, 0.75, 4).unwrap()];
    let token = BTreeMap::from([("pd.mask_token".to_string(), base.get("pd.mask_token").unwrap().clone())]);
    let build = |g: &mut Graph, v: &BTreeMap<String, Var>| -> Result<Var> {
        let mut all = base.register(g, false);
        all.insert("pd.mask_token".into(), v["pd.mask_token"]);
        let net = Network::new(&cfg, &all);
        let enc = net.encode(g, &images, &plans)?;
        let p = net.pixel_decode(g, &enc, &plans)?;
        g.mean(p)
    };
    let r = check(&token, H, 1e-10, build).unwrap();
    assert!(r.max_rel_err() <= 1e-4, "{:?}", r.worst());
}

#[test]
fn micro_model_total_objective() {
    let r = micro_objective_check(21).unwrap();
    assert!(r.rel_err.len() > 30, "every parameter tensor is checked");
    assert!(r.max_rel_err() <= 1e-3, "{:?}", r.worst());
}
