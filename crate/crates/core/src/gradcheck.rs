//! Central finite-difference checks of graph gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Primitive, PrimitiveKind, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-parameter comparison between analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, floor)` per parameter.
    pub rel_err: BTreeMap<String, f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.rel_err
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Compares `Graph::backward` against central differences with step `h`.
///
/// `build` receives a fresh graph with every entry of `params` registered as a
/// named leaf and must return a scalar loss.
pub fn check<F>(params: &BTreeMap<String, Tensor>, h: f64, floor: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let vars = p.iter().map(|(k, t)| (k.clone(), g.param(k.clone(), t.clone()))).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, loss))
    };
    let (g, loss) = eval(params)?;
    let analytic = g.backward(loss)?;

    let mut rel_err = BTreeMap::new();
    let mut work = params.clone();
    for (name, t) in params {
        let mut numeric = vec![0.0; t.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = x0 + h;
            let (g, l) = eval(&work)?;
            let plus = g.value(l).item();
            work.get_mut(name).unwrap().data_mut()[i] = x0 - h;
            let (g, l) = eval(&work)?;
            let minus = g.value(l).item();
            work.get_mut(name).unwrap().data_mut()[i] = x0;
            *slot = (plus - minus) / (2.0 * h);
        }
        let a = analytic[name].data();
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale = a.iter().chain(&numeric).map(|v| v.abs()).fold(floor, f64::max);
        rel_err.insert(name.clone(), diff / scale);
    }
    Ok(GradCheck { rel_err })
}

type Builder = Box<dyn Fn(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>>;

/// A small graph exercising one primitive, reduced to a scalar through a
/// fixed random projection so every output element carries gradient.
pub struct PrimitiveCase {
    pub kind: PrimitiveKind,
    pub params: BTreeMap<String, Tensor>,
    build: Builder,
}

impl PrimitiveCase {
    pub fn run(&self, h: f64, floor: f64) -> Result<GradCheck> {
        check(&self.params, h, floor, |g, v| (self.build)(g, v))
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// `Σ out ⊙ R` for a fixed pseudo-random `R` derived from the output shape.
pub fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(17, |a, &d| a * 31 + d as u64));
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// One case per entry of [`PrimitiveKind::ALL`], in that order.
pub fn primitive_cases(seed: u64) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PrimitiveKind::ALL
        .iter()
        .map(|&kind| {
            let mut p = BTreeMap::new();
            let mut put = |name: &str, shape: &[usize], lo: f64, hi: f64| {
                p.insert(name.to_string(), random(&mut rng, shape, lo, hi));
            };
            use PrimitiveKind as K;
            let build: Builder = match kind {
                K::Add | K::Sub | K::Mul => {
                    put("a", &[3, 4], -1.0, 1.0);
                    put("b", &[3, 4], -1.0, 1.0);
                    put("s", &[1], -1.0, 1.0);
                    Box::new(move |g, v| {
                        let (a, b, s) = (v["a"], v["b"], v["s"]);
                        let (x, y) = match kind {
                            K::Add => (g.add(a, b)?, g.add(a, s)?),
                            K::Sub => (g.sub(a, b)?, g.sub(s, a)?),
                            _ => (g.mul(a, b)?, g.mul(s, a)?),
                        };
                        let z = g.concat(&[x, y], 0)?;
                        project(g, z)
                    })
                }
                K::Matmul => {
                    put("a", &[3, 4], -1.0, 1.0);
                    put("b", &[4, 2], -1.0, 1.0);
                    put("c", &[2, 3, 4], -1.0, 1.0);
                    put("d", &[2, 4, 5], -1.0, 1.0);
                    Box::new(|g, v| {
                        let x = g.matmul(v["a"], v["b"])?;
                        let y = g.matmul(v["c"], v["d"])?;
                        let (px, py) = (project(g, x)?, project(g, y)?);
                        g.add(px, py)
                    })
                }
                K::Reshape => {
                    put("a", &[3, 4], -1.0, 1.0);
                    Box::new(|g, v| {
                        let r = g.reshape(v["a"], vec![2, 6])?;
                        project(g, r)
                    })
                }
                K::Transpose => {
                    put("a", &[2, 3, 4], -1.0, 1.0);
                    Box::new(|g, v| {
                        let t = g.transpose(v["a"], vec![2, 0, 1])?;
                        project(g, t)
                    })
                }
                K::Concat => {
                    put("a", &[2, 3], -1.0, 1.0);
                    put("b", &[2, 2], -1.0, 1.0);
                    Box::new(|g, v| {
                        let c = g.concat(&[v["a"], v["b"]], 1)?;
                        project(g, c)
                    })
                }
                K::Slice => {
                    put("a", &[4, 3], -1.0, 1.0);
                    Box::new(|g, v| {
                        let s = g.slice(v["a"], 0, 1, 3)?;
                        let t = g.slice(v["a"], 1, 2, 3)?;
                        let (ps, pt) = (project(g, s)?, project(g, t)?);
                        g.add(ps, pt)
                    })
                }
                K::GatherRows => {
                    put("a", &[4, 3], -1.0, 1.0);
                    Box::new(|g, v| {
                        let r = g.gather_rows(v["a"], vec![3, 1, 1, 0])?;
                        project(g, r)
                    })
                }
                K::ScatterRows => {
                    put("base", &[4, 3], -1.0, 1.0);
                    put("src", &[2, 3], -1.0, 1.0);
                    Box::new(|g, v| {
                        let r = g.scatter_rows(v["base"], v["src"], vec![2, 0])?;
                        project(g, r)
                    })
                }
                K::Mean | K::Sum => {
                    put("a", &[3, 4], -1.0, 1.0);
                    Box::new(move |g, v| {
                        let a = v["a"];
                        let (r0, r1, all) = if kind == K::Mean {
                            (g.mean_axis(a, 0)?, g.mean_axis(a, 1)?, g.mean(a)?)
                        } else {
                            (g.sum_axis(a, 0)?, g.sum_axis(a, 1)?, g.sum(a)?)
                        };
                        let (p0, p1) = (project(g, r0)?, project(g, r1)?);
                        let s = g.add(p0, p1)?;
                        g.add(s, all)
                    })
                }
                K::Power => {
                    put("a", &[3, 4], 0.5, 1.5);
                    Box::new(|g, v| {
                        let x = g.power(v["a"], 2.5)?;
                        let y = g.power(v["a"], -1.0)?;
                        let (px, py) = (project(g, x)?, project(g, y)?);
                        g.add(px, py)
                    })
                }
                K::Sqrt | K::Exp | K::Gelu | K::Softmax => {
                    let (lo, hi) = if kind == K::Sqrt { (0.5, 2.0) } else { (-2.0, 2.0) };
                    put("a", &[3, 5], lo, hi);
                    Box::new(move |g, v| {
                        let a = v["a"];
                        let y = match kind {
                            K::Sqrt => g.sqrt(a)?,
                            K::Exp => g.exp(a)?,
                            K::Gelu => g.gelu(a)?,
                            _ => g.softmax(a)?,
                        };
                        project(g, y)
                    })
                }
                K::LayerNorm => {
                    put("x", &[3, 6], -2.0, 2.0);
                    put("scale", &[6], 0.5, 1.5);
                    put("shift", &[6], -0.5, 0.5);
                    Box::new(|g, v| {
                        let y = g.layer_norm(v["x"], v["scale"], v["shift"], 1e-6)?;
                        project(g, y)
                    })
                }
                K::Linear => {
                    put("x", &[3, 4], -1.0, 1.0);
                    put("w", &[4, 5], -1.0, 1.0);
                    put("b", &[5], -1.0, 1.0);
                    Box::new(|g, v| {
                        let y = g.linear(v["x"], v["w"], v["b"])?;
                        project(g, y)
                    })
                }
                K::Dft2 => {
                    put("re", &[2, 4, 4, 2], -1.0, 1.0);
                    put("im", &[2, 4, 4, 2], -1.0, 1.0);
                    Box::new(|g, v| {
                        let f = g.apply(Primitive::Dft2 { inverse: false }, &[v["re"], v["im"]])?;
                        let i = g.apply(Primitive::Dft2 { inverse: true }, &[v["re"], v["im"]])?;
                        let (pf, pi) = (project(g, f)?, project(g, i)?);
                        g.add(pf, pi)
                    })
                }
            };
            PrimitiveCase { kind, params: p, build }
        })
        .collect()
}
