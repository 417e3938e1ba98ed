//! Reverse-mode automatic differentiation over a recorded computation graph.
//!
//! A [`Graph`] owns every intermediate value. Leaves are either named
//! parameters (gradients are reported for them) or constants. Each call to
//! [`Graph::apply`] runs one primitive eagerly and appends a node; nodes are
//! therefore topologically ordered by construction. [`Graph::backward`]
//! walks the record in reverse, accumulating vector-Jacobian products.
//!
//! Broadcasting is never implicit, except that a single-element operand of
//! `add`/`sub`/`mul` acts as a scalar.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fourier;
use crate::tensor::{numel, strides, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-6;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attribute-free identifier of a primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Matmul,
    Reshape,
    Transpose,
    Concat,
    Slice,
    GatherRows,
    ScatterRows,
    Mean,
    Sum,
    Power,
    Sqrt,
    Exp,
    Gelu,
    Softmax,
    LayerNorm,
    Linear,
    Dft2,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 20] = [
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::Mul,
        PrimitiveKind::Matmul,
        PrimitiveKind::Reshape,
        PrimitiveKind::Transpose,
        PrimitiveKind::Concat,
        PrimitiveKind::Slice,
        PrimitiveKind::GatherRows,
        PrimitiveKind::ScatterRows,
        PrimitiveKind::Mean,
        PrimitiveKind::Sum,
        PrimitiveKind::Power,
        PrimitiveKind::Sqrt,
        PrimitiveKind::Exp,
        PrimitiveKind::Gelu,
        PrimitiveKind::Softmax,
        PrimitiveKind::LayerNorm,
        PrimitiveKind::Linear,
        PrimitiveKind::Dft2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Matmul => "matmul",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Transpose => "transpose",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Slice => "slice",
            PrimitiveKind::GatherRows => "gather_rows",
            PrimitiveKind::ScatterRows => "scatter_rows",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Power => "power",
            PrimitiveKind::Sqrt => "sqrt",
            PrimitiveKind::Exp => "exp",
            PrimitiveKind::Gelu => "gelu",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::LayerNorm => "layer_norm",
            PrimitiveKind::Linear => "linear",
            PrimitiveKind::Dft2 => "dft2",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

/// A primitive together with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    Matmul,
    Reshape { shape: Vec<usize> },
    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    Transpose { perm: Vec<usize> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Rows along axis 0.
    GatherRows { indices: Rc<[usize]> },
    /// `base` with rows `indices` replaced by the rows of `src` (indices distinct).
    ScatterRows { indices: Rc<[usize]> },
    /// `None` reduces everything to shape `[1]`.
    Mean { axis: Option<usize> },
    Sum { axis: Option<usize> },
    Power { exponent: f64 },
    Sqrt,
    Exp,
    /// Exact (erf) GELU.
    Gelu,
    /// Over the last axis.
    Softmax,
    /// Over the last axis; inputs `x, scale, shift`.
    LayerNorm { eps: f64 },
    /// `x·W + b` over the last axis of `x`; `W: [in, out]`, `b: [out]`.
    Linear,
    /// 2D transform of `(re, im)` over axes `(-3, -2)`; output stacks `[re, im]` on a new axis 0.
    Dft2 { inverse: bool },
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Add => PrimitiveKind::Add,
            Primitive::Sub => PrimitiveKind::Sub,
            Primitive::Mul => PrimitiveKind::Mul,
            Primitive::Matmul => PrimitiveKind::Matmul,
            Primitive::Reshape { .. } => PrimitiveKind::Reshape,
            Primitive::Transpose { .. } => PrimitiveKind::Transpose,
            Primitive::Concat { .. } => PrimitiveKind::Concat,
            Primitive::Slice { .. } => PrimitiveKind::Slice,
            Primitive::GatherRows { .. } => PrimitiveKind::GatherRows,
            Primitive::ScatterRows { .. } => PrimitiveKind::ScatterRows,
            Primitive::Mean { .. } => PrimitiveKind::Mean,
            Primitive::Sum { .. } => PrimitiveKind::Sum,
            Primitive::Power { .. } => PrimitiveKind::Power,
            Primitive::Sqrt => PrimitiveKind::Sqrt,
            Primitive::Exp => PrimitiveKind::Exp,
            Primitive::Gelu => PrimitiveKind::Gelu,
            Primitive::Softmax => PrimitiveKind::Softmax,
            Primitive::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Primitive::Linear => PrimitiveKind::Linear,
            Primitive::Dft2 { .. } => PrimitiveKind::Dft2,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Matmul
            | Primitive::ScatterRows { .. }
            | Primitive::Dft2 { .. } => 2,
            Primitive::LayerNorm { .. } | Primitive::Linear => 3,
            Primitive::Concat { .. } => usize::MAX,
            _ => 1,
        }
    }
}

/// Per-node context kept for the backward pass.
#[derive(Clone, Debug)]
enum Saved {
    None,
    /// Normalized input and reciprocal standard deviation per row.
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
}

#[derive(Clone, Debug)]
struct Node {
    op: Option<Primitive>,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// The computation record: nodes in execution order plus the parameter-leaf map.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, Var>,
    macs: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a named leaf that requires gradients.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push_leaf(value, true);
        self.leaves.insert(name.into(), v);
        v
    }

    /// Registers a constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: None, inputs: Vec::new(), value, requires_grad, saved: Saved::None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub fn leaves(&self) -> &BTreeMap<String, Var> {
        &self.leaves
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of all `matmul`/`linear` nodes recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Runs `prim` on `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = prim.arity();
        if (arity == usize::MAX && inputs.is_empty()) || (arity != usize::MAX && inputs.len() != arity) {
            return Err(Error::invalid(format!("{} takes {} inputs, got {}", prim.kind(), arity, inputs.len())));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, saved, macs) = forward(&prim, &values, requires_grad)?;
        self.macs += macs;
        self.nodes.push(Node { op: Some(prim), inputs: inputs.to_vec(), value, requires_grad, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let c = self.constant(Tensor::scalar(factor));
        self.mul(a, c)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape: shape.into() }, &[a])
    }

    pub fn transpose(&mut self, a: Var, perm: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Primitive::Transpose { perm: perm.into() }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, end }, &[a])
    }

    /// Index `i` of axis 0 with that axis dropped.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let s = self.slice(a, 0, i, i + 1)?;
        let shape = self.shape(a)[1..].to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        self.reshape(s, shape)
    }

    pub fn gather_rows(&mut self, a: Var, indices: impl Into<Rc<[usize]>>) -> Result<Var> {
        self.apply(Primitive::GatherRows { indices: indices.into() }, &[a])
    }

    pub fn scatter_rows(&mut self, base: Var, src: Var, indices: impl Into<Rc<[usize]>>) -> Result<Var> {
        self.apply(Primitive::ScatterRows { indices: indices.into() }, &[base, src])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean { axis: None }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Mean { axis: Some(axis) }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum { axis: None }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis: Some(axis) }, &[a])
    }

    pub fn power(&mut self, a: Var, exponent: f64) -> Result<Var> {
        self.apply(Primitive::Power { exponent }, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x, scale, shift])
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::Linear, &[x, weight, bias])
    }

    /// Gradients of `loss` with respect to every named parameter leaf.
    /// Parameters that do not influence `loss` get zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let grads = self.propagate(loss, false)?;
        Ok(self
            .leaves
            .iter()
            .map(|(name, v)| {
                let g = grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec()));
                (name.clone(), g)
            })
            .collect())
    }

    /// Gradient of `loss` with respect to every node (None where unreachable).
    pub fn backward_nodes(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        self.propagate(loss, true)
    }

    /// Reverse sweep from `loss`. Interior gradients are dropped as soon as
    /// they have been pushed to their inputs unless `keep_interior` is set.
    fn propagate(&self, loss: Var, keep_interior: bool) -> Result<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let gin = vjp(op, &inputs, &node.value, &node.saved, &gout, &needs);
            for ((inp, g), need) in node.inputs.iter().zip(gin).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            if keep_interior {
                grads[idx] = Some(gout);
            }
        }
        Ok(grads)
    }

    /// Recomputes every non-leaf node from its recorded inputs and reports
    /// whether all outputs match the stored values bitwise.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            let Some(op) = &node.op else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let (value, _, _) = forward(op, &inputs, false)?;
            let same = value.shape() == node.value.shape()
                && value.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

// ---------------------------------------------------------------------------
// forward kernels

fn forward(prim: &Primitive, x: &[&Tensor], keep: bool) -> Result<(Tensor, Saved, u64)> {
    let none = |t: Tensor| Ok((t, Saved::None, 0));
    match prim {
        Primitive::Add => none(elementwise2("add", x[0], x[1], |a, b| a + b)?),
        Primitive::Sub => none(elementwise2("sub", x[0], x[1], |a, b| a - b)?),
        Primitive::Mul => none(elementwise2("mul", x[0], x[1], |a, b| a * b)?),
        Primitive::Matmul => {
            let (out, macs) = matmul_forward(x[0], x[1])?;
            Ok((out, Saved::None, macs))
        }
        Primitive::Reshape { shape } => {
            if numel(shape) != x[0].len() || shape.contains(&0) || shape.is_empty() {
                return Err(Error::shape("reshape", &[x[0].shape(), shape]));
            }
            none(x[0].clone().reshape(shape.clone())?)
        }
        Primitive::Transpose { perm } => none(permute(x[0], perm)?),
        Primitive::Concat { axis } => none(concat(x, *axis)?),
        Primitive::Slice { axis, start, end } => none(slice(x[0], *axis, *start, *end)?),
        Primitive::GatherRows { indices } => none(gather_rows(x[0], indices)?),
        Primitive::ScatterRows { indices } => none(scatter_rows(x[0], x[1], indices)?),
        Primitive::Mean { axis } => {
            let n = match axis {
                None => x[0].len(),
                Some(a) => *x[0].shape().get(*a).ok_or_else(|| Error::shape("mean", &[x[0].shape()]))?,
            } as f64;
            let s = reduce_sum(x[0], *axis)?;
            none(s.map(|v| v / n))
        }
        Primitive::Sum { axis } => none(reduce_sum(x[0], *axis)?),
        Primitive::Power { exponent } => {
            let p = *exponent;
            none(x[0].map(|v| if p == 2.0 { v * v } else { v.powf(p) }))
        }
        Primitive::Sqrt => none(x[0].map(f64::sqrt)),
        Primitive::Exp => none(x[0].map(f64::exp)),
        Primitive::Gelu => none(x[0].map(gelu)),
        Primitive::Softmax => none(softmax(x[0])),
        Primitive::LayerNorm { eps } => layer_norm(x[0], x[1], x[2], *eps, keep),
        Primitive::Linear => {
            let (out, macs) = linear_forward(x[0], x[1], x[2])?;
            Ok((out, Saved::None, macs))
        }
        Primitive::Dft2 { inverse } => none(dft2_forward(x[0], x[1], *inverse)?),
    }
}

fn elementwise2(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.len() == 1 {
        let s = b.data()[0];
        return Ok(a.map(|x| f(x, s)));
    }
    if a.len() == 1 {
        let s = a.data()[0];
        return Ok(b.map(|y| f(s, y)));
    }
    Err(Error::shape(op, &[a.shape(), b.shape()]))
}

/// `C = alpha·op(A)·op(B) + C`, with transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover m*k, k*n and m*n elements for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatmulDims> {
    let (sa, sb) = (a.shape(), b.shape());
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[0] => Ok(MatmulDims { batch: 1, m: sa[0], k: sa[1], n: sb[1] }),
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {
            Ok(MatmulDims { batch: sa[0], m: sa[1], k: sa[2], n: sb[2] })
        }
        _ => Err(Error::shape("matmul", &[sa, sb])),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    let d = matmul_dims(a, b)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for i in 0..d.batch {
        gemm(
            d.m,
            d.k,
            d.n,
            &a.data()[i * d.m * d.k..],
            false,
            &b.data()[i * d.k * d.n..],
            false,
            &mut out[i * d.m * d.n..],
        );
    }
    let shape = if a.rank() == 2 { vec![d.m, d.n] } else { vec![d.batch, d.m, d.n] };
    Ok((Tensor::new(shape, out)?, (d.batch * d.m * d.k * d.n) as u64))
}

fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, u64)> {
    let (sx, sw, sb) = (x.shape(), w.shape(), b.shape());
    let din = *sx.last().unwrap();
    if sw.len() != 2 || sw[0] != din || sb != [sw[1]] {
        return Err(Error::shape("linear", &[sx, sw, sb]));
    }
    let dout = sw[1];
    let rows = x.len() / din;
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(rows, din, dout, x.data(), false, w.data(), false, &mut out);
    let mut shape = sx.to_vec();
    *shape.last_mut().unwrap() = dout;
    Ok((Tensor::new(shape, out)?, (rows * din * dout) as u64))
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("bad permutation {perm:?} for shape {:?}", x.shape())));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; r];
    let src = x.data();
    let last = r - 1;
    let (n_last, s_last) = (out_shape[last], src_strides[last]);
    loop {
        let base: usize = idx[..last].iter().zip(&src_strides[..last]).map(|(i, s)| i * s).sum();
        if s_last == 1 {
            out.extend_from_slice(&src[base..base + n_last]);
        } else {
            out.extend((0..n_last).map(|j| src[base + j * s_last]));
        }
        // odometer over all axes but the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::new(out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    let shapes: Vec<&[usize]> = parts.iter().map(|t| t.shape()).collect();
    if axis >= first.len() {
        return Err(Error::shape("concat", &shapes));
    }
    for s in &shapes {
        if s.len() != first.len() || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(Error::shape("concat", &shapes));
        }
    }
    let total: usize = shapes.iter().map(|s| s[axis]).sum();
    let (outer, _, inner) = outer_inner(first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    if axis >= x.rank() || start >= end || end > x.shape()[axis] {
        return Err(Error::invalid(format!(
            "slice [{start}, {end}) on axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = outer_inner(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Tensor::new(shape, out)
}

fn row_len(x: &Tensor) -> usize {
    x.shape()[1..].iter().product()
}

fn gather_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let rows = x.shape()[0];
    if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
        return Err(Error::invalid(format!("gather_rows indices out of range for {} rows", rows)));
    }
    let rl = row_len(x);
    let mut out = Vec::with_capacity(indices.len() * rl);
    for &i in indices {
        out.extend_from_slice(&x.data()[i * rl..(i + 1) * rl]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, out)
}

fn scatter_rows(base: &Tensor, src: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let rows = base.shape()[0];
    if base.shape()[1..] != src.shape()[1..] || src.shape()[0] != indices.len() {
        return Err(Error::shape("scatter_rows", &[base.shape(), src.shape()]));
    }
    let mut seen = vec![false; rows];
    for &i in indices {
        if i >= rows || std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid(format!("scatter_rows index {i} out of range or repeated")));
        }
    }
    let rl = row_len(base);
    let mut out = base.clone();
    for (k, &i) in indices.iter().enumerate() {
        out.data_mut()[i * rl..(i + 1) * rl].copy_from_slice(&src.data()[k * rl..(k + 1) * rl]);
    }
    Ok(out)
}

fn reduce_sum(x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(x.data().iter().sum())),
        Some(a) if a < x.rank() => {
            let (outer, len, inner) = outer_inner(x.shape(), a);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                    out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            let mut shape: Vec<usize> = x.shape().to_vec();
            shape.remove(a);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(shape, out)
        }
        Some(_) => Err(Error::shape("sum", &[x.shape()])),
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = *x.shape().last().unwrap();
    for row in out.data_mut().chunks_exact_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64, keep: bool) -> Result<(Tensor, Saved, u64)> {
    let d = *x.shape().last().unwrap();
    if scale.shape() != [d] || shift.shape() != [d] {
        return Err(Error::shape("layer_norm", &[x.shape(), scale.shape(), shift.shape()]));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = if keep { vec![0.0; x.len()] } else { Vec::new() };
    let mut rstds = Vec::with_capacity(if keep { rows } else { 0 });
    for (r, row) in x.data().chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let xh = (row[j] - mean) * rstd;
            out[r * d + j] = xh * scale.data()[j] + shift.data()[j];
            if keep {
                xhat[r * d + j] = xh;
            }
        }
        if keep {
            rstds.push(rstd);
        }
    }
    let saved = if keep { Saved::LayerNorm { xhat, rstd: rstds } } else { Saved::None };
    Ok((Tensor::new(x.shape().to_vec(), out)?, saved, 0))
}

fn dft2_forward(re: &Tensor, im: &Tensor, inverse: bool) -> Result<Tensor> {
    if re.shape() != im.shape() || re.rank() < 3 {
        return Err(Error::shape("dft2", &[re.shape(), im.shape()]));
    }
    let mut r = re.data().to_vec();
    let mut i = im.data().to_vec();
    fourier::transform(re.shape(), &mut r, &mut i, inverse);
    r.extend_from_slice(&i);
    let mut shape = vec![2];
    shape.extend_from_slice(re.shape());
    Tensor::new(shape, r)
}

// ---------------------------------------------------------------------------
// vector-Jacobian products

fn vjp(
    prim: &Primitive,
    x: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    match prim {
        Primitive::Add => vec![Some(unbroadcast(g, x[0])), Some(unbroadcast(g, x[1]))],
        Primitive::Sub => vec![Some(unbroadcast(g, x[0])), Some(unbroadcast(&g.map(|v| -v), x[1]))],
        Primitive::Mul => {
            let ga = needs[0].then(|| unbroadcast(&broadcast_mul(g, x[1]), x[0]));
            let gb = needs[1].then(|| unbroadcast(&broadcast_mul(g, x[0]), x[1]));
            vec![ga, gb]
        }
        Primitive::Matmul => {
            let d = matmul_dims(x[0], x[1]).expect("validated in forward");
            let mut ga = needs[0].then(|| vec![0.0; x[0].len()]);
            let mut gb = needs[1].then(|| vec![0.0; x[1].len()]);
            for i in 0..d.batch {
                let gs = &g.data()[i * d.m * d.n..];
                if let Some(ga) = ga.as_mut() {
                    gemm(d.m, d.n, d.k, gs, false, &x[1].data()[i * d.k * d.n..], true, &mut ga[i * d.m * d.k..]);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(d.k, d.m, d.n, &x[0].data()[i * d.m * d.k..], true, gs, false, &mut gb[i * d.k * d.n..]);
                }
            }
            vec![
                ga.map(|v| Tensor::new(x[0].shape().to_vec(), v).unwrap()),
                gb.map(|v| Tensor::new(x[1].shape().to_vec(), v).unwrap()),
            ]
        }
        Primitive::Linear => {
            let din = x[1].shape()[0];
            let dout = x[1].shape()[1];
            let rows = x[0].len() / din;
            let gx = needs[0].then(|| {
                let mut v = vec![0.0; x[0].len()];
                gemm(rows, dout, din, g.data(), false, x[1].data(), true, &mut v);
                Tensor::new(x[0].shape().to_vec(), v).unwrap()
            });
            let gw = needs[1].then(|| {
                let mut v = vec![0.0; din * dout];
                gemm(din, rows, dout, x[0].data(), true, g.data(), false, &mut v);
                Tensor::new(vec![din, dout], v).unwrap()
            });
            let gb = needs[2].then(|| {
                let mut v = vec![0.0; dout];
                for row in g.data().chunks_exact(dout) {
                    v.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                Tensor::new(vec![dout], v).unwrap()
            });
            vec![gx, gw, gb]
        }
        Primitive::Reshape { .. } => vec![Some(g.clone().reshape(x[0].shape().to_vec()).unwrap())],
        Primitive::Transpose { perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute(g, &inv).unwrap())]
        }
        Primitive::Concat { axis } => {
            let mut start = 0;
            x.iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let len = t.shape()[*axis];
                    let piece = need.then(|| slice(g, *axis, start, start + len).unwrap());
                    start += len;
                    piece
                })
                .collect()
        }
        Primitive::Slice { axis, start, end } => {
            let (outer, len, inner) = outer_inner(x[0].shape(), *axis);
            let mut v = vec![0.0; x[0].len()];
            let w = (end - start) * inner;
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                v[dst..dst + w].copy_from_slice(&g.data()[o * w..(o + 1) * w]);
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), v).unwrap())]
        }
        Primitive::GatherRows { indices } => {
            let rl = row_len(x[0]);
            let mut v = vec![0.0; x[0].len()];
            for (k, &i) in indices.iter().enumerate() {
                v[i * rl..(i + 1) * rl].iter_mut().zip(&g.data()[k * rl..(k + 1) * rl]).for_each(|(a, b)| *a += b);
            }
            vec![Some(Tensor::new(x[0].shape().to_vec(), v).unwrap())]
        }
        Primitive::ScatterRows { indices } => {
            let rl = row_len(x[0]);
            let mut gbase = g.clone();
            let mut gsrc = Vec::with_capacity(indices.len() * rl);
            for &i in indices.iter() {
                gsrc.extend_from_slice(&g.data()[i * rl..(i + 1) * rl]);
                gbase.data_mut()[i * rl..(i + 1) * rl].iter_mut().for_each(|v| *v = 0.0);
            }
            vec![Some(gbase), Some(Tensor::new(x[1].shape().to_vec(), gsrc).unwrap())]
        }
        Primitive::Sum { axis } | Primitive::Mean { axis } => {
            let n = match axis {
                None => x[0].len(),
                Some(a) => x[0].shape()[*a],
            } as f64;
            let factor = if matches!(prim, Primitive::Mean { .. }) { 1.0 / n } else { 1.0 };
            let v = match axis {
                None => vec![g.data()[0] * factor; x[0].len()],
                Some(a) => {
                    let (outer, len, inner) = outer_inner(x[0].shape(), *a);
                    let mut v = Vec::with_capacity(x[0].len());
                    for o in 0..outer {
                        for _ in 0..len {
                            v.extend(g.data()[o * inner..(o + 1) * inner].iter().map(|t| t * factor));
                        }
                    }
                    v
                }
            };
            vec![Some(Tensor::new(x[0].shape().to_vec(), v).unwrap())]
        }
        Primitive::Power { exponent } => {
            let p = *exponent;
            vec![Some(zip_map(g, x[0], |gv, xv| gv * p * if p == 2.0 { xv } else { xv.powf(p - 1.0) }))]
        }
        Primitive::Sqrt => vec![Some(zip_map(g, out, |gv, y| gv * 0.5 / y))],
        Primitive::Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
        Primitive::Gelu => vec![Some(zip_map(g, x[0], |gv, xv| gv * gelu_grad(xv)))],
        Primitive::Softmax => {
            let d = *out.shape().last().unwrap();
            let mut v = vec![0.0; out.len()];
            for ((dst, y), gy) in v.chunks_exact_mut(d).zip(out.data().chunks_exact(d)).zip(g.data().chunks_exact(d)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    dst[j] = y[j] * (gy[j] - dot);
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), v).unwrap())]
        }
        Primitive::LayerNorm { .. } => {
            let Saved::LayerNorm { xhat, rstd } = saved else {
                unreachable!("layer_norm records its context whenever gradients are required")
            };
            let d = *x[0].shape().last().unwrap();
            let scale = x[1].data();
            let mut gx = vec![0.0; x[0].len()];
            let mut gscale = vec![0.0; d];
            let mut gshift = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for (r, gy) in g.data().chunks_exact(d).enumerate() {
                let xh = &xhat[r * d..(r + 1) * d];
                let (mut m1, mut m2) = (0.0, 0.0);
                for j in 0..d {
                    dxhat[j] = gy[j] * scale[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xh[j];
                    gscale[j] += gy[j] * xh[j];
                    gshift[j] += gy[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                }
            }
            vec![
                Some(Tensor::new(x[0].shape().to_vec(), gx).unwrap()),
                Some(Tensor::new(vec![d], gscale).unwrap()),
                Some(Tensor::new(vec![d], gshift).unwrap()),
            ]
        }
        Primitive::Dft2 { inverse } => {
            // The adjoint of the unnormalized forward transform is HW times the
            // normalized inverse; the adjoint of the inverse is the forward / HW.
            let shape = x[0].shape();
            let r = shape.len();
            let hw = (shape[r - 3] * shape[r - 2]) as f64;
            let half = x[0].len();
            let mut gr = g.data()[..half].to_vec();
            let mut gi = g.data()[half..].to_vec();
            fourier::transform(shape, &mut gr, &mut gi, !inverse);
            let factor = if *inverse { 1.0 / hw } else { hw };
            gr.iter_mut().chain(gi.iter_mut()).for_each(|v| *v *= factor);
            vec![
                Some(Tensor::new(shape.to_vec(), gr).unwrap()),
                Some(Tensor::new(shape.to_vec(), gi).unwrap()),
            ]
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn broadcast_mul(g: &Tensor, other: &Tensor) -> Tensor {
    if other.len() == 1 {
        let s = other.data()[0];
        g.map(|v| v * s)
    } else if g.len() == 1 {
        let s = g.data()[0];
        other.map(|v| v * s)
    } else {
        zip_map(g, other, |a, b| a * b)
    }
}

/// Sums a gradient down to a scalar operand's shape.
fn unbroadcast(g: &Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g.clone()
    } else {
        Tensor::new(target.shape().to_vec(), vec![g.sum()]).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_mul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(3.0));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).item(), 6.0);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![5], 3.25));
        let s = g.constant(Tensor::ones(vec![5]));
        let b = g.constant(Tensor::zeros(vec![5]));
        let y = g.layer_norm(x, s, b, DEFAULT_LN_EPS).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::full(vec![3], 2.0));
        let _unused = g.param("w", Tensor::ones(vec![2, 2]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["w"], Tensor::zeros(vec![2, 2]));
        assert_eq!(grads["x"], Tensor::ones(vec![3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::ones(vec![3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shape_errors_name_the_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(vec![2, 3]));
        let b = g.constant(Tensor::ones(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }), "{err}");
        let c = g.constant(Tensor::ones(vec![3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("conv2d".parse::<PrimitiveKind>(), Err(Error::UnknownPrimitive(_))));
        assert_eq!("layer-norm".parse::<PrimitiveKind>().unwrap(), PrimitiveKind::LayerNorm);
        for k in PrimitiveKind::ALL {
            assert_eq!(k.name().parse::<PrimitiveKind>().unwrap(), k);
        }
    }

    #[test]
    fn transpose_matches_index_definition() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| i as f64);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.at(&[c, a, b]), x.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn scatter_rejects_repeats() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::zeros(vec![4, 2]));
        let src = g.constant(Tensor::ones(vec![2, 2]));
        assert!(g.scatter_rows(base, src, vec![1, 1]).is_err());
        let y = g.scatter_rows(base, src, vec![3, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn replay_is_bitwise() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_fn(vec![3, 4], |i| (i as f64 * 0.3).sin()));
        let w = g.param("w", Tensor::from_fn(vec![4, 2], |i| (i as f64 * 0.7).cos()));
        let b = g.param("b", Tensor::zeros(vec![2]));
        let y = g.linear(x, w, b).unwrap();
        let y = g.gelu(y).unwrap();
        let y = g.softmax(y).unwrap();
        let _ = g.mean(y).unwrap();
        assert!(g.replay_matches().unwrap());
    }
}
