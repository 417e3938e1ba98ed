//! 2D discrete Fourier analysis over `H×W×C` grids (channels last).
//!
//! The forward transform carries no normalization; the inverse carries the
//! full `1/(HW)` factor. Channels (and any leading batch axes) are transformed
//! independently. Power-of-two axes use an iterative radix-2 FFT, any other
//! length falls back to direct summation along that axis.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Primitive, Var};
use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

/// Complex spectrum of an `H×W×C` grid, indexed `(u, v, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum2D {
    values: ComplexTensor,
    from_real: bool,
}

impl Spectrum2D {
    pub fn new(values: ComplexTensor) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(Error::invalid(format!("spectrum must be H×W×C, got {:?}", values.shape())));
        }
        Ok(Spectrum2D { values, from_real: false })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &ComplexTensor {
        &self.values
    }

    pub fn into_values(self) -> ComplexTensor {
        self.values
    }

    /// True when produced by [`dft2d`] from a real image, which implies
    /// conjugate symmetry `f(u,v) = conj(f(-u mod H, -v mod W))`.
    pub fn is_from_real(&self) -> bool {
        self.from_real
    }

    pub fn at(&self, u: usize, v: usize, c: usize) -> (f64, f64) {
        self.values.at(&[u, v, c])
    }
}

/// Forward 2D-DFT of a real `H×W×C` image.
pub fn dft2d(image: &Tensor) -> Result<Spectrum2D> {
    let shape = grid_shape(image.shape())?;
    let mut re = image.data().to_vec();
    let mut im = vec![0.0; re.len()];
    transform(&shape, &mut re, &mut im, false);
    let values = ComplexTensor::new(shape, re, im)?;
    Ok(Spectrum2D { values, from_real: true })
}

/// Forward 2D-DFT of a complex `H×W×C` grid.
pub fn dft2d_complex(grid: &ComplexTensor) -> Result<Spectrum2D> {
    let shape = grid_shape(grid.shape())?;
    let mut out = grid.clone();
    let (re, im) = out.parts_mut();
    transform(&shape, re, im, false);
    Ok(Spectrum2D { values: out, from_real: false })
}

/// Inverse 2D-DFT with `1/(HW)` normalization.
pub fn idft2d(spec: &Spectrum2D) -> Result<ComplexTensor> {
    let shape = grid_shape(spec.values.shape())?;
    let mut out = spec.values.clone();
    let (re, im) = out.parts_mut();
    transform(&shape, re, im, true);
    Ok(out)
}

/// Direct double-sum transform of an `H×W×C` grid, `O(H²W²)` per channel.
/// Used as a reference for the fast path.
pub fn naive_dft2d(grid: &ComplexTensor, inverse: bool) -> Result<ComplexTensor> {
    let shape = grid_shape(grid.shape())?;
    if shape.len() != 3 {
        return Err(Error::invalid("naive_dft2d expects an H×W×C grid"));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let sign = if inverse { 1.0 } else { -1.0 };
    let scale = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
    let mut out = ComplexTensor::zeros(shape.clone());
    for u in 0..h {
        for v in 0..w {
            for ch in 0..c {
                let (mut sr, mut si) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let turns = ((u * y) % h) as f64 / h as f64 + ((v * x) % w) as f64 / w as f64;
                        let (s, co) = (sign * std::f64::consts::TAU * turns).sin_cos();
                        let (a, b) = grid.at(&[y, x, ch]);
                        sr += a * co - b * s;
                        si += a * s + b * co;
                    }
                }
                let i = (u * w + v) * c + ch;
                out.re_mut()[i] = sr * scale;
                out.im_mut()[i] = si * scale;
            }
        }
    }
    Ok(out)
}

/// Amplitude `sqrt(R² + I²)` and full-quadrant phase `atan2(I, R)` in `(-π, π]`.
/// Exactly-zero components get phase 0.
pub fn amplitude_phase(spec: &Spectrum2D) -> (Tensor, Tensor) {
    let v = &spec.values;
    let shape = v.shape().to_vec();
    let (amp, phase): (Vec<f64>, Vec<f64>) =
        v.re().iter().zip(v.im()).map(|(&r, &i)| (r.hypot(i), phase_of(r, i))).unzip();
    (
        Tensor::new(shape.clone(), amp).expect("shape preserved"),
        Tensor::new(shape, phase).expect("shape preserved"),
    )
}

fn phase_of(re: f64, im: f64) -> f64 {
    if re == 0.0 && im == 0.0 {
        return 0.0;
    }
    let p = im.atan2(re);
    // atan2 returns -π for (-x, -0.0); fold onto the half-open range (-π, π].
    if p == -PI {
        PI
    } else {
        p
    }
}

/// Spectrum with every amplitude set to 1 and the phase of `spec` kept.
pub fn unit_amplitude(spec: &Spectrum2D) -> Spectrum2D {
    let (_, phase) = amplitude_phase(spec);
    let re = phase.data().iter().map(|p| p.cos()).collect();
    let im = phase.data().iter().map(|p| p.sin()).collect();
    let values = ComplexTensor::new(phase.shape().to_vec(), re, im).expect("shape preserved");
    Spectrum2D { values, from_real: spec.from_real }
}

/// Real part of the inverse transform of the unit-amplitude spectrum of `image`.
pub fn phase_only_image(image: &Tensor) -> Result<Tensor> {
    let spec = dft2d(image)?;
    Ok(idft2d(&unit_amplitude(&spec))?.real_part())
}

/// Cyclic shift of the first two axes by `(⌊H/2⌋, ⌊W/2⌋)`, moving DC to the centre.
/// Accepts `H×W` or `H×W×C`.
pub fn fftshift(grid: &Tensor) -> Tensor {
    let s = grid.shape();
    assert!(s.len() == 2 || s.len() == 3, "fftshift expects H×W or H×W×C, got {s:?}");
    let (h, w) = (s[0], s[1]);
    let c = if s.len() == 3 { s[2] } else { 1 };
    let (dh, dw) = (h / 2, w / 2);
    let mut out = vec![0.0; grid.len()];
    let src = grid.data();
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = ((y + dh) % h, (x + dw) % w);
            let from = (y * w + x) * c;
            let to = (ty * w + tx) * c;
            out[to..to + c].copy_from_slice(&src[from..from + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

/// Differentiable forward transform of a real grid `[..., H, W, C]`; returns `(re, im)`.
pub fn dft2d_real_var(g: &mut Graph, image: Var) -> Result<(Var, Var)> {
    let zeros = g.constant(Tensor::zeros(g.shape(image).to_vec()));
    dft2d_var(g, image, zeros)
}

/// Differentiable forward transform of a complex grid given as `(re, im)` planes.
pub fn dft2d_var(g: &mut Graph, re: Var, im: Var) -> Result<(Var, Var)> {
    spectral(g, re, im, false)
}

/// Differentiable inverse transform (with `1/(HW)`); returns `(re, im)`.
pub fn idft2d_var(g: &mut Graph, re: Var, im: Var) -> Result<(Var, Var)> {
    spectral(g, re, im, true)
}

fn spectral(g: &mut Graph, re: Var, im: Var, inverse: bool) -> Result<(Var, Var)> {
    let packed = g.apply(Primitive::Dft2 { inverse }, &[re, im])?;
    let out_re = g.select(packed, 0)?;
    let out_im = g.select(packed, 1)?;
    Ok((out_re, out_im))
}

/// Validates an `[..., H, W, C]` grid shape (rank ≥ 3).
fn grid_shape(shape: &[usize]) -> Result<Vec<usize>> {
    if shape.len() < 3 || shape.contains(&0) {
        return Err(Error::invalid(format!("2D transform needs [..., H, W, C] with positive dims, got {shape:?}")));
    }
    Ok(shape.to_vec())
}

/// In-place 2D transform over axes `(-3, -2)` of a `[..., H, W, C]` array.
pub(crate) fn transform(shape: &[usize], re: &mut [f64], im: &mut [f64], inverse: bool) {
    let r = shape.len();
    let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    let lead: usize = shape[..r - 3].iter().product();
    let plane = h * w * c;
    let row_plan = Plan1d::new(w, inverse);
    let col_plan = Plan1d::new(h, inverse);
    let mut buf_re = vec![0.0; h.max(w)];
    let mut buf_im = vec![0.0; h.max(w)];
    for b in 0..lead {
        let base = b * plane;
        // along W: stride C
        for y in 0..h {
            for ch in 0..c {
                let start = base + y * w * c + ch;
                strided_apply(&row_plan, re, im, start, c, w, &mut buf_re, &mut buf_im);
            }
        }
        // along H: stride W*C
        for x in 0..w {
            for ch in 0..c {
                let start = base + x * c + ch;
                strided_apply(&col_plan, re, im, start, w * c, h, &mut buf_re, &mut buf_im);
            }
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        re.iter_mut().for_each(|x| *x *= scale);
        im.iter_mut().for_each(|x| *x *= scale);
    }
}

#[allow(clippy::too_many_arguments)]
fn strided_apply(
    plan: &Plan1d,
    re: &mut [f64],
    im: &mut [f64],
    start: usize,
    stride: usize,
    n: usize,
    buf_re: &mut [f64],
    buf_im: &mut [f64],
) {
    for k in 0..n {
        buf_re[k] = re[start + k * stride];
        buf_im[k] = im[start + k * stride];
    }
    plan.run(&mut buf_re[..n], &mut buf_im[..n]);
    for k in 0..n {
        re[start + k * stride] = buf_re[k];
        im[start + k * stride] = buf_im[k];
    }
}

/// Unnormalized 1D transform of one length; `sign` is −1 forward, +1 inverse.
struct Plan1d {
    n: usize,
    sign: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
    radix2: bool,
    scratch: std::cell::RefCell<(Vec<f64>, Vec<f64>)>,
}

impl Plan1d {
    fn new(n: usize, inverse: bool) -> Self {
        let sign = if inverse { 1.0 } else { -1.0 };
        let cos = (0..n).map(|k| (2.0 * PI * k as f64 / n as f64).cos()).collect();
        let sin = (0..n).map(|k| (2.0 * PI * k as f64 / n as f64).sin()).collect();
        Plan1d {
            n,
            sign,
            cos,
            sin,
            radix2: n.is_power_of_two(),
            scratch: std::cell::RefCell::new((vec![0.0; n], vec![0.0; n])),
        }
    }

    fn run(&self, re: &mut [f64], im: &mut [f64]) {
        if self.n == 1 {
            return;
        }
        if self.radix2 {
            self.radix2(re, im);
        } else {
            self.direct(re, im);
        }
    }

    /// Iterative Cooley-Tukey, bit-reversed input order.
    fn radix2(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * step];
                    let wi = self.sign * self.sin[k * step];
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }

    /// O(n²) direct summation with exact twiddle indices `(k·j) mod n`.
    fn direct(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        let mut scratch = self.scratch.borrow_mut();
        let (out_re, out_im) = &mut *scratch;
        for k in 0..n {
            let (mut sr, mut si) = (0.0, 0.0);
            for j in 0..n {
                let t = (k * j) % n;
                let wr = self.cos[t];
                let wi = self.sign * self.sin[t];
                sr += re[j] * wr - im[j] * wi;
                si += re[j] * wi + im[j] * wr;
            }
            out_re[k] = sr;
            out_im[k] = si;
        }
        re.copy_from_slice(out_re);
        im.copy_from_slice(out_im);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, c: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn constant_image_is_dc_only() {
        let s = dft2d(&img(2, 2, 1, vec![1.0; 4])).unwrap();
        assert_eq!(s.at(0, 0, 0), (4.0, 0.0));
        for (u, v) in [(0, 1), (1, 0), (1, 1)] {
            let (r, i) = s.at(u, v, 0);
            assert!(r.abs() < 1e-15 && i.abs() < 1e-15);
        }
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let mut d = vec![0.0; 16];
        d[0] = 1.0;
        let s = dft2d(&img(4, 4, 1, d)).unwrap();
        for u in 0..4 {
            for v in 0..4 {
                let (r, i) = s.at(u, v, 0);
                assert!((r - 1.0).abs() < 1e-15 && i.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn inverse_of_dc() {
        let mut re = vec![0.0; 4];
        re[0] = 4.0;
        let spec = Spectrum2D::new(ComplexTensor::new(vec![2, 2, 1], re, vec![0.0; 4]).unwrap()).unwrap();
        let out = idft2d(&spec).unwrap();
        assert!(out.re().iter().all(|&x| (x - 1.0).abs() < 1e-15));
        assert!(out.im().iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn non_power_of_two_uses_direct_path() {
        let data: Vec<f64> = (0..3 * 5 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = img(3, 5, 2, data);
        let back = idft2d(&dft2d(&x).unwrap()).unwrap();
        assert!(back.real_part().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn amplitude_phase_quadrants() {
        let spec = |r: f64, i: f64| {
            Spectrum2D::new(ComplexTensor::new(vec![1, 1, 1], vec![r], vec![i]).unwrap()).unwrap()
        };
        let (a, p) = amplitude_phase(&spec(3.0, 4.0));
        assert!((a.item() - 5.0).abs() < 1e-15);
        assert!((p.item() - 0.927_295_218_001_612_2).abs() < 1e-12);
        let (a, p) = amplitude_phase(&spec(-1.0, 0.0));
        assert_eq!((a.item(), p.item()), (1.0, PI));
        let (_, p) = amplitude_phase(&spec(-1.0, -0.0));
        assert_eq!(p.item(), PI);
        let (a, p) = amplitude_phase(&spec(0.0, 1.0));
        assert_eq!((a.item(), p.item()), (1.0, PI / 2.0));
        let (a, p) = amplitude_phase(&spec(0.0, 0.0));
        assert_eq!((a.item(), p.item()), (0.0, 0.0));
    }

    #[test]
    fn phase_only_of_constant_is_delta() {
        let out = phase_only_image(&img(4, 4, 1, vec![0.7; 16])).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let want = if i == 0 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-12, "{i}: {v}");
        }
    }

    #[test]
    fn fftshift_examples() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(fftshift(&t).data(), &[4.0, 3.0, 2.0, 1.0]);

        let x = Tensor::from_fn(vec![4, 4], |i| i as f64);
        assert_eq!(fftshift(&fftshift(&x)), x);

        let mut d = Tensor::zeros(vec![8, 8]);
        d.set(&[0, 0], 1.0);
        let s = fftshift(&d);
        assert_eq!(s.at(&[4, 4]), 1.0);
        assert_eq!(s.sum(), 1.0);
    }

    #[test]
    fn rejects_non_grid() {
        assert!(dft2d(&Tensor::zeros(vec![4, 4])).is_err());
    }
}
