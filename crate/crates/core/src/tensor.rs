//! Dense row-major real and complex tensors.

use std::sync::Arc;

use crate::error::{Error, Result};

/// A dense, row-major `f64` array. Every dimension is at least 1 and the
/// product of the shape equals the data length. Clones share storage until
/// one side is mutated.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("tensor dimensions must be >= 1");
        let n = numel(&shape);
        Tensor { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("tensor dimensions must be >= 1");
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &[&self.shape, &shape]));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.shape, index);
        self.data_mut()[i] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Rows of a tensor viewed as `[len / last, last]`.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        let last = *self.shape.last().unwrap();
        self.data.chunks_exact(last)
    }
}

/// Split-storage complex array: separate real and imaginary planes sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: impl Into<Vec<usize>>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let n = numel(&shape);
        if re.len() != n || im.len() != n {
            return Err(Error::invalid(format!(
                "complex shape {shape:?} needs {n} elements, got re={} im={}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexTensor { shape, re, im })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("tensor dimensions must be >= 1");
        let n = numel(&shape);
        ComplexTensor { shape, re: vec![0.0; n], im: vec![0.0; n] }
    }

    pub fn from_parts(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::shape("complex", &[re.shape(), im.shape()]));
        }
        let shape = re.shape().to_vec();
        Ok(ComplexTensor { shape, re: re.into_data(), im: im.into_data() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.re, &mut self.im)
    }

    pub fn at(&self, index: &[usize]) -> (f64, f64) {
        let i = flat_index(&self.shape, index);
        (self.re[i], self.im[i])
    }

    pub fn real_part(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.re.clone()) }
    }

    pub fn imag_part(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.im.clone()) }
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (
            Tensor { shape: self.shape.clone(), data: Arc::new(self.re) },
            Tensor { shape: self.shape, data: Arc::new(self.im) },
        )
    }

    pub fn max_abs_diff(&self, other: &ComplexTensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        let dr = self.re.iter().zip(&other.re).map(|(a, b)| (a - b).abs());
        let di = self.im.iter().zip(&other.im).map(|(a, b)| (a - b).abs());
        dr.chain(di).fold(0.0, f64::max)
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("dimensions must be >= 1, got {shape:?}")));
    }
    Ok(())
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch for shape {shape:?}");
    index.iter().zip(shape).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {index:?} out of bounds for shape {shape:?}");
        acc * d + i
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(Vec::<usize>::new(), vec![]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_fn(vec![2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
    }

    #[test]
    fn complex_parts_roundtrip() {
        let c = ComplexTensor::new(vec![2], vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let (re, im) = c.clone().into_parts();
        assert_eq!(ComplexTensor::from_parts(re, im).unwrap(), c);
    }
}
