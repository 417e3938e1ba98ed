use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// A double-centered Gram matrix `HKH` with `H = I − (1/m)·11ᵀ`.
#[derive(Clone, Debug)]
pub struct CenteredGram(DMatrix<f64>);

impl CenteredGram {
    /// Centers a symmetric `m×m` kernel in `O(m²)` using row, column and grand means.
    pub fn from_kernel(k: &DMatrix<f64>) -> Result<Self> {
        let m = k.nrows();
        if m < 2 || k.ncols() != m {
            return Err(Error::invalid(format!("kernel must be square with m >= 2, got {}×{}", k.nrows(), k.ncols())));
        }
        let row_means: Vec<f64> = (0..m).map(|i| k.row(i).mean()).collect();
        let col_means: Vec<f64> = (0..m).map(|j| k.column(j).mean()).collect();
        let grand = row_means.iter().sum::<f64>() / m as f64;
        Ok(CenteredGram(DMatrix::from_fn(m, m, |i, j| k[(i, j)] - row_means[i] - col_means[j] + grand)))
    }

    /// Linear kernel `XXᵀ` of an `m×c` feature matrix.
    pub fn linear(x: &FeatureMatrix) -> Result<Self> {
        let x = x.to_matrix();
        Self::from_kernel(&(&x * x.transpose()))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    fn dot(&self, other: &CenteredGram) -> Result<f64> {
        let m = self.0.nrows();
        if other.0.nrows() != m {
            return Err(Error::invalid(format!("sample counts differ: {m} vs {}", other.0.nrows())));
        }
        Ok(self.0.dot(&other.0) / ((m - 1) as f64).powi(2))
    }
}

/// `vec(HKH)·vec(HLH)/(m−1)²`.
pub fn hsic(k: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<f64> {
    CenteredGram::from_kernel(k)?.dot(&CenteredGram::from_kernel(l)?)
}

fn cka_centered(a: &CenteredGram, b: &CenteredGram) -> Result<f64> {
    let denom = (a.dot(a)? * b.dot(b)?).sqrt();
    if !(denom > 0.0) {
        return Err(Error::Degenerate("CKA denominator is zero (constant features)".into()));
    }
    Ok(a.dot(b)? / denom)
}

/// Linear CKA between two feature matrices over the same `m` samples.
pub fn cka(x1: &FeatureMatrix, x2: &FeatureMatrix) -> Result<f64> {
    if x1.rows != x2.rows {
        return Err(Error::invalid(format!("sample counts differ: {} vs {}", x1.rows, x2.rows)));
    }
    cka_centered(&CenteredGram::linear(x1)?, &CenteredGram::linear(x2)?)
}

/// `M[i][j] = CKA(a[i], b[j])`.
pub fn cka_matrix(a: &[FeatureMatrix], b: &[FeatureMatrix]) -> Result<Vec<Vec<f64>>> {
    let ga = a.iter().map(CenteredGram::linear).collect::<Result<Vec<_>>>()?;
    let gb = b.iter().map(CenteredGram::linear).collect::<Result<Vec<_>>>()?;
    ga.iter().map(|x| gb.iter().map(|y| cka_centered(x, y)).collect()).collect()
}

/// `layer_a,layer_b,cka` rows.
pub fn write_cka_csv(m: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut s = String::from("layer_a,layer_b,cka\n");
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(s, "{i},{j},{v:?}");
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Similarity of every layer of the first model to the last layer of the second.
pub fn write_last_layer_csv(m: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut s = String::from("layer,cka_to_last\n");
    for (i, row) in m.iter().enumerate() {
        let _ = writeln!(s, "{i},{:?}", row.last().copied().unwrap_or(f64::NAN));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
