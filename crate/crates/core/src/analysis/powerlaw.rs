use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::FeatureMatrix;
use crate::error::{Error, Result};

/// Relative convergence tolerance handed to the symmetric eigensolver.
const EIGEN_TOL: f64 = 1e-12;
/// Negative eigenvalues down to this fraction of the largest are clamped to 0.
const NEG_SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct PowerLawFit {
    /// Eigenvalues of the feature second-moment matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Negative log-log slope over the fit window.
    pub alpha: f64,
    pub j0: usize,
    pub j1: usize,
    /// Root-mean-square residual of the log-log line.
    pub residual: f64,
}

/// `[10, min(C, N, 512)/2]`, clipped so the window has at least four points
/// when the matrix is small.
pub fn default_fit_range(rows: usize, cols: usize) -> (usize, usize) {
    let j1 = rows.min(cols).min(512) / 2;
    (10.min(j1.saturating_sub(3)).max(1), j1)
}

/// Forms `Σ = (1/N)·FᵀF` (optionally on mean-centered features), sorts its
/// eigenvalues in descending order and fits `log λ_j = c − α·log j` by least
/// squares over the 1-based window `[j0, j1]`.
pub fn fit_power_law(features: &FeatureMatrix, j0: usize, j1: usize, center: bool) -> Result<PowerLawFit> {
    let (n, c) = (features.rows, features.cols);
    if n < 2 {
        return Err(Error::invalid("power-law fit needs at least two samples"));
    }
    if j0 < 1 || j1 > c || j1 < j0 + 3 {
        return Err(Error::invalid(format!("fit window [{j0}, {j1}] invalid for {c} features (need 1 <= j0, j0+3 <= j1 <= C)")));
    }
    let mut f = features.to_matrix();
    if center {
        for mut col in f.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
    let sigma: DMatrix<f64> = (f.transpose() * &f) / n as f64;
    let eig = SymmetricEigen::try_new(sigma, EIGEN_TOL, 0)
        .ok_or_else(|| Error::Degenerate("eigendecomposition did not converge".into()))?;
    let mut lambdas: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    lambdas.sort_by(|a, b| b.total_cmp(a));
    let top = lambdas.first().copied().unwrap_or(0.0).max(0.0);
    for l in lambdas.iter_mut() {
        if *l < 0.0 {
            if *l < -NEG_SLACK * top.max(1.0) {
                return Err(Error::Degenerate(format!("covariance has eigenvalue {l}")));
            }
            *l = 0.0;
        }
    }

    let pts: Vec<(f64, f64)> = (j0..=j1)
        .filter(|&j| lambdas[j - 1] > 0.0)
        .map(|j| ((j as f64).ln(), lambdas[j - 1].ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Degenerate(format!("fewer than two positive eigenvalues in [{j0}, {j1}]")));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let residual = (pts.iter().map(|p| (p.1 - icept - slope * p.0).powi(2)).sum::<f64>() / k).sqrt();
    let alpha = -slope;
    if !alpha.is_finite() {
        return Err(Error::Degenerate("non-finite slope".into()));
    }
    Ok(PowerLawFit { eigenvalues: lambdas, alpha, j0, j1, residual })
}

/// `j,lambda` rows for every eigenvalue (1-based `j`).
pub fn write_powerlaw_csv(fit: &PowerLawFit, path: &Path) -> Result<()> {
    let mut s = String::from("j,lambda\n");
    for (i, l) in fit.eigenvalues.iter().enumerate() {
        let _ = writeln!(s, "{},{l:?}", i + 1);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
