//! Python bindings. Arrays cross the boundary as flat row-major lists plus a
//! shape, so the module has no dependency on numpy.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ge2ae::analysis::{cka as cka_score, fit_power_law as fit, FeatureMatrix};
use ge2ae::fourier::{self, Spectrum2D};
use ge2ae::losses;
use ge2ae::model::random_masking as plan;
use ge2ae::training::{self, schedule};
use ge2ae::{ComplexTensor, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: ge2ae::Error) -> PyErr {
    match e {
        ge2ae::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

fn spectrum(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> PyResult<Spectrum2D> {
    let values = ComplexTensor::new(shape, re, im).map_err(to_py)?;
    Spectrum2D::new(values).map_err(to_py)
}

fn features(rows: usize, cols: usize, data: Vec<f64>) -> PyResult<FeatureMatrix> {
    FeatureMatrix::new(rows, cols, data).map_err(to_py)
}

/// Forward 2D transform of a real `[..., H, W, C]` array; returns `(re, im)`.
#[pyfunction]
fn dft2d(shape: Vec<usize>, data: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let spec = fourier::dft2d(&tensor(shape, data)?).map_err(to_py)?;
    let (re, im) = spec.into_values().into_parts();
    Ok((re.into_data(), im.into_data()))
}

/// Inverse transform (with the 1/HW factor); returns `(re, im)`.
#[pyfunction]
fn idft2d(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let out = fourier::idft2d(&spectrum(shape, re, im)?).map_err(to_py)?;
    let (re, im) = out.into_parts();
    Ok((re.into_data(), im.into_data()))
}

/// `(visible, masked)` patch indices for `n` patches.
#[pyfunction]
fn random_masking(n: usize, ratio: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let p = plan(n, ratio, seed).map_err(to_py)?;
    Ok((p.visible().to_vec(), p.masked().to_vec()))
}

#[pyfunction]
#[pyo3(signature = (shape, pred_re, pred_im, target_re, target_im, beta = 1.0))]
fn focal_frequency_loss(
    shape: Vec<usize>,
    pred_re: Vec<f64>,
    pred_im: Vec<f64>,
    target_re: Vec<f64>,
    target_im: Vec<f64>,
    beta: f64,
) -> PyResult<f64> {
    let pred = spectrum(shape.clone(), pred_re, pred_im)?;
    let target = spectrum(shape, target_re, target_im)?;
    losses::focal_frequency_loss(&pred, &target, beta).map_err(to_py)
}

/// Learning rate at `step` under linear warmup then cosine decay.
#[pyfunction]
fn lr_at_step(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> PyResult<f64> {
    schedule::lr_at_step(step, total_steps, warmup_steps, base_lr).map_err(to_py)
}

/// `(alpha, eigenvalues)` of a `rows × cols` feature matrix over the 1-based window `[j0, j1]`.
#[pyfunction]
#[pyo3(signature = (rows, cols, data, j0, j1, center = false))]
fn fit_power_law(rows: usize, cols: usize, data: Vec<f64>, j0: usize, j1: usize, center: bool) -> PyResult<(f64, Vec<f64>)> {
    let f = fit(&features(rows, cols, data)?, j0, j1, center).map_err(to_py)?;
    Ok((f.alpha, f.eigenvalues))
}

/// Linear CKA between two feature matrices with the same number of rows.
#[pyfunction]
fn cka(rows: usize, x_cols: usize, x: Vec<f64>, y_cols: usize, y: Vec<f64>) -> PyResult<f64> {
    cka_score(&features(rows, x_cols, x)?, &features(rows, y_cols, y)?).map_err(to_py)
}

/// Number of checks and number of failures of the built-in self-test.
#[pyfunction]
fn selftest() -> (usize, usize) {
    let results = ge2ae::selftest::run_selftest();
    let failed = results.iter().filter(|r| !r.passed).count();
    (results.len(), failed)
}

/// A loaded training checkpoint.
#[pyclass(frozen)]
struct Checkpoint {
    inner: training::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint { inner: training::load_checkpoint(&path).map_err(to_py)? })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn config(&self) -> BTreeMap<String, String> {
        self.inner.config.iter().cloned().collect()
    }

    fn names(&self) -> Vec<String> {
        self.inner.tensors.keys().cloned().collect()
    }

    /// `(shape, data)` of one stored tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .inner
            .tensors
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no tensor named `{name}`")))?;
        Ok((t.tensor.shape().to_vec(), t.tensor.data().to_vec()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.tensors.len()
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(step={}, tensors={})", self.inner.step, self.inner.tensors.len())
    }
}

#[pymodule]
fn ge2ae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dft2d, m)?)?;
    m.add_function(wrap_pyfunction!(idft2d, m)?)?;
    m.add_function(wrap_pyfunction!(random_masking, m)?)?;
    m.add_function(wrap_pyfunction!(focal_frequency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_step, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(cka, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
