//! Python bindings for `adaptive_kernel`.
//!
//! Structured reports cross the boundary as JSON and come back as plain
//! dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

use adaptive_kernel::analysis;
use adaptive_kernel::basis::low_dim_spectrum;
use adaptive_kernel::dynamics::{init_state, schedules, train as train_flow, FixedState, StoppingRule};
use adaptive_kernel::experiment::{run_file, RunError, RunOptions};
use adaptive_kernel::onedim::certify::{certify as certify_lemma, Lemma, SweepConfig};
use adaptive_kernel::sampling::{sample_dataset, sample_dataset_with};
use adaptive_kernel::signals::{cosine_target, cosine_target_coeffs};
use adaptive_kernel::{CoefficientVector, Error, Estimator, GappedDecay, OrderedSpectrum, TrainConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } | Error::DescentViolation { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn run_err(e: RunError) -> PyErr {
    match e {
        RunError::Numerical { .. } => PyArithmeticError::new_err(e.record().to_string()),
        _ => PyValueError::new_err(e.record().to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Basis elements sorted by non-increasing eigenvalue.
#[pyclass(name = "Spectrum", module = "diagkernel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySpectrum {
    inner: OrderedSpectrum,
}

#[pymethods]
impl PySpectrum {
    /// Torus basis with `|m|∞ ≤ max_freq` and eigenvalues `(1+‖m‖²)^{-r}`.
    /// `active_dims` re-indexes onto elements living on the leading coordinates.
    #[staticmethod]
    #[pyo3(signature = (d, max_freq, r, active_dims=None))]
    fn sobolev(d: usize, max_freq: i64, r: f64, active_dims: Option<usize>) -> PyResult<Self> {
        let full = OrderedSpectrum::sobolev(d, max_freq, r).map_err(py_err)?;
        let inner = match active_dims {
            Some(d0) => low_dim_spectrum(&full, d0).map_err(py_err)?,
            None => full,
        };
        Ok(Self { inner })
    }

    /// One-dimensional basis at the given ranks with eigenvalues `rank^{-gamma}`.
    #[staticmethod]
    fn power_law(ranks: Vec<u64>, gamma: f64) -> PyResult<Self> {
        Ok(Self { inner: OrderedSpectrum::power_law_1d(&ranks, gamma).map_err(py_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    #[getter]
    fn ranks(&self) -> Vec<u64> {
        self.inner.ranks().to_vec()
    }

    /// Frequency vector of every element.
    #[getter]
    fn frequencies(&self) -> Vec<Vec<u64>> {
        self.inner.elements().iter().map(|e| e.index().freq().to_vec()).collect()
    }

    /// All basis functions at one point of `[-1, 1)^d`.
    fn evaluate(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!("expected a point of dimension {}", self.inner.dim())));
        }
        let mut out = vec![0.0; self.inner.len()];
        self.inner.evaluate_all(&x, &mut out);
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!("Spectrum(len={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// Truth coefficients on a spectrum plus the energy outside it.
#[pyclass(name = "Truth", module = "diagkernel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTruth {
    inner: CoefficientVector,
    cosine: bool,
}

#[pymethods]
impl PyTruth {
    /// Misaligned truth `|θ*_{ℓ(j)}| = j^{-(p+1)/2}` at positions `ℓ(j) ≈ j^q ≤ truncation`.
    #[staticmethod]
    fn gapped(spectrum: &PySpectrum, p: f64, q: f64, truncation: u64) -> PyResult<Self> {
        let inner = GappedDecay::new(p, q, truncation).and_then(|g| g.on_spectrum(&spectrum.inner)).map_err(py_err)?;
        Ok(Self { inner, cosine: false })
    }

    /// Coefficients of `cos(7.5πx₁)`.
    #[staticmethod]
    fn cosine(spectrum: &PySpectrum) -> PyResult<Self> {
        Ok(Self { inner: cosine_target_coeffs(&spectrum.inner).map_err(py_err)?, cosine: true })
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.theta.clone()
    }

    #[getter]
    fn tail_energy(&self) -> f64 {
        self.inner.tail_energy
    }

    #[getter]
    fn total_energy(&self) -> f64 {
        self.inner.total_energy()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Noisy samples `y = f*(x) + σξ` with `x` uniform on the torus.
#[pyclass(name = "Dataset", module = "diagkernel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: adaptive_kernel::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (truth, spectrum, n, sigma, seed, stream=0))]
    fn sample(truth: &PyTruth, spectrum: &PySpectrum, n: usize, sigma: f64, seed: u64, stream: u64) -> PyResult<Self> {
        let inner = if truth.cosine {
            sample_dataset_with(cosine_target, spectrum.inner.dim(), n, sigma, seed, stream)
        } else {
            sample_dataset(&truth.inner, &spectrum.inner, n, sigma, seed, stream)
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n()).map(|i| self.inner.point(i).to_vec()).collect()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y.clone()
    }
}

/// Estimator read out at the stopping time.
#[pyclass(name = "TrainResult", module = "diagkernel", frozen, get_all)]
struct PyTrainResult {
    method: String,
    depth: u32,
    eta: f64,
    stop_step: u64,
    gen_error: f64,
    theta: Vec<f64>,
    learned: Vec<f64>,
    conservation_drift: f64,
    /// `(flow_time, train_loss, gen_error)` at every snapshot.
    curve: Vec<(f64, f64, f64)>,
}

/// Gradient descent with the theoretical stopping time `c_t n^{(D+1)/(D+2)}`.
/// `depth=None` trains the fixed kernel.
#[pyfunction]
#[pyo3(signature = (data, spectrum, truth, depth=None, eta=0.05, c_t=3.0, c_b=1.0, snapshot_every=100))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: &PyDataset,
    spectrum: &PySpectrum,
    truth: &PyTruth,
    depth: Option<u32>,
    eta: f64,
    c_t: f64,
    c_b: f64,
    snapshot_every: u64,
) -> PyResult<PyTrainResult> {
    let init = match depth {
        None => Estimator::Fixed(FixedState::new(spectrum.inner.eigenvalues())),
        Some(d) => {
            let s = schedules(data.inner.n(), d, c_t, c_b).map_err(py_err)?;
            Estimator::Adaptive(init_state(&spectrum.inner, d, s.b0.unwrap_or(1.0)).map_err(py_err)?)
        }
    };
    let mut cfg = TrainConfig::new(eta, StoppingRule::TheoreticalTime { c_t });
    cfg.snapshot_every = snapshot_every.max(1);
    let out = py
        .detach(|| train_flow(&data.inner, &spectrum.inner, &truth.inner, init, &cfg))
        .map_err(py_err)?;
    let theta = out.estimator.theta();
    Ok(PyTrainResult {
        method: out.trajectory.method.clone(),
        depth: out.trajectory.depth,
        eta,
        stop_step: out.trajectory.stop_step,
        gen_error: analysis::gen_error(&theta, &truth.inner).map_err(py_err)?,
        learned: out.estimator.learned(),
        conservation_drift: out.estimator.drift(),
        curve: out.trajectory.snapshots.iter().map(|s| (s.flow_time, s.train_loss, s.gen_error)).collect(),
        theta,
    })
}

/// `‖θ - θ*‖²` plus the truth energy outside the spectrum.
#[pyfunction]
fn gen_error(theta: Vec<f64>, truth: &PyTruth) -> PyResult<f64> {
    analysis::gen_error(&theta, &truth.inner).map_err(py_err)
}

/// Least-squares line in log-log coordinates: `(slope, intercept, r_squared)`.
#[pyfunction]
fn fit_power_law(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let f = analysis::fit_power_law(&xs, &ys).map_err(py_err)?;
    Ok((f.slope, f.intercept, f.r_squared))
}

/// Stopping time and initial depth scale for `n` samples: `(t, b0)`.
#[pyfunction]
#[pyo3(signature = (n, depth, c_t=1.0, c_b=1.0))]
fn schedule(n: usize, depth: u32, c_t: f64, c_b: f64) -> PyResult<(f64, Option<f64>)> {
    let s = schedules(n, depth, c_t, c_b).map_err(py_err)?;
    Ok((s.stop_time, s.b0))
}

/// Randomized sweep of one scalar-flow bound; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (lemma, depth, tuples=500, seed=None))]
fn certify<'py>(py: Python<'py>, lemma: &str, depth: u32, tuples: usize, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let lemma = Lemma::ALL
        .iter()
        .copied()
        .find(|l| l.name() == lemma)
        .ok_or_else(|| PyValueError::new_err(format!("unknown lemma {lemma:?}")))?;
    let mut cfg = SweepConfig { tuples, ..SweepConfig::default() };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = py.detach(|| certify_lemma(lemma, depth, &cfg)).map_err(py_err)?;
    to_py(py, &report)
}

/// Names accepted by `certify`.
#[pyfunction]
fn lemmas() -> Vec<&'static str> {
    Lemma::ALL.iter().map(|l| l.name()).collect()
}

/// Runs a TOML experiment config and returns the written files.
#[pyfunction]
#[pyo3(signature = (path, out=None, seed=None, workers=None))]
fn run_config(py: Python<'_>, path: PathBuf, out: Option<PathBuf>, seed: Option<u64>, workers: Option<usize>) -> PyResult<Vec<String>> {
    let opts = RunOptions { workers, seed, out, config_hash: None };
    let outcome = py.detach(|| run_file(&path, &opts)).map_err(run_err)?;
    Ok(outcome.files.iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
fn diagkernel(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySpectrum>()?;
    m.add_class::<PyTruth>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gen_error, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(lemmas, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
