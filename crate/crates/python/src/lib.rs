//! Python bindings for the `gapm` estimation library.

use std::sync::Arc;

use gapm::eval;
use gapm::fit::{self as fitting, FitConfig, FittedModel, Mode, ModelKind};
use gapm::io::ParamsFile;
use gapm::model::{self as core, SieveMonotone};
use gapm::simgen::{self, SimModel};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

/// Lists of small integers rather than `bytes` on the Python side.
fn widen(row: impl AsRef<[u8]>) -> Vec<u32> {
    row.as_ref().iter().map(|&v| u32::from(v)).collect()
}

fn to_py(e: gapm::Error) -> PyErr {
    if e.exit_code() == 3 {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn model_kind(name: &str) -> PyResult<ModelKind> {
    match name {
        "gapm" => Ok(ModelKind::Gapm),
        "apm" => Ok(ModelKind::Apm),
        other => Err(PyValueError::new_err(format!(
            "unknown model `{other}`, expected gapm or apm"
        ))),
    }
}

/// Augmented knot grid on [0, 1].
#[pyclass(name = "KnotGrid", frozen)]
struct PyKnotGrid {
    inner: Arc<core::KnotGrid>,
}

#[pymethods]
impl PyKnotGrid {
    /// Grid from interior knots; 0 and 1 are added.
    #[new]
    fn new(interior: Vec<f64>) -> PyResult<Self> {
        let inner = core::KnotGrid::from_interior(&interior).map_err(to_py)?;
        Ok(PyKnotGrid {
            inner: Arc::new(inner),
        })
    }

    /// One of `k1`, `k0`, `k2`, `ecpe`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let inner = core::KnotGrid::preset(name).map_err(to_py)?;
        Ok(PyKnotGrid {
            inner: Arc::new(inner),
        })
    }

    #[getter]
    fn breakpoints(&self) -> Vec<f64> {
        self.inner.breakpoints().to_vec()
    }

    #[getter]
    fn segments(&self) -> usize {
        self.inner.segments()
    }

    fn __repr__(&self) -> String {
        format!("KnotGrid(segments={})", self.inner.segments())
    }
}

/// Item-by-attribute 0/1 design matrix.
#[pyclass(name = "QMatrix", frozen)]
struct PyQMatrix {
    inner: core::QMatrix,
}

#[pymethods]
impl PyQMatrix {
    #[new]
    fn new(rows: Vec<Vec<u8>>) -> PyResult<Self> {
        Ok(PyQMatrix {
            inner: core::QMatrix::new(rows).map_err(to_py)?,
        })
    }

    /// `Q3` or `Q5`.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        Ok(PyQMatrix {
            inner: simgen::builtin_q(name).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn exploratory(items: usize, attributes: usize) -> Self {
        PyQMatrix {
            inner: core::QMatrix::exploratory(items, attributes),
        }
    }

    #[getter]
    fn items(&self) -> usize {
        self.inner.items()
    }

    #[getter]
    fn attributes(&self) -> usize {
        self.inner.attributes()
    }

    fn rows(&self) -> Vec<Vec<u32>> {
        self.inner.rows().into_iter().map(widen).collect()
    }
}

/// Binary response matrix, one row per individual.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(rows: Vec<Vec<u8>>) -> PyResult<Self> {
        Ok(PyDataset {
            inner: core::Dataset::from_rows(rows).map_err(to_py)?,
        })
    }

    /// Reads a 0/1 CSV file, with or without a header line.
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: gapm::io::read_responses(path.as_ref()).map_err(to_py)?,
        })
    }

    #[getter]
    fn individuals(&self) -> usize {
        self.inner.individuals()
    }

    #[getter]
    fn items(&self) -> usize {
        self.inner.items()
    }

    fn rows(&self) -> Vec<Vec<u32>> {
        self.inner.rows().map(widen).collect()
    }

    fn proportion_correct(&self) -> Vec<f64> {
        self.inner.proportion_correct()
    }
}

/// Simulated data together with the true latent positions.
#[pyclass(name = "Simulation", frozen)]
struct PySimulation {
    inner: simgen::Simulation,
}

#[pymethods]
impl PySimulation {
    #[getter]
    fn data(&self) -> PyDataset {
        PyDataset {
            inner: self.inner.data.clone(),
        }
    }

    /// True attribute positions on the unit scale.
    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        self.inner.u.clone()
    }

    /// True item response probability of item `j` at `u`.
    fn irf(&self, j: usize, u: Vec<f64>) -> PyResult<f64> {
        check_point(self.inner.truth.q(), j, &u)?;
        Ok(self.inner.truth.irf(j, &u))
    }

    fn truth_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.truth).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

fn check_point(q: &core::QMatrix, j: usize, u: &[f64]) -> PyResult<()> {
    if j >= q.items() || u.len() != q.attributes() {
        return Err(PyValueError::new_err(format!(
            "need item < {} and {} coordinates",
            q.items(),
            q.attributes()
        )));
    }
    if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(PyValueError::new_err("coordinates must lie in [0, 1]"));
    }
    Ok(())
}

/// Outcome of a fit.
#[pyclass(name = "FitResult", frozen)]
struct PyFitResult {
    q: core::QMatrix,
    inner: FittedModel,
}

impl PyFitResult {
    fn summary(&self) -> (&[Vec<f64>], f64, f64, f64, u64) {
        match &self.inner {
            FittedModel::Gapm(r) => (
                &r.eap_scores,
                r.acceptance_rate,
                r.early_loglik,
                r.late_loglik,
                r.numerical_warnings,
            ),
            FittedModel::Apm(r) => (
                &r.eap_scores,
                r.acceptance_rate,
                r.early_loglik,
                r.late_loglik,
                r.numerical_warnings,
            ),
        }
    }
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn model(&self) -> &'static str {
        match self.inner {
            FittedModel::Gapm(_) => "gapm",
            FittedModel::Apm(_) => "apm",
        }
    }

    /// Posterior mean of each individual's attribute positions.
    #[getter]
    fn eap_scores(&self) -> Vec<Vec<f64>> {
        self.summary().0.to_vec()
    }

    #[getter]
    fn acceptance_rate(&self) -> f64 {
        self.summary().1
    }

    #[getter]
    fn early_loglik(&self) -> f64 {
        self.summary().2
    }

    #[getter]
    fn late_loglik(&self) -> f64 {
        self.summary().3
    }

    #[getter]
    fn numerical_warnings(&self) -> u64 {
        self.summary().4
    }

    /// Latent correlation matrix.
    fn correlation(&self) -> Vec<Vec<f64>> {
        let k = self.q.attributes();
        let c = match &self.inner {
            FittedModel::Gapm(r) => r.params.chol.correlation(),
            FittedModel::Apm(r) => eval::to_correlation(&r.params.cov_chol.gram(), k),
        };
        c.chunks(k).map(<[f64]>::to_vec).collect()
    }

    /// Fitted item response probability of item `j` at `u`.
    fn irf(&self, j: usize, u: Vec<f64>) -> PyResult<f64> {
        check_point(&self.q, j, &u)?;
        Ok(match &self.inner {
            FittedModel::Gapm(r) => r.params.irf(&self.q, j, &u),
            FittedModel::Apm(r) => r.params.irf(&self.q, j, &u),
        })
    }

    /// Parameters in the same JSON layout as the command-line `params.json`.
    fn params_json(&self) -> PyResult<String> {
        let file = match &self.inner {
            FittedModel::Gapm(r) => ParamsFile::from_gapm(&self.q, &r.params).map_err(to_py)?,
            FittedModel::Apm(r) => ParamsFile::from_apm(&self.q, &r.params),
        };
        serde_json::to_string_pretty(&file).map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

/// Simulates `n` individuals from the generalized (`gapm`) or additive (`apm`) model.
#[pyfunction]
#[pyo3(signature = (q, n, sigma = 0.7, seed = 1, model = "gapm"))]
fn simulate(q: &PyQMatrix, n: usize, sigma: f64, seed: u64, model: &str) -> PyResult<PySimulation> {
    let model = match model_kind(model)? {
        ModelKind::Gapm => SimModel::Gapm,
        ModelKind::Apm => SimModel::Apm,
    };
    let inner = simgen::simulate(model, &q.inner, n, sigma, seed).map_err(to_py)?;
    Ok(PySimulation { inner })
}

/// Fits a model. Without `q`, `k` attributes are fitted exploratorily.
#[pyfunction]
#[pyo3(signature = (data, q = None, k = None, model = "gapm", knots = None, iterations = 20000, burn_in = None, seed = 1))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    data: &PyDataset,
    q: Option<&PyQMatrix>,
    k: Option<usize>,
    model: &str,
    knots: Option<&PyKnotGrid>,
    iterations: u64,
    burn_in: Option<u64>,
    seed: u64,
) -> PyResult<PyFitResult> {
    let kind = model_kind(model)?;
    let (q, mode) = match (q, k) {
        (Some(q), None) => (q.inner.clone(), Mode::Confirmatory),
        (None, Some(k)) => (
            core::QMatrix::exploratory(data.inner.items(), k),
            Mode::Exploratory,
        ),
        _ => return Err(PyValueError::new_err("give exactly one of q or k")),
    };
    let grid = match knots {
        Some(g) => g.inner.clone(),
        None => Arc::new(core::KnotGrid::preset("k1").map_err(to_py)?),
    };
    let mut cfg = FitConfig::new(
        kind,
        iterations,
        burn_in.unwrap_or(iterations / 2),
        data.inner.individuals(),
        q.attributes(),
        seed,
    );
    cfg.mode = mode;
    let dataset = &data.inner;
    let inner = py
        .detach(|| fitting::fit(dataset, &q, &grid, &cfg, kind))
        .map_err(to_py)?;
    Ok(PyFitResult {
        q: fitting::effective_q(&q, mode),
        inner,
    })
}

/// Spearman rank correlation with average ranks for ties.
#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    eval::spearman(&x, &y).map_err(to_py)
}

#[pyfunction]
fn normal_cdf(x: f64) -> f64 {
    core::normal_cdf(x)
}

#[pyfunction]
fn normal_quantile(p: f64) -> PyResult<f64> {
    core::normal_quantile(p).map_err(to_py)
}

#[pyfunction]
fn beta_cdf(a: f64, b: f64, x: f64) -> PyResult<f64> {
    core::beta_cdf(a, b, x).map_err(to_py)
}

/// Monotone piecewise-linear function on `grid` with increments `theta`, at `x`.
#[pyfunction]
fn sieve_eval(grid: &PyKnotGrid, theta: Vec<f64>, x: f64) -> PyResult<f64> {
    let sieve = SieveMonotone::new(grid.inner.clone(), theta).map_err(to_py)?;
    sieve.eval(x).map_err(to_py)
}

#[pymodule]
fn pygapm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKnotGrid>()?;
    m.add_class::<PyQMatrix>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PySimulation>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(normal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(beta_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(sieve_eval, m)?)?;
    Ok(())
}
