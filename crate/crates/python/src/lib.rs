//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use freeknot::basis::{KnotLayout, KnotSet};
use freeknot::cli::{self, Command, RunConfig};
use freeknot::dataprep::{self, Transform};
use freeknot::evaluation;
use freeknot::posterior::{Model, ModelState};
use freeknot::sampler::{self, ChainConfig, ChainOutput, Updater};
use freeknot::simulation::{self, DgpSpec};
use freeknot::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[pyclass(name = "Dataset", module = "pyfreeknot")]
#[derive(Clone)]
struct PyDataset {
    inner: dataprep::Dataset,
}

#[pymethods]
impl PyDataset {
    /// `y` is n x p, `x` the n x d covariates without an intercept.
    #[new]
    #[pyo3(signature = (y, x, standardize = true))]
    fn new(y: Vec<Vec<f64>>, x: Vec<Vec<f64>>, standardize: bool) -> PyResult<Self> {
        let inner = dataprep::Dataset::from_raw(matrix(&y)?, &matrix(&x)?, standardize).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, responses, logit = false))]
    fn from_csv(path: PathBuf, responses: Vec<String>, logit: bool) -> PyResult<Self> {
        let transform = if logit { Transform::Logit } else { Transform::None };
        let inner = dataprep::load_csv(&path, &responses, transform).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.y)
    }

    /// Covariates with the leading intercept column.
    #[getter]
    fn xo(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.xo)
    }
}

#[pyclass(name = "Model", module = "pyfreeknot")]
struct PyModel {
    inner: Model,
}

impl PyModel {
    fn state(&self, knots: &[f64], log_lambda: Vec<f64>, sigma: &[Vec<f64>]) -> PyResult<ModelState> {
        Ok(ModelState {
            knots: KnotSet::from_flat(&self.inner.knot_layout, knots).map_err(to_py)?,
            log_lambda: DVector::from_vec(log_lambda),
            sigma: matrix(sigma)?,
        })
    }
}

#[pymethods]
impl PyModel {
    /// Default prior for `surface` surface knots and `additive` knots per covariate.
    #[new]
    #[pyo3(signature = (data, surface, additive, seed = 1))]
    fn new(data: &PyDataset, surface: usize, additive: usize, seed: u64) -> PyResult<Self> {
        let layout = KnotLayout::uniform(data.inner.dim(), surface, additive);
        let prior = dataprep::default_prior(&data.inner, &layout, seed).map_err(to_py)?;
        let inner = Model::new(data.inner.clone(), prior).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    #[getter]
    fn knot_count(&self) -> usize {
        self.inner.knot_layout.len()
    }

    /// Starting point as `(knots, log_lambda, sigma)`.
    fn initial_state(&self) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let s = self.inner.initial_state();
        (s.knots.flatten().iter().copied().collect(), s.log_lambda.iter().copied().collect(), rows(&s.sigma))
    }

    /// Log posterior of (knots, log λ, Σ) with B integrated out, up to a constant.
    fn log_marginal(&self, knots: Vec<f64>, log_lambda: Vec<f64>, sigma: Vec<Vec<f64>>) -> PyResult<f64> {
        let st = self.state(&knots, log_lambda, &sigma)?;
        self.inner.log_marginal(&st).map_err(to_py)
    }

    /// Gradients of `log_marginal` with respect to the knots and log λ.
    fn gradients(&self, knots: Vec<f64>, log_lambda: Vec<f64>, sigma: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let st = self.state(&knots, log_lambda, &sigma)?;
        let mom = self.inner.moments(&st).map_err(to_py)?;
        let gk = self.inner.grad_knots(&st, &mom).map_err(to_py)?;
        let gl = self.inner.grad_log_lambda(&st, &mom).map_err(to_py)?;
        Ok((gk.iter().copied().collect(), gl.iter().copied().collect()))
    }

    #[pyo3(signature = (iterations = 1000, burn_in = 200, seed = 1, updater = "bmh"))]
    fn run_chain(&self, iterations: usize, burn_in: usize, seed: u64, updater: &str) -> PyResult<PyChain> {
        let updater = match updater {
            "bmh" => Updater::Bmh,
            "smh" => Updater::Smh,
            "srwm" => Updater::Srwm,
            other => return Err(PyValueError::new_err(format!("unknown updater '{other}'"))),
        };
        let mut cfg = ChainConfig {
            iterations,
            burn_in,
            seed,
            ..Default::default()
        };
        cfg.mh.updater = updater;
        let out = sampler::run_chain(&self.inner, &cfg, None).map_err(to_py)?;
        Ok(PyChain {
            inner: out,
            data: self.inner.data.clone(),
        })
    }
}

#[pyclass(name = "Chain", module = "pyfreeknot")]
struct PyChain {
    inner: ChainOutput,
    data: dataprep::Dataset,
}

#[pymethods]
impl PyChain {
    fn __len__(&self) -> usize {
        self.inner.draws.len()
    }

    /// One row of flat knot coordinates per draw.
    fn knots(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.knot_matrix())
    }

    fn log_lambda(&self) -> Vec<Vec<f64>> {
        self.inner.draws.iter().map(|d| d.log_lambda.iter().copied().collect()).collect()
    }

    fn sigma(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.draws.iter().map(|d| rows(&d.sigma)).collect()
    }

    fn coefficients(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.draws.iter().map(|d| rows(&d.b)).collect()
    }

    /// Acceptance rates of the Σ, knot and λ steps.
    fn acceptance(&self) -> (f64, f64, f64) {
        (
            self.inner.sigma_acceptance_rate(),
            self.inner.knot_acceptance_rate(),
            self.inner.lambda_acceptance_rate(),
        )
    }

    /// Posterior mean and sd of the surface at standardised covariate rows.
    fn surface(&self, points: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let s = evaluation::posterior_surface(&self.inner, &matrix(&points)?).map_err(to_py)?;
        Ok((rows(&s.mean), rows(&s.sd)))
    }

    #[pyo3(signature = (points = 100, seed = 1))]
    fn surface_inefficiency(&self, points: usize, seed: u64) -> PyResult<f64> {
        evaluation::surface_if_summary(&self.inner, &self.data, points, seed).map_err(to_py)
    }
}

#[pyfunction]
fn inefficiency_factor(series: Vec<f64>) -> PyResult<f64> {
    evaluation::inefficiency_factor(&series).map_err(to_py)
}

#[pyfunction]
fn partition_folds(n: usize, folds: usize) -> PyResult<Vec<Vec<usize>>> {
    dataprep::partition_folds(n, folds).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (points, k, seed = 1))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&dataprep::kmeans(&matrix(&points)?, k, seed).map_err(to_py)?))
}

#[pyfunction]
fn thinplate(x: Vec<f64>, knot: Vec<f64>) -> PyResult<f64> {
    freeknot::basis::thinplate_value(&x, &knot).map_err(to_py)
}

/// Synthetic data set; returns `(dataset, noiseless surface)`.
#[pyfunction]
#[pyo3(signature = (n = 200, p = 2, covariates = 5, seed = 1))]
fn simulate(n: usize, p: usize, covariates: usize, seed: u64) -> PyResult<(PyDataset, Vec<Vec<f64>>)> {
    let spec = DgpSpec {
        n,
        p,
        covariates,
        seed,
        ..Default::default()
    };
    let syn = simulation::generate_dgp(&spec).map_err(to_py)?;
    Ok((PyDataset { inner: syn.data }, rows(&syn.f_train)))
}

/// Runs a CLI command from a TOML config string; returns the manifest as JSON.
#[pyfunction]
fn run_command(command: &str, config_toml: &str) -> PyResult<String> {
    let cmd = match command {
        "fit" => Command::Fit,
        "simulate" => Command::Simulate,
        "benchmark" => Command::Benchmark,
        "cv" => Command::Cv,
        "diagnose" => Command::Diagnose,
        other => return Err(PyValueError::new_err(format!("unknown command '{other}'"))),
    };
    let cfg = RunConfig::from_toml_str(config_toml).map_err(to_py)?;
    let manifest = cli::run(cmd, &cfg).map_err(to_py)?;
    serde_json::to_string(&manifest).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn pyfreeknot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyChain>()?;
    m.add_function(wrap_pyfunction!(inefficiency_factor, m)?)?;
    m.add_function(wrap_pyfunction!(partition_folds, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(thinplate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
