//! Python bindings for the opt-out DP federated learning simulator.

use std::path::PathBuf;

use feo2_cli::config::{parse_config, parse_config_str, render_json, render_toml, Format};
use feo2_core::analytic as an;
use feo2_core::simulate::{self, RoundReport};
use feo2_core::{aggregation, personalization, privacy, Error, ModelVector};
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::DimensionMismatch { .. } | Error::Parse { .. } | Error::Range(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::NumericFailure { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn cli_err(e: feo2_cli::CliError) -> PyErr {
    match e {
        feo2_cli::CliError::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Population and noise parameters of the estimation setting.
#[pyclass(name = "AnalyticParams", module = "feo2", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyAnalyticParams {
    inner: an::AnalyticParams,
}

#[pymethods]
impl PyAnalyticParams {
    #[new]
    #[pyo3(signature = (n_clients, n_private, beta2, tau2, gamma2, samples_per_client=1, dim=1))]
    fn new(
        n_clients: usize,
        n_private: usize,
        beta2: f64,
        tau2: f64,
        gamma2: f64,
        samples_per_client: usize,
        dim: usize,
    ) -> PyResult<Self> {
        let inner = an::AnalyticParams::new(n_clients, n_private, samples_per_client, dim, beta2, tau2, gamma2)
            .map_err(py_err)?;
        Ok(PyAnalyticParams { inner })
    }

    #[getter]
    fn sigma_c2(&self) -> f64 {
        self.inner.sigma_c2()
    }

    #[getter]
    fn alpha2(&self) -> f64 {
        self.inner.alpha2()
    }

    fn optimal_ratio(&self) -> PyResult<f64> {
        an::optimal_ratio(&self.inner).map_err(py_err)
    }

    /// Server variance at an arbitrary ratio.
    fn server_variance(&self, r: f64) -> f64 {
        an::server_variance_at_ratio(&self.inner, r)
    }

    fn server_variance_opt(&self) -> f64 {
        an::server_variance_opt(&self.inner)
    }

    fn server_variance_fedavg(&self) -> f64 {
        an::server_variance_fedavg(&self.inner)
    }

    fn server_variance_dpfedavg(&self) -> f64 {
        an::server_variance_dpfedavg(&self.inner)
    }

    fn gap_fedavg(&self) -> f64 {
        an::gap_fedavg(&self.inner)
    }

    fn gap_dpfedavg(&self) -> f64 {
        an::gap_dpfedavg(&self.inner)
    }

    fn lambda_star_np(&self) -> PyResult<f64> {
        an::lambda_star_np(&self.inner).map_err(py_err)
    }

    fn lambda_star_p(&self) -> PyResult<f64> {
        an::lambda_star_p(&self.inner).map_err(py_err)
    }

    fn lambda_star_general(&self, is_private: bool, r: f64) -> PyResult<f64> {
        an::lambda_star_general(&self.inner, is_private, r).map_err(py_err)
    }

    #[pyo3(signature = (r, trials=200_000, seed=0))]
    fn monte_carlo_server_variance(&self, py: Python<'_>, r: f64, trials: usize, seed: u64) -> PyResult<f64> {
        let p = self.inner;
        py.detach(|| simulate::monte_carlo_server_variance(&p, r, trials, seed)).map_err(py_err)
    }

    /// `[(lambda, mean loss)]` for a focal client under ratio `r`.
    #[pyo3(signature = (focal_private, r, lambdas, trials=200_000, seed=0))]
    fn lambda_sweep(
        &self,
        py: Python<'_>,
        focal_private: bool,
        r: f64,
        lambdas: Vec<f64>,
        trials: usize,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64)>> {
        let p = self.inner;
        py.detach(|| simulate::lambda_sweep(&p, focal_private, r, &lambdas, trials, seed)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "AnalyticParams(n_clients={}, n_private={}, beta2={}, tau2={}, gamma2={}, samples_per_client={}, dim={})",
            p.n_clients, p.n_private, p.beta2, p.tau2, p.gamma2, p.samples_per_client, p.dim
        )
    }
}

/// Running Rényi-DP totals over training rounds.
#[pyclass(name = "PrivacyLedger", module = "feo2")]
struct PyPrivacyLedger {
    inner: privacy::PrivacyLedger,
}

#[pymethods]
impl PyPrivacyLedger {
    #[new]
    fn new() -> Self {
        PyPrivacyLedger { inner: privacy::PrivacyLedger::default() }
    }

    #[pyo3(signature = (q, z, rounds=1))]
    fn account(&mut self, q: f64, z: f64, rounds: usize) -> PyResult<()> {
        self.inner.account_rounds(q, z, rounds).map_err(py_err)
    }

    /// `(epsilon, best order)` at the given delta.
    fn epsilon(&self, delta: f64) -> PyResult<(f64, f64)> {
        self.inner.epsilon(delta).map_err(py_err)
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.inner.rounds_recorded
    }
}

/// A fully resolved experiment configuration.
#[pyclass(name = "Experiment", module = "feo2", frozen)]
struct PyExperiment {
    cfg: simulate::ExperimentConfig,
}

fn report_dict<'py>(py: Python<'py>, r: &RoundReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("S", r.clip_norm)?;
    d.set_item("N_p_t", r.n_private)?;
    d.set_item("N_np_t", r.n_nonprivate)?;
    for (k, v) in [
        ("acc_g", r.acc_g),
        ("acc_g_p", r.acc_g_p),
        ("acc_g_np", r.acc_g_np),
        ("acc_l_p", r.acc_l_p),
        ("acc_l_np", r.acc_l_np),
        ("delta_g", r.delta_g),
        ("delta_l", r.delta_l),
    ] {
        d.set_item(k, v)?;
    }
    d.set_item("epsilon", r.epsilon)?;
    Ok(d)
}

#[pymethods]
impl PyExperiment {
    /// Load a TOML or JSON config file.
    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyExperiment { cfg: parse_config(&path).map_err(cli_err)? })
    }

    /// Parse config text; `format` is "toml" or "json".
    #[staticmethod]
    #[pyo3(signature = (text, format="toml"))]
    fn from_str(text: &str, format: &str) -> PyResult<Self> {
        let format = match format {
            "toml" => Format::Toml,
            "json" => Format::Json,
            other => return Err(PyValueError::new_err(format!("unknown format {other:?}"))),
        };
        Ok(PyExperiment { cfg: parse_config_str(text, format).map_err(cli_err)? })
    }

    fn to_toml(&self) -> String {
        render_toml(&self.cfg)
    }

    fn to_json(&self) -> String {
        render_json(&self.cfg)
    }

    #[getter]
    fn rounds(&self) -> usize {
        self.cfg.rounds
    }

    /// Run every round and return one dict per round.
    #[pyo3(signature = (workers=1))]
    fn run<'py>(&self, py: Python<'py>, workers: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = self.cfg.clone();
        let reports = py.detach(|| simulate::run_experiment_with_workers(&cfg, workers)).map_err(py_err)?;
        reports.iter().map(|r| report_dict(py, r)).collect()
    }
}

/// Project `v` onto the ball of radius `s`; returns the vector and whether
/// it was already inside.
#[pyfunction]
fn clip(v: Vec<f64>, s: f64) -> (Vec<f64>, bool) {
    let (out, inside) = privacy::clip(&ModelVector::new(v), s);
    (out.into_inner(), inside)
}

/// Mix the two group means with ratio `r`.
#[pyfunction]
#[pyo3(signature = (delta_np, delta_p, n_np, n_p, r))]
fn feo2_combine(delta_np: Option<Vec<f64>>, delta_p: Option<Vec<f64>>, n_np: usize, n_p: usize, r: f64) -> PyResult<Vec<f64>> {
    let a = delta_np.map(ModelVector::new);
    let b = delta_p.map(ModelVector::new);
    aggregation::feo2_combine(a.as_ref(), b.as_ref(), n_np, n_p, r)
        .map(ModelVector::into_inner)
        .map_err(py_err)
}

#[pyfunction]
fn ditto_closed_form(local_estimate: Vec<f64>, global: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    personalization::ditto_closed_form(&ModelVector::new(local_estimate), &ModelVector::new(global), lam)
        .map(ModelVector::into_inner)
        .map_err(py_err)
}

#[pyfunction]
fn subsampled_gaussian_rdp(q: f64, z: f64, order: f64) -> f64 {
    privacy::subsampled_gaussian_rdp(q, z, order)
}

#[pyfunction]
fn epsilon_for(q: f64, z: f64, rounds: usize, delta: f64) -> PyResult<f64> {
    privacy::epsilon_for(q, z, rounds, delta).map_err(py_err)
}

#[pyfunction]
fn solve_noise_multiplier(epsilon: f64, delta: f64, q: f64, rounds: usize) -> PyResult<f64> {
    privacy::solve_noise_multiplier(epsilon, delta, q, rounds).map_err(py_err)
}

#[pymodule]
fn feo2(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAnalyticParams>()?;
    m.add_class::<PyPrivacyLedger>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(clip, m)?)?;
    m.add_function(wrap_pyfunction!(feo2_combine, m)?)?;
    m.add_function(wrap_pyfunction!(ditto_closed_form, m)?)?;
    m.add_function(wrap_pyfunction!(subsampled_gaussian_rdp, m)?)?;
    m.add_function(wrap_pyfunction!(epsilon_for, m)?)?;
    m.add_function(wrap_pyfunction!(solve_noise_multiplier, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
