//! Python bindings for `efkf`.
//!
//! Vectors are plain lists of floats and matrices are lists of rows.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use efkf::baselines::{self, UkfParams};
use efkf::bench::{table_rows, BenchConfig};
use efkf::energy::{self, AlphaConfig as CoreAlphaConfig};
use efkf::gaussian::{self, GaussianBelief as CoreBelief};
use efkf::gradcheck::{run_gradcheck, GradcheckOptions};
use efkf::model::MeasurementModel as CoreModel;
use efkf::tracking::{self, benchmark_table, Scenario};
use efkf::FilterError;

fn to_py(e: FilterError) -> PyErr {
    match e {
        FilterError::InvalidConfig(_) | FilterError::DimensionMismatch { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("matrix rows have unequal lengths"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Gaussian belief `N(mean, cov)`.
#[pyclass(module = "pyefkf", frozen, skip_from_py_object)]
#[derive(Clone)]
struct GaussianBelief {
    inner: CoreBelief,
}

#[pymethods]
impl GaussianBelief {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = CoreBelief::new(vector(mean), matrix(cov)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean().iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.cov())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&vector(x)).map_err(to_py)
    }

    /// `KL[self || other]`.
    fn kl_divergence(&self, other: &GaussianBelief) -> PyResult<f64> {
        gaussian::kl_divergence(&self.inner, &other.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("GaussianBelief(mean={:?}, cov={:?})", self.mean(), self.cov())
    }
}

/// Hyperparameters of the energy-minimization update.
#[pyclass(module = "pyefkf", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct AlphaConfig {
    alpha: f64,
    samples: usize,
    iters: usize,
    step0: f64,
    step_decay: f64,
    seed: u64,
    fixed_crn: bool,
    standardized_draws: bool,
}

impl AlphaConfig {
    fn core(&self) -> CoreAlphaConfig {
        CoreAlphaConfig {
            alpha: self.alpha,
            samples: self.samples,
            iters: self.iters,
            step0: self.step0,
            step_decay: self.step_decay,
            seed: self.seed,
            fixed_crn: self.fixed_crn,
            standardized_draws: self.standardized_draws,
        }
    }
}

#[pymethods]
impl AlphaConfig {
    #[new]
    #[pyo3(signature = (alpha=None, samples=None, iters=None, step0=None, step_decay=None, seed=None, fixed_crn=None, standardized_draws=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        alpha: Option<f64>,
        samples: Option<usize>,
        iters: Option<usize>,
        step0: Option<f64>,
        step_decay: Option<f64>,
        seed: Option<u64>,
        fixed_crn: Option<bool>,
        standardized_draws: Option<bool>,
    ) -> PyResult<Self> {
        let d = CoreAlphaConfig::default();
        let cfg = Self {
            alpha: alpha.unwrap_or(d.alpha),
            samples: samples.unwrap_or(d.samples),
            iters: iters.unwrap_or(d.iters),
            step0: step0.unwrap_or(d.step0),
            step_decay: step_decay.unwrap_or(d.step_decay),
            seed: seed.unwrap_or(d.seed),
            fixed_crn: fixed_crn.unwrap_or(d.fixed_crn),
            standardized_draws: standardized_draws.unwrap_or(d.standardized_draws),
        };
        cfg.core().validate().map_err(to_py)?;
        Ok(cfg)
    }

    fn __repr__(&self) -> String {
        format!(
            "AlphaConfig(alpha={}, samples={}, iters={}, step0={}, step_decay={}, seed={}, fixed_crn={}, standardized_draws={})",
            self.alpha, self.samples, self.iters, self.step0, self.step_decay, self.seed,
            self.fixed_crn, self.standardized_draws
        )
    }
}

/// Measurement model `y = h(x) + v`.
#[pyclass(module = "pyefkf", frozen)]
struct MeasurementModel {
    inner: CoreModel,
}

#[pymethods]
impl MeasurementModel {
    /// `h(x) = H x`.
    #[staticmethod]
    fn linear(h: Vec<Vec<f64>>, noise_cov: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = CoreModel::linear(matrix(h)?, matrix(noise_cov)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Ranges from the planar position `(x[ix], x[iy])` to each sensor.
    #[staticmethod]
    #[pyo3(signature = (sensors, noise_cov, state_dim=4, position_index=(0, 2)))]
    fn range(
        sensors: Vec<[f64; 2]>,
        noise_cov: Vec<Vec<f64>>,
        state_dim: usize,
        position_index: (usize, usize),
    ) -> PyResult<Self> {
        let inner = tracking::range_model(sensors, matrix(noise_cov)?, state_dim, position_index).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    fn eval(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check_state(&x)?;
        Ok(self.inner.eval(&vector(x)).iter().copied().collect())
    }

    fn jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.check_state(&x)?;
        Ok(rows_of(&self.inner.jacobian(&vector(x))))
    }
}

impl MeasurementModel {
    fn check_state(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.inner.state_dim() {
            return Err(PyValueError::new_err(format!(
                "state has length {}, expected {}",
                x.len(),
                self.inner.state_dim()
            )));
        }
        Ok(())
    }
}

fn wrap(inner: CoreBelief) -> GaussianBelief {
    GaussianBelief { inner }
}

#[pyfunction]
fn kalman_update(
    prior: &GaussianBelief,
    y: Vec<f64>,
    h: Vec<Vec<f64>>,
    noise_cov: Vec<Vec<f64>>,
) -> PyResult<GaussianBelief> {
    baselines::kalman_update(&prior.inner, &vector(y), &matrix(h)?, &matrix(noise_cov)?)
        .map(wrap)
        .map_err(to_py)
}

#[pyfunction]
fn ekf_update(prior: &GaussianBelief, y: Vec<f64>, model: &MeasurementModel) -> PyResult<GaussianBelief> {
    baselines::ekf_update(&prior.inner, &vector(y), &model.inner)
        .map(wrap)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (prior, y, model, spread=0.5, beta=2.0, kappa=None))]
fn ukf_update(
    py: Python<'_>,
    prior: &GaussianBelief,
    y: Vec<f64>,
    model: &MeasurementModel,
    spread: f64,
    beta: f64,
    kappa: Option<f64>,
) -> PyResult<GaussianBelief> {
    let params = UkfParams {
        spread,
        beta,
        kappa: kappa.unwrap_or(3.0 - prior.inner.dim() as f64),
    };
    let y = vector(y);
    py.detach(|| baselines::ukf_update(&prior.inner, &y, &model.inner, &params))
        .map(wrap)
        .map_err(to_py)
}

/// Runs the energy-minimization update; returns the posterior and the energy
/// at each iteration.
#[pyfunction]
fn efkf_update(
    py: Python<'_>,
    prior: &GaussianBelief,
    y: Vec<f64>,
    model: &MeasurementModel,
    config: &AlphaConfig,
) -> PyResult<(GaussianBelief, Vec<f64>)> {
    let y = vector(y);
    let cfg = config.core();
    let (post, trace) = py
        .detach(|| energy::efkf_update(&prior.inner, &y, &model.inner, &cfg))
        .map_err(to_py)?;
    let energies = trace.records.iter().map(|r| r.energy).collect();
    Ok((wrap(post), energies))
}

/// Energy estimate at the given standard-normal draws (`S x d`).
#[pyfunction]
fn energy_estimate(
    eps: Vec<Vec<f64>>,
    y: Vec<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    alpha: f64,
) -> PyResult<f64> {
    energy::energy_estimate(&matrix(eps)?, &vector(y), &model.inner, &q.inner, &prior.inner, alpha)
        .map(|e| e.value)
        .map_err(to_py)
}

/// Gradients of the energy estimate with respect to the mean and covariance of `q`.
#[pyfunction]
fn energy_gradients(
    eps: Vec<Vec<f64>>,
    y: Vec<f64>,
    model: &MeasurementModel,
    q: &GaussianBelief,
    prior: &GaussianBelief,
    alpha: f64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let g = energy::energy_gradients(&matrix(eps)?, &vector(y), &model.inner, &q.inner, &prior.inner, alpha)
        .map_err(to_py)?;
    Ok((g.mean.iter().copied().collect(), rows_of(&g.cov)))
}

#[pyfunction]
fn predict(
    posterior: &GaussianBelief,
    transition: Vec<Vec<f64>>,
    process_noise: Vec<Vec<f64>>,
) -> PyResult<GaussianBelief> {
    energy::predict(&posterior.inner, &matrix(transition)?, &matrix(process_noise)?)
        .map(wrap)
        .map_err(to_py)
}

fn bench_config(config: &str) -> PyResult<BenchConfig> {
    BenchConfig::from_toml_str(config).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Simulates one run of the tracking scenario described by a TOML config
/// (empty string for the defaults). Returns `(truth, observations)`.
#[pyfunction]
#[pyo3(signature = (run=0, config=""))]
fn simulate_run(run: usize, config: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let scenario: Scenario = bench_config(config)?
        .scenario()
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let data = tracking::simulate_run(&scenario, run).map_err(to_py)?;
    let obs = data.observations.iter().map(|o| o.iter().copied().collect()).collect();
    Ok((rows_of(&data.truth), obs))
}

/// Runs the tracking benchmark and returns one dict per table row.
#[pyfunction]
#[pyo3(signature = (config=""))]
fn benchmark(py: Python<'_>, config: &str) -> PyResult<Vec<Py<PyAny>>> {
    let cfg = bench_config(config)?;
    let scenario = cfg.scenario().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let filters = cfg.filter_specs().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let result = py.detach(|| benchmark_table(&scenario, &filters)).map_err(to_py)?;
    table_rows(&result)
        .into_iter()
        .map(|r| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("filter", r.filter)?;
            d.set_item("assumed_q", r.assumed_q_label)?;
            d.set_item("mean_rmse", r.mean_rmse)?;
            d.set_item("stderr_rmse", r.stderr_rmse)?;
            d.set_item("n_failed_runs", r.n_failed_runs)?;
            Ok(d.into_any().unbind())
        })
        .collect()
}

/// Finite-difference gradient check; returns `(passed, worst_mean_err, worst_cov_err)`.
#[pyfunction]
#[pyo3(signature = (dims=vec![2, 4], trials=24, seed=20_190_512))]
fn gradcheck(py: Python<'_>, dims: Vec<usize>, trials: usize, seed: u64) -> PyResult<(bool, f64, f64)> {
    let opts = GradcheckOptions {
        dims,
        trials,
        seed,
        corrupt: false,
    };
    let report = py.detach(|| run_gradcheck(&opts)).map_err(to_py)?;
    Ok((report.passed(), report.worst_mean_error(), report.worst_cov_error()))
}

#[pymodule]
fn pyefkf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<GaussianBelief>()?;
    m.add_class::<AlphaConfig>()?;
    m.add_class::<MeasurementModel>()?;
    m.add_function(wrap_pyfunction!(kalman_update, m)?)?;
    m.add_function(wrap_pyfunction!(ekf_update, m)?)?;
    m.add_function(wrap_pyfunction!(ukf_update, m)?)?;
    m.add_function(wrap_pyfunction!(efkf_update, m)?)?;
    m.add_function(wrap_pyfunction!(energy_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(energy_gradients, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_run, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
