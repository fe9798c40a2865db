//! Python bindings: datasets, networks, penalties, metrics, temperature
//! scaling and whole experiments driven by JSON configs.

use calibreg::calibration;
use calibreg::cli::{self, ExperimentConfig, MetricOptions};
use calibreg::data::{self, Dataset};
use calibreg::metrics::{self, PredictionLog};
use calibreg::network::{self, Network};
use calibreg::numerics::{Matrix, Rng};
use calibreg::regularizers;
use calibreg::trainer::{self, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: calibreg::Error) -> PyErr {
    match e {
        calibreg::Error::Diverged { .. } | calibreg::Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected a non-empty list of rows"));
    }
    Matrix::from_rows(&rows).map_err(to_py)
}

fn log_of(logits: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> PyResult<PredictionLog> {
    let z = matrix(logits)?;
    PredictionLog::from_logits(&z, labels.as_deref(), None).map_err(to_py)
}

/// A labelled dataset with the descriptor that generated it.
#[pyclass(name = "Dataset", module = "pycalibreg", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (k, n, d, spread, seed=0))]
    fn blobs(k: usize, n: usize, d: usize, spread: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::make_blobs(k, n, d, spread, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n, noise, seed=0))]
    fn two_moons(n: usize, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::make_two_moons(n, noise, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::from_csv(text).map_err(to_py)?,
        })
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.inner.inputs.to_rows()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Posterior class probabilities under the generating mixture.
    fn true_posterior(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        data::true_posterior(&self.inner.descriptor, &x).map_err(to_py)
    }

    /// Train/validation/test partition with the given fractions.
    #[pyo3(signature = (train=0.8, val=0.1, seed=0))]
    fn split(&self, train: f64, val: f64, seed: u64) -> PyResult<(Self, Self, Self)> {
        let spec = data::SplitSpec {
            train,
            validation: val,
            test: 1.0 - train - val,
            seed,
        };
        let (a, b, c) = data::split(&self.inner, &spec).map_err(to_py)?;
        Ok((Self { inner: a }, Self { inner: b }, Self { inner: c }))
    }
}

/// A multilayer perceptron producing class logits.
#[pyclass(name = "Network", module = "pycalibreg", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Network::from_json(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Network::load(path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn logits(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.inner.logits(&matrix(inputs)?).map_err(to_py)?.to_rows())
    }

    fn predict_proba(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = self.inner.logits(&matrix(inputs)?).map_err(to_py)?;
        Ok(network::softmax(&z).to_rows())
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
}

/// Trains one network; returns it with the per-epoch history as JSON.
#[pyfunction]
fn train(config_json: &str, train_set: &PyDataset, val_set: &PyDataset, test_set: &PyDataset) -> PyResult<(PyNetwork, String)> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (net, history) = trainer::train(&cfg, &train_set.inner, &val_set.inner, &test_set.inner).map_err(to_py)?;
    let history = serde_json::to_string(&history).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyNetwork { inner: net }, history))
}

/// Runs a full experiment config and returns the report as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    let outcome = py.detach(|| cli::run_experiment(&cfg)).map_err(to_py)?;
    Ok(outcome.report.to_json())
}

#[pyfunction]
#[pyo3(signature = (logits, labels, bins=15))]
fn ece(logits: Vec<Vec<f64>>, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    metrics::ece(&log_of(logits, Some(labels))?, bins).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (logits, labels, bins=15))]
fn ecd(logits: Vec<Vec<f64>>, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    metrics::ecd(&log_of(logits, Some(labels))?, bins).map_err(to_py)
}

#[pyfunction]
fn nll(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    metrics::nll(&log_of(logits, Some(labels))?).map_err(to_py)
}

#[pyfunction]
fn accuracy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    log_of(logits, Some(labels))?.accuracy().map_err(to_py)
}

/// Binned area under the F1 curve for separating `positive` rows by confidence.
#[pyfunction]
#[pyo3(signature = (logits, positive, tau=0.5, steps=50))]
fn nbaucc(logits: Vec<Vec<f64>>, positive: Vec<bool>, tau: f64, steps: usize) -> PyResult<f64> {
    metrics::nbaucc(&log_of(logits, None)?, &positive, tau, steps).map_err(to_py)
}

#[pyfunction]
fn ll_upper_bound(q: Vec<f64>, phi: Vec<f64>) -> PyResult<f64> {
    metrics::ll_upper_bound(&q, &phi).map_err(to_py)
}

/// Penalty value for `kind` in `l1_norm`, `l2_norm_squared`, `sw1`, `per`.
#[pyfunction]
#[pyo3(signature = (kind, logits, n_projections=256, seed=0))]
fn penalty(kind: &str, logits: Vec<Vec<f64>>, n_projections: usize, seed: u64) -> PyResult<f64> {
    let z = matrix(logits)?;
    let mut rng = Rng::new(seed);
    let v = match kind {
        "l1_norm" => regularizers::lp_penalty(&z, 1),
        "l2_norm_squared" => regularizers::lp_penalty(&z, 2),
        "sw1" => regularizers::sw1_penalty(&z, n_projections, &mut rng),
        "per" => regularizers::per_penalty(&z, n_projections, &mut rng),
        other => return Err(PyValueError::new_err(format!("unknown penalty kind {other:?}"))),
    };
    Ok(v.map_err(to_py)?.value)
}

/// Fits a temperature on held-out logits; returns `tau`.
#[pyfunction]
fn fit_temperature(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    Ok(calibration::fit_temperature(&matrix(logits)?, &labels).map_err(to_py)?.tau)
}

#[pyfunction]
fn apply_temperature(logits: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(calibration::apply_temperature(&matrix(logits)?, tau).map_err(to_py)?.to_rows())
}

/// Temperature scaling of a network on a dataset, as the calibrate command does it.
#[pyfunction]
#[pyo3(signature = (net, dataset, split_half=true, seed=0))]
fn calibrate(net: &PyNetwork, dataset: &PyDataset, split_half: bool, seed: u64) -> PyResult<String> {
    let out = cli::calibrate(&net.inner, &dataset.inner, split_half, seed, &MetricOptions::default()).map_err(to_py)?;
    serde_json::to_string(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn pycalibreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(ecd, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(nbaucc, m)?)?;
    m.add_function(wrap_pyfunction!(ll_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(penalty, m)?)?;
    m.add_function(wrap_pyfunction!(fit_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(apply_temperature, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}
