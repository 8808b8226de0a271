//! Python bindings: spectral diagnostics, losses, datasets, encoders and the
//! experiment runners. Matrices cross the boundary as lists of rows (numpy
//! arrays are accepted on input); reports come back as plain dicts.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rankdebias::data::{gen_colorpoints, make_unbiased_testset, BiasedDataset, GenConfig};
use rankdebias::losses::{self, ContrastiveBatch};
use rankdebias::nn::{checkpoint, DenseNet};
use rankdebias::pipeline::{self, ExperimentConfig};
use rankdebias::{rng, spectral, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Shape { .. } | Error::Format { .. } | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Serializes through JSON into Python objects.
fn pythonize<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_config(json: &str) -> PyResult<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

#[pyfunction]
fn svd_values(m: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let m = matrix(m)?;
    Ok(spectral::svd_values(m.view()).map_err(to_py)?.values().to_vec())
}

/// Entropy of the normalized singular-value distribution of `m`.
#[pyfunction]
fn effective_rank(m: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = matrix(m)?;
    let s = spectral::svd_values(m.view()).map_err(to_py)?;
    spectral::effective_rank(&s).map_err(to_py)
}

#[pyfunction]
fn auto_correlation(z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let z = matrix(z)?;
    Ok(rows(&spectral::auto_correlation(z.view()).map_err(to_py)?.into_inner()))
}

/// Returns `(loss, grad)`.
#[pyfunction]
fn rank_loss(z: Vec<Vec<f64>>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let z = matrix(z)?;
    let (loss, grad) = spectral::rank_loss_with_grad(z.view()).map_err(to_py)?;
    Ok((loss, rows(&grad)))
}

/// Rows `k` and `k + n` of `h` are the two views of sample `k`.
#[pyfunction]
#[pyo3(signature = (h, temperature = losses::DEFAULT_TEMPERATURE))]
fn nt_xent(h: Vec<Vec<f64>>, temperature: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let h = matrix(h)?;
    let batch = ContrastiveBatch::new(h.view(), temperature).map_err(to_py)?;
    let out = losses::nt_xent(&batch).map_err(to_py)?;
    Ok((out.loss, rows(&out.grad)))
}

#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let logits = matrix(logits)?;
    let out = losses::cross_entropy(logits.view(), &labels).map_err(to_py)?;
    Ok((out.loss, rows(&out.grad)))
}

/// Cross-entropy with the samples in `error_set` weighted by `lambda_up`.
#[pyfunction]
fn debias_loss(
    logits: Vec<Vec<f64>>,
    labels: Vec<usize>,
    error_set: Vec<usize>,
    lambda_up: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let logits = matrix(logits)?;
    let spec = losses::UpweightSpec::new(error_set, lambda_up).map_err(to_py)?;
    let out = losses::debias_loss(logits.view(), &labels, &spec).map_err(to_py)?;
    Ok((out.loss, rows(&out.grad)))
}

#[pyclass(name = "Dataset", module = "pyrankdebias", frozen)]
struct PyDataset {
    inner: BiasedDataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic ColorPoints training set.
    #[staticmethod]
    #[pyo3(signature = (n, classes = 10, bias_ratio = 0.99, noise = 0.15, input_dim = 35, modes = 4, seed = 0))]
    fn colorpoints(
        n: usize,
        classes: usize,
        bias_ratio: f64,
        noise: f64,
        input_dim: usize,
        modes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = GenConfig {
            n,
            classes,
            bias_ratio,
            noise,
            input_dim,
            modes,
            seed,
            ..GenConfig::default()
        };
        Ok(Self {
            inner: gen_colorpoints(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: BiasedDataset::load_dir(&dir).map_err(to_py)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save_dir(&dir).map_err(to_py)
    }

    /// Same inputs and targets with bias labels redrawn uniformly.
    fn unbiased(&self, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: make_unbiased_testset(&self.inner, rng::stream_key(seed, "test")).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.inputs().to_owned())
    }

    #[getter]
    fn targets(&self) -> Vec<usize> {
        self.inner.targets().to_vec()
    }

    #[getter]
    fn biases(&self) -> Vec<usize> {
        self.inner.biases().to_vec()
    }

    #[getter]
    fn aligned(&self) -> Vec<bool> {
        self.inner.aligned().to_vec()
    }

    #[getter]
    fn bias_ratio(&self) -> f64 {
        self.inner.bias_ratio()
    }

    fn aligned_count(&self) -> usize {
        self.inner.aligned_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, input_dim={}, classes={}, bias_ratio={})",
            self.inner.len(),
            self.inner.input_dim(),
            self.inner.num_classes(),
            self.inner.bias_ratio()
        )
    }
}

#[pyclass(name = "Encoder", module = "pyrankdebias", frozen)]
struct PyEncoder {
    inner: DenseNet,
}

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = checkpoint::load(&path).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, serde_json::Value::Null).map_err(to_py)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = matrix(x)?;
        Ok(rows(&self.inner.predict(x.view()).map_err(to_py)?))
    }

    /// Bias-probe over target-probe accuracy on `ds` (should be unbiased).
    fn bias_metric(&self, ds: &PyDataset, config: &str, seed: u64) -> PyResult<f64> {
        let cfg = parse_config(config)?;
        pipeline::bias_metric(&self.inner, &ds.inner, &cfg.probe, seed).map_err(to_py)
    }
}

/// Contrastive pretraining on the inputs of `ds`. `role` is "biased" (uses the
/// config's `lambda_reg`) or "main" (no rank penalty). Returns the encoder
/// and the per-epoch log.
#[pyfunction]
fn pretrain(
    py: Python<'_>,
    ds: &PyDataset,
    config: &str,
    role: &str,
    seed: u64,
) -> PyResult<(PyEncoder, Py<PyAny>)> {
    let cfg = parse_config(config)?;
    let aug = cfg.augment_config();
    let run = match role {
        "biased" => pipeline::pretrain_biased,
        "main" => pipeline::pretrain_main,
        other => {
            return Err(PyValueError::new_err(format!(
                "role must be 'biased' or 'main', got {other:?}"
            )))
        }
    };
    let x = ds.inner.inputs();
    let out = py.detach(|| run(x, &aug, &cfg, seed)).map_err(to_py)?;
    let log = pythonize(py, &out.log)?;
    Ok((PyEncoder { inner: out.encoder }, log))
}

/// Supervised ERM with the config's `lambda_reg`; returns the test report.
#[pyfunction]
fn run_erm(py: Python<'_>, config: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let out = py.detach(|| pipeline::run_erm(&cfg, seed)).map_err(to_py)?;
    pythonize(py, &out.report)
}

/// Both stages with debiased linear evaluation; returns the test report.
#[pyfunction]
fn run_defund(py: Python<'_>, config: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let out = py.detach(|| pipeline::run_defund(&cfg, seed)).map_err(to_py)?;
    pythonize(py, &out.report)
}

#[pyfunction]
fn run_ablation(py: Python<'_>, config: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let out = py.detach(|| pipeline::run_ablation(&cfg, seed)).map_err(to_py)?;
    pythonize(py, &out)
}

#[pyfunction]
fn run_semisup(py: Python<'_>, config: &str, seed: u64) -> PyResult<Py<PyAny>> {
    let cfg = parse_config(config)?;
    let out = py.detach(|| pipeline::run_semisup(&cfg, seed)).map_err(to_py)?;
    pythonize(py, &out)
}

/// Full default config as a JSON string, for editing before a run.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string_pretty(&ExperimentConfig::default()).expect("config serializes")
}

#[pymodule]
fn pyrankdebias(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(svd_values, m)?)?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(auto_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(rank_loss, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(debias_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(run_erm, m)?)?;
    m.add_function(wrap_pyfunction!(run_defund, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(run_semisup, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
