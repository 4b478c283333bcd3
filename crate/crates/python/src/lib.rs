//! Python bindings: tensors, normalization layers, dataset generation,
//! gradient checks and the training harness.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use normlab::cli::{self, ExperimentConfig, Split, Task};
use normlab::gradcheck::{self, Suite};
use normlab::norm::{self, AffineKind, StatDomain};
use normlab::param::{Mode, Module};

fn err(e: normlab::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn domain(name: &str, groups: Option<usize>) -> PyResult<StatDomain> {
    Ok(match (name, groups) {
        ("batch", _) => StatDomain::Batch,
        ("layer", _) => StatDomain::Layer,
        ("instance", _) => StatDomain::Instance,
        ("group", Some(g)) => StatDomain::Group(g),
        ("group", None) => StatDomain::Group(norm::DEFAULT_GROUPS),
        _ => return Err(PyValueError::new_err(format!("unknown domain `{name}`"))),
    })
}

/// Dense row-major float64 tensor.
#[pyclass(name = "Tensor", module = "normlab_py")]
struct PyTensor {
    inner: normlab::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        normlab::Tensor::new(shape, data)
            .map(|inner| PyTensor { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn randn(shape: Vec<usize>, seed: u64) -> PyResult<Self> {
        normlab::Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
            .map(|inner| PyTensor { inner })
            .map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// `(mu, sigma)` of `x` (NCHW) over the given statistics domain.
#[pyfunction]
#[pyo3(signature = (x, domain_name, groups=None, eps=norm::DEFAULT_EPS))]
fn compute_stats(
    x: &PyTensor,
    domain_name: &str,
    groups: Option<usize>,
    eps: f64,
) -> PyResult<(PyTensor, PyTensor)> {
    let s = norm::compute_stats(&x.inner, domain(domain_name, groups)?, eps).map_err(err)?;
    Ok((PyTensor { inner: s.mu }, PyTensor { inner: s.sigma }))
}

/// Normalization layer; `affine` is "none", "fixed" or "conditional".
#[pyclass(name = "NormLayer", module = "normlab_py")]
struct PyNormLayer {
    inner: norm::NormLayer,
}

#[pymethods]
impl PyNormLayer {
    #[new]
    #[pyo3(signature = (channels, domain_name, groups=None, eps=norm::DEFAULT_EPS, affine="fixed", cond_dim=0))]
    fn new(
        channels: usize,
        domain_name: &str,
        groups: Option<usize>,
        eps: f64,
        affine: &str,
        cond_dim: usize,
    ) -> PyResult<Self> {
        let kind = match affine {
            "none" => AffineKind::None,
            "fixed" => AffineKind::Fixed,
            "conditional" => AffineKind::Conditional { cond_dim },
            _ => return Err(PyValueError::new_err(format!("unknown affine `{affine}`"))),
        };
        norm::NormLayer::new("norm", channels, domain(domain_name, groups)?, eps, kind)
            .map(|inner| PyNormLayer { inner })
            .map_err(err)
    }

    #[pyo3(signature = (x, cond=None))]
    fn forward(&mut self, x: &PyTensor, cond: Option<&PyTensor>) -> PyResult<PyTensor> {
        norm::norm_forward(&mut self.inner, &x.inner, cond.map(|c| &c.inner))
            .map(|inner| PyTensor { inner })
            .map_err(err)
    }

    fn train(&mut self) {
        self.inner.set_mode(Mode::Train);
    }

    fn eval(&mut self) {
        self.inner.set_mode(Mode::Eval);
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params().iter().map(|p| p.name.clone()).collect()
    }
}

fn task(kind: &str) -> PyResult<Task> {
    match kind {
        "sqoop" => Ok(Task::Sqoop),
        "fewshot" => Ok(Task::Fewshot),
        _ => Err(PyValueError::new_err(format!("unknown kind `{kind}`"))),
    }
}

/// Writes a dataset to `out`; `config` is an optional JSON config path.
#[pyfunction]
#[pyo3(signature = (kind, out, config=None, seed=None))]
fn gen_data(kind: &str, out: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<()> {
    cli::gen_data(task(kind)?, config.as_deref(), seed, &out).map_err(err)
}

/// Runs gradient-check suites; returns `(passed, report)`.
#[pyfunction]
#[pyo3(signature = (suites=None))]
fn run_gradcheck(suites: Option<Vec<String>>) -> PyResult<(bool, String)> {
    let suites = match suites {
        None => Suite::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                Suite::parse(n).ok_or_else(|| PyValueError::new_err(format!("unknown suite `{n}`")))
            })
            .collect::<PyResult<_>>()?,
    };
    let report = gradcheck::run(&suites, None);
    Ok((report.passed(), report.render()))
}

/// Trains from a JSON config string; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out, emit_plotdata=false))]
fn train(py: Python<'_>, config_json: &str, out: PathBuf, emit_plotdata: bool) -> PyResult<String> {
    let cfg: ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = py
        .detach(|| cli::train(&cfg, &out, emit_plotdata))
        .map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Scores a checkpoint directory on one split; returns `(loss, accuracy)`.
#[pyfunction]
#[pyo3(signature = (checkpoint, split="test"))]
fn evaluate(checkpoint: PathBuf, split: &str) -> PyResult<(f64, f64)> {
    let split = Split::parse(split)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split `{split}`")))?;
    let row = cli::evaluate_checkpoint(&checkpoint, split, None).map_err(err)?;
    Ok((row.loss, row.accuracy))
}

#[pymodule]
fn normlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNormLayer>()?;
    m.add_function(wrap_pyfunction!(compute_stats, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
