//! Python bindings for the `seed_cl` engine.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::seed_cl::config::RunConfig;
use ::seed_cl::error::Error;
use ::seed_cl::gaussian::{self as g, ClassBank, ClassGaussian, RepresentationMode};
use ::seed_cl::inference::{self, EvalMode};
use ::seed_cl::runner::{run_stream, RunHistory, RunOptions};
use ::seed_cl::scenarios::Sample;
use ::seed_cl::state::RunStateFile;
use ::seed_cl::trainer::{EnsembleState, Trainer};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::DimensionMismatch { .. } | Error::TooFewSamples { .. } | Error::NonFiniteInput => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A fitted class distribution.
#[pyclass(name = "Gaussian", frozen, from_py_object)]
#[derive(Clone)]
struct PyGaussian(ClassGaussian);

#[pymethods]
impl PyGaussian {
    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.0.mean().to_vec()
    }

    /// Row-major covariance, or `None` for prototypes.
    #[getter]
    fn cov(&self) -> Option<Vec<Vec<f64>>> {
        let c = self.0.cov()?;
        let n = c.dim();
        Some((0..n).map(|i| (0..n).map(|j| c.get(i, j)).collect()).collect())
    }

    #[getter]
    fn representation(&self) -> &'static str {
        self.0.mode().name()
    }

    fn log_likelihood(&self, x: Vec<f64>) -> PyResult<f64> {
        g::log_likelihood(&self.0, &x).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Gaussian(dim={}, representation={:?})", self.0.dim(), self.0.mode().name())
    }
}

#[pyfunction]
#[pyo3(signature = (points, representation = "full", eps = 1e-4))]
fn fit_gaussian(points: Vec<Vec<f64>>, representation: &str, eps: f64) -> PyResult<PyGaussian> {
    let mode: RepresentationMode = representation.parse().map_err(to_py)?;
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    g::fit_gaussian(&refs, mode, eps).map(PyGaussian).map_err(to_py)
}

#[pyfunction]
fn log_likelihood(gaussian: &PyGaussian, x: Vec<f64>) -> PyResult<f64> {
    gaussian.log_likelihood(x)
}

#[pyfunction]
fn sym_kl(p: &PyGaussian, q: &PyGaussian) -> PyResult<f64> {
    g::sym_kl(&p.0, &q.0).map_err(to_py)
}

/// Summed symmetrized KL over all pairs of `gaussians`.
#[pyfunction]
fn overlap(gaussians: Vec<PyGaussian>) -> PyResult<f64> {
    let mut bank = ClassBank::new();
    for (c, gs) in gaussians.into_iter().enumerate() {
        bank.insert(c, gs.0).map_err(to_py)?;
    }
    let ids: Vec<usize> = bank.classes().collect();
    g::overlap_score(&bank, &ids).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (logits, tau = 1.0))]
fn temp_softmax(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(PyValueError::new_err("tau must be positive"));
    }
    Ok(inference::temp_softmax(&logits, tau))
}

/// Runs a full stream from TOML configuration text and returns the report as JSON.
#[pyfunction]
fn run(py: Python<'_>, config: &str) -> PyResult<String> {
    let config = config.to_owned();
    py.detach(move || {
        let cfg = RunConfig::from_toml(&config)?;
        cfg.validate()?;
        let tasks = cfg.tasks()?;
        let trainer = Trainer::new(cfg.training.clone(), cfg.seeds())?;
        let mut state = EnsembleState::new(&cfg.net(), cfg.training.experts)?;
        let options = RunOptions {
            joint_reference: cfg.output.joint_reference,
            trace: false,
        };
        let out = run_stream(&trainer, &mut state, &mut RunHistory::default(), &tasks, options)?;
        Ok(serde_json::to_string(&out.report).expect("report serializes"))
    })
    .map_err(to_py)
}

/// A trained ensemble loaded from a saved run state.
#[pyclass(name = "Ensemble", frozen)]
struct PyEnsemble {
    file: RunStateFile,
    tau: f64,
}

impl PyEnsemble {
    fn mode(&self, task: Option<usize>) -> PyResult<EvalMode> {
        match task {
            None => Ok(EvalMode::TaskAgnostic),
            Some(0) => Err(PyValueError::new_err("tasks are numbered from 1")),
            Some(t) => Ok(EvalMode::TaskAware(t - 1)),
        }
    }
}

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let file = RunStateFile::load(&path).map_err(to_py)?;
        let tau = RunConfig::from_toml(&file.config).map(|c| c.training.tau).unwrap_or(1.0);
        Ok(Self { file, tau })
    }

    #[getter]
    fn experts(&self) -> usize {
        self.file.state.experts()
    }

    #[getter]
    fn tasks(&self) -> usize {
        self.file.state.tasks_completed()
    }

    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.file.state.seen_classes()
    }

    #[getter]
    fn config(&self) -> &str {
        &self.file.config
    }

    /// Predicted class of `x`; `task` (1-based) restricts the candidates.
    #[pyo3(signature = (x, task = None, tau = None))]
    fn predict(&self, x: Vec<f64>, task: Option<usize>, tau: Option<f64>) -> PyResult<usize> {
        let mode = self.mode(task)?;
        inference::predict(&self.file.state, &x, mode, tau.unwrap_or(self.tau))
            .map(|t| t.predicted)
            .map_err(to_py)
    }

    /// Full prediction trace as JSON.
    #[pyo3(signature = (x, task = None, tau = None))]
    fn explain(&self, x: Vec<f64>, task: Option<usize>, tau: Option<f64>) -> PyResult<String> {
        let mode = self.mode(task)?;
        let t = inference::predict(&self.file.state, &x, mode, tau.unwrap_or(self.tau)).map_err(to_py)?;
        Ok(serde_json::to_string(&t).expect("trace serializes"))
    }

    /// Accuracy on `(inputs, labels)`.
    #[pyo3(signature = (inputs, labels, task = None, tau = None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        task: Option<usize>,
        tau: Option<f64>,
    ) -> PyResult<f64> {
        if inputs.len() != labels.len() {
            return Err(PyValueError::new_err("inputs and labels differ in length"));
        }
        let mode = self.mode(task)?;
        let samples: Vec<Sample> = inputs
            .into_iter()
            .zip(labels)
            .map(|(x, class)| Sample { x, class })
            .collect();
        let tau = tau.unwrap_or(self.tau);
        let state = &self.file.state;
        py.detach(|| inference::evaluate(state, &samples, mode, tau)).map_err(to_py)
    }
}

#[pymodule]
fn seed_cl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(fit_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(sym_kl, m)?)?;
    m.add_function(wrap_pyfunction!(overlap, m)?)?;
    m.add_function(wrap_pyfunction!(temp_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
