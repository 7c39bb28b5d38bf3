//! Python bindings for the fedrec simulator.
//!
//! Exposes dataset loading and synthesis, experiment configuration, full
//! training runs with trace collection, evaluation, and checkpoint files.
//! Build as `fedrec_py` (cdylib); see python/smoke_test.py at the workspace
//! root for a usage tour.

use fedrec::checkpoint;
use fedrec::client::OptimizerKind;
use fedrec::dataset::{self, DatasetSplit};
use fedrec::error::Error;
use fedrec::eval::evaluate_detailed;
use fedrec::protocol::{
    self, ExperimentConfig, SchemeSpec, TraceRecord, TrainState,
};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;
use std::sync::Arc;

/// Maps library errors onto Python exception types along the same lines as
/// the CLI's exit codes: validation -> ValueError, divergence -> RuntimeError,
/// I/O and checkpoint -> IOError.
fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => PyRuntimeError::new_err(msg),
        3 => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

/// A train/test split of one interaction dataset.
#[pyclass(name = "DatasetSplit", module = "fedrec_py", skip_from_py_object)]
#[derive(Clone)]
struct PyDatasetSplit {
    inner: DatasetSplit,
}

#[pymethods]
impl PyDatasetSplit {
    #[getter]
    fn num_users(&self) -> usize {
        self.inner.train.num_users
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.train.num_items
    }

    /// Ascending training interactions of one user.
    fn train_items(&self, user: usize) -> PyResult<Vec<usize>> {
        self.row(user).map(|_| self.inner.train.user_items[user].clone())
    }

    /// Ascending held-out items of one user (possibly empty).
    fn test_items(&self, user: usize) -> PyResult<Vec<usize>> {
        self.row(user).map(|_| self.inner.test_items[user].clone())
    }

    /// Writes the split as the two text files the CLI consumes.
    fn save(&self, train_path: PathBuf, test_path: PathBuf) -> PyResult<()> {
        self.inner.save(&train_path, &test_path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let train_edges: usize = self.inner.train.user_items.iter().map(|l| l.len()).sum();
        let test_edges: usize = self.inner.test_items.iter().map(|l| l.len()).sum();
        format!(
            "DatasetSplit(num_users={}, num_items={}, train_edges={train_edges}, test_edges={test_edges})",
            self.num_users(),
            self.num_items()
        )
    }
}

impl PyDatasetSplit {
    fn row(&self, user: usize) -> PyResult<()> {
        if user >= self.inner.train.num_users {
            return Err(PyValueError::new_err(format!(
                "user {user} outside dataset of {}",
                self.inner.train.num_users
            )));
        }
        Ok(())
    }
}

fn scheme_from_py(value: &Bound<'_, PyAny>) -> PyResult<SchemeSpec> {
    if let Ok(name) = value.extract::<String>() {
        return match name.as_str() {
            "mean" => Ok(SchemeSpec::Mean),
            "last_pair" => Ok(SchemeSpec::LastPair),
            "concat" => Ok(SchemeSpec::Concat),
            other => Err(PyValueError::new_err(format!(
                "scheme {other:?} is not one of 'mean', 'last_pair', 'concat' or a weight list"
            ))),
        };
    }
    let weights = value.extract::<Vec<f64>>().map_err(|_| {
        PyValueError::new_err("scheme must be a name string or a list of layer weights")
    })?;
    Ok(SchemeSpec::WeightedMean(weights))
}

fn scheme_to_py(py: Python<'_>, scheme: &SchemeSpec) -> Py<PyAny> {
    match scheme {
        SchemeSpec::Mean => "mean".into_pyobject(py).unwrap().into_any().unbind(),
        SchemeSpec::LastPair => "last_pair".into_pyobject(py).unwrap().into_any().unbind(),
        SchemeSpec::Concat => "concat".into_pyobject(py).unwrap().into_any().unbind(),
        SchemeSpec::WeightedMean(w) => w.clone().into_pyobject(py).unwrap().into_any().unbind(),
    }
}

/// Everything a training run depends on besides the dataset.
#[pyclass(name = "ExperimentConfig", module = "fedrec_py", skip_from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[new]
    #[pyo3(signature = (
        *,
        epochs,
        users_per_epoch,
        local_iters,
        latent_depth,
        dim,
        local_rate,
        reg_weight,
        master_seed,
        server_rate = None,
        init_scale = 0.1,
        neg_count = 32,
        scheme = None,
        optimizer = "adaptive",
        eval_every = 200,
        eval_cut = 20,
        frac_bits = 24,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        epochs: usize,
        users_per_epoch: usize,
        local_iters: usize,
        latent_depth: usize,
        dim: usize,
        local_rate: f64,
        reg_weight: f64,
        master_seed: u64,
        server_rate: Option<f64>,
        init_scale: f64,
        neg_count: usize,
        scheme: Option<&Bound<'_, PyAny>>,
        optimizer: &str,
        eval_every: usize,
        eval_cut: usize,
        frac_bits: u32,
    ) -> PyResult<Self> {
        let scheme = match scheme {
            Some(value) => scheme_from_py(value)?,
            None => SchemeSpec::Mean,
        };
        let optimizer = match optimizer {
            "plain" => OptimizerKind::Plain,
            "adaptive" => OptimizerKind::Adaptive,
            other => {
                return Err(PyValueError::new_err(format!(
                    "optimizer {other:?} is not 'plain' or 'adaptive'"
                )))
            }
        };
        Ok(Self {
            inner: ExperimentConfig {
                epochs,
                users_per_epoch,
                local_iters,
                latent_depth,
                dim,
                local_rate,
                server_rate,
                reg_weight,
                init_scale,
                neg_count,
                scheme,
                optimizer,
                eval_every,
                eval_cut,
                frac_bits,
                master_seed,
            },
        })
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn users_per_epoch(&self) -> usize {
        self.inner.users_per_epoch
    }

    #[getter]
    fn local_iters(&self) -> usize {
        self.inner.local_iters
    }

    #[getter]
    fn latent_depth(&self) -> usize {
        self.inner.latent_depth
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn local_rate(&self) -> f64 {
        self.inner.local_rate
    }

    #[getter]
    fn server_rate(&self) -> Option<f64> {
        self.inner.server_rate
    }

    /// Server rate with the cohort-mean default resolved.
    #[getter]
    fn resolved_server_rate(&self) -> f64 {
        self.inner.resolved_server_rate()
    }

    #[getter]
    fn reg_weight(&self) -> f64 {
        self.inner.reg_weight
    }

    #[getter]
    fn init_scale(&self) -> f64 {
        self.inner.init_scale
    }

    #[getter]
    fn neg_count(&self) -> usize {
        self.inner.neg_count
    }

    #[getter]
    fn scheme(&self, py: Python<'_>) -> Py<PyAny> {
        scheme_to_py(py, &self.inner.scheme)
    }

    #[getter]
    fn optimizer(&self) -> &'static str {
        match self.inner.optimizer {
            OptimizerKind::Plain => "plain",
            OptimizerKind::Adaptive => "adaptive",
        }
    }

    #[getter]
    fn eval_every(&self) -> usize {
        self.inner.eval_every
    }

    #[getter]
    fn eval_cut(&self) -> usize {
        self.inner.eval_cut
    }

    #[getter]
    fn frac_bits(&self) -> u32 {
        self.inner.frac_bits
    }

    #[getter]
    fn master_seed(&self) -> u64 {
        self.inner.master_seed
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Trained state plus the metric trace that produced it.
#[pyclass(name = "TrainState", module = "fedrec_py")]
struct PyTrainState {
    inner: TrainState,
    trace: Vec<TraceRecord>,
}

#[pymethods]
impl PyTrainState {
    #[getter]
    fn completed_epochs(&self) -> usize {
        self.inner.completed_epochs
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.clients.len()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.store.num_items()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.store.dim()
    }

    #[getter]
    fn latent_depth(&self) -> usize {
        self.inner.store.depth()
    }

    /// Trace records as (epoch, loss, recall, ndcg) tuples; entries are None
    /// where the run recorded nothing (warm-up loss, non-evaluation epochs).
    fn trace(&self) -> Vec<(usize, Option<f64>, Option<f64>, Option<f64>)> {
        self.trace
            .iter()
            .map(|r| (r.epoch, r.loss, r.recall, r.ndcg))
            .collect()
    }

    /// Ranks every unseen item per user and averages recall and NDCG at
    /// `cut` over users with held-out items. Returns a dict; with
    /// `per_user=True` adds a "users" list of (user, recall, ndcg).
    #[pyo3(signature = (split, *, cut = 20, scheme = None, per_user = false))]
    fn evaluate(
        &self,
        py: Python<'_>,
        split: &PyDatasetSplit,
        cut: usize,
        scheme: Option<&Bound<'_, PyAny>>,
        per_user: bool,
    ) -> PyResult<Py<PyDict>> {
        let spec = match scheme {
            Some(value) => scheme_from_py(value)?,
            None => SchemeSpec::Mean,
        };
        let resolved = spec.resolve(self.inner.store.depth()).map_err(py_err)?;
        let (report, table) = evaluate_detailed(
            &self.inner.store,
            &self.inner.clients,
            &split.inner,
            &resolved,
            cut,
        )
        .map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("cut", report.cut)?;
        out.set_item("users_evaluated", report.users_evaluated)?;
        out.set_item("mean_recall", report.mean_recall)?;
        out.set_item("mean_ndcg", report.mean_ndcg)?;
        if per_user {
            let rows: Vec<(usize, f64, f64)> =
                table.iter().map(|m| (m.user_id, m.recall, m.ndcg)).collect();
            out.set_item("users", rows)?;
        }
        Ok(out.into())
    }

    /// Writes a bit-exact checkpoint restorable with load_checkpoint().
    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(
            &path,
            self.inner.completed_epochs,
            &self.inner.store,
            &self.inner.clients,
        )
        .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainState(completed_epochs={}, num_users={}, num_items={}, dim={}, latent_depth={})",
            self.inner.completed_epochs,
            self.num_users(),
            self.num_items(),
            self.dim(),
            self.latent_depth()
        )
    }
}

/// Synthesizes a block-community interaction dataset.
#[pyfunction]
#[pyo3(signature = (users, items, communities, p_in, p_out, holdout, seed))]
fn synth_blocks(
    users: usize,
    items: usize,
    communities: usize,
    p_in: f64,
    p_out: f64,
    holdout: f64,
    seed: u64,
) -> PyResult<PyDatasetSplit> {
    dataset::synth_blocks(users, items, communities, p_in, p_out, holdout, seed)
        .map(|inner| PyDatasetSplit { inner })
        .map_err(py_err)
}

/// Loads a split from the CLI's text format.
#[pyfunction]
fn load_split(train_path: PathBuf, test_path: PathBuf) -> PyResult<PyDatasetSplit> {
    dataset::load_split(&train_path, &test_path)
        .map(|inner| PyDatasetSplit { inner })
        .map_err(py_err)
}

/// Warm-up plus training run; returns the final state with its trace.
#[pyfunction]
fn run_experiment(
    split: &PyDatasetSplit,
    config: &PyExperimentConfig,
) -> PyResult<PyTrainState> {
    let mut trace = Vec::new();
    let inner = protocol::run_experiment(&split.inner, &config.inner, |r| {
        trace.push(r.clone());
        Ok(())
    })
    .map_err(py_err)?;
    Ok(PyTrainState { inner, trace })
}

/// Continues a loaded state to `config.epochs`; the returned trace covers
/// only the new epochs.
#[pyfunction]
fn resume_experiment(
    state: &PyTrainState,
    split: &PyDatasetSplit,
    config: &PyExperimentConfig,
) -> PyResult<PyTrainState> {
    let mut trace = Vec::new();
    let inner = protocol::resume_experiment(state.inner.clone(), &split.inner, &config.inner, |r| {
        trace.push(r.clone());
        Ok(())
    })
    .map_err(py_err)?;
    Ok(PyTrainState { inner, trace })
}

/// Restores a checkpoint against the dataset it was trained on.
#[pyfunction]
fn load_checkpoint(path: PathBuf, split: &PyDatasetSplit) -> PyResult<PyTrainState> {
    let graph = Arc::new(split.inner.train.clone());
    let (epoch, store, clients) = checkpoint::load(&path, &graph).map_err(py_err)?;
    Ok(PyTrainState {
        inner: TrainState {
            store,
            clients,
            completed_epochs: epoch,
        },
        trace: Vec::new(),
    })
}

#[pymodule]
fn fedrec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDatasetSplit>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyTrainState>()?;
    m.add_function(wrap_pyfunction!(synth_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(load_split, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(resume_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    Ok(())
}
