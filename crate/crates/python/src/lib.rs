//! Python bindings: dataset generation, checkpoints, evaluation, attacks,
//! averaging, voting, and the full command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileExistsError, PyFileNotFoundError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tcf::advtrain::{attack_eval, AdvConfig};
use tcf::cli::RunConfig;
use tcf::model::{AnyCheckpoint, FusionInput};
use tcf::modelops::{evaluate, PredictionMatrix, SnapshotRing, EVAL_CHUNK};
use tcf::toyvqa::{Dataset, Split};
use tcf::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(msg),
        Error::AlreadyExists(_) => PyFileExistsError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::NonFinite(_) | Error::Diverged { .. } => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn split_of(data: &PathBuf, split: &str) -> PyResult<(Vec<FusionInput>, Vec<usize>)> {
    let ds = Dataset::load(data).map_err(py_err)?;
    let split: Split = split.parse().map_err(py_err)?;
    let ex = ds.split(split);
    Ok((
        ex.iter().map(|e| e.input()).collect(),
        ex.iter().map(|e| e.answer).collect(),
    ))
}

/// Jensen-Shannon divergence (natural log) of two distributions.
#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    tcf::advtrain::jsd(&p, &q).map_err(py_err)
}

/// Per-example vote over `preds[model][example]`; vote ties go to the
/// larger summed probability, then the lowest class.
#[pyfunction]
#[pyo3(signature = (preds, classes, probs=None))]
fn majority_vote(preds: Vec<Vec<usize>>, classes: usize, probs: Option<Vec<Vec<Vec<f64>>>>) -> PyResult<Vec<usize>> {
    let pm = PredictionMatrix::new(classes, preds, probs).map_err(py_err)?;
    tcf::modelops::majority_vote(&pm).map_err(py_err)
}

/// Generate the synthetic dataset into `out`; returns split sizes.
#[pyfunction]
#[pyo3(signature = (out, seed=1, overrides=Vec::new(), overwrite=false))]
fn generate_dataset<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: u64,
    overrides: Vec<String>,
    overwrite: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::resolve(None, &overrides).map_err(py_err)?;
    let ds = Dataset::generate(&cfg.data(), seed).map_err(py_err)?;
    let manifest = ds.write(&out, overwrite).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("train", ds.train.len())?;
    d.set_item("val", ds.val.len())?;
    d.set_item("test", ds.test.len())?;
    d.set_item("config_hash", manifest.config_hash)?;
    Ok(d)
}

/// A trained model in either precision.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: AnyCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: AnyCheckpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step()
    }

    #[getter]
    fn precision(&self) -> String {
        format!("{:?}", self.inner.precision()).to_lowercase()
    }

    #[getter]
    fn answer_count(&self) -> usize {
        self.inner.config().answer_count
    }

    /// Predicted answer ids and accuracy on one split.
    #[pyo3(signature = (data, split="val", threads=1))]
    fn evaluate(&self, py: Python<'_>, data: PathBuf, split: &str, threads: usize) -> PyResult<(Vec<usize>, f64)> {
        let (xs, ys) = split_of(&data, split)?;
        let ev = py
            .detach(|| evaluate(&self.inner, &xs.iter().collect::<Vec<_>>(), &ys, threads.max(1)))
            .map_err(py_err)?;
        Ok((ev.predictions, ev.accuracy))
    }

    /// Clean and attacked accuracy under the embedding attack.
    #[pyo3(signature = (data, split="val", epsilon=None, seed=1, threads=1))]
    fn attack<'py>(
        &self,
        py: Python<'py>,
        data: PathBuf,
        split: &str,
        epsilon: Option<f64>,
        seed: u64,
        threads: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (xs, ys) = split_of(&data, split)?;
        let mut adv = AdvConfig::default();
        if let Some(e) = epsilon {
            adv.epsilon = e;
        }
        adv.validate().map_err(py_err)?;
        let refs: Vec<&FusionInput> = xs.iter().collect();
        let threads = threads.max(1);
        let r = py
            .detach(|| match &self.inner {
                AnyCheckpoint::F32(c) => attack_eval(&refs, &ys, &c.params, &adv, seed, EVAL_CHUNK, threads),
                AnyCheckpoint::F64(c) => attack_eval(&refs, &ys, &c.params, &adv, seed, EVAL_CHUNK, threads),
            })
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("examples", r.examples)?;
        d.set_item("clean_accuracy", r.clean_accuracy)?;
        d.set_item("attacked_accuracy", r.attacked_accuracy)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(step={}, precision={})", self.step(), self.precision())
    }
}

/// Parameter average of the newest `k` snapshots in a directory.
#[pyfunction]
fn average_snapshots(dir: PathBuf, k: usize) -> PyResult<PyCheckpoint> {
    let ring = SnapshotRing::open(&dir, usize::MAX).map_err(py_err)?;
    Ok(PyCheckpoint {
        inner: tcf::modelops::average_ring(&ring, k).map_err(py_err)?,
    })
}

/// Run the command line with `args` (without the program name); returns
/// the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| tcf::cli::main_with_args(std::iter::once("tcf".to_string()).chain(args)))
}

#[pymodule]
fn tcf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(average_snapshots, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
