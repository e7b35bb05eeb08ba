//! Python bindings. Configs go in as dicts and results come back as plain
//! dicts and lists, converted through JSON.

use std::collections::BTreeMap;

use ikt::continual::{self, ProtocolConfig, ScenarioSpec};
use ikt::drift::{self, TsneConfig};
use ikt::ingest::{self, ParseOptions, Strictness, SyntheticSpec};
use ikt::metrics;
use ikt::sakt::SaktConfig;
use ikt::train::{self, FoldSpec, ModelSource, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn py_err(e: ikt::Error) -> PyErr {
    match e {
        ikt::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// One school's interactions.
#[pyclass(name = "TaskDataset", module = "pyikt", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTaskDataset {
    inner: ingest::TaskDataset,
}

#[pymethods]
impl PyTaskDataset {
    #[getter]
    fn school_id(&self) -> &str {
        &self.inner.school_id
    }

    fn user_ids(&self) -> Vec<String> {
        self.inner.user_ids()
    }

    fn num_records(&self) -> usize {
        self.inner.num_records()
    }

    /// `{num_learners, num_unique_problems, num_responses}`.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &ingest::dataset_stats(&self.inner))
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.canonical_json().map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyTaskDataset {
            inner: ingest::TaskDataset::from_json(text).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "TaskDataset(school_id={:?}, users={}, records={})",
            self.inner.school_id,
            self.inner.users.len(),
            self.inner.num_records()
        )
    }
}

/// Model weights, registry and provenance.
#[pyclass(name = "Checkpoint", module = "pyikt", frozen)]
pub struct PyCheckpoint {
    inner: train::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: train::load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        train::save_checkpoint(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn global_step(&self) -> u64 {
        self.inner.global_step
    }

    fn provenance<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.provenance)
    }

    fn digest(&self) -> PyResult<String> {
        self.inner.digest().map_err(py_err)
    }

    /// Evaluates on the given users of `dataset`.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyTaskDataset,
        users: Vec<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let model = self.inner.to_model().map_err(py_err)?;
        let report = metrics::evaluate(&model, &self.inner.registry, &dataset.inner, &users)
            .map_err(py_err)?;
        to_py(py, &report)
    }
}

fn wrap(map: BTreeMap<String, ingest::TaskDataset>) -> BTreeMap<String, PyTaskDataset> {
    map.into_iter()
        .map(|(k, inner)| (k, PyTaskDataset { inner }))
        .collect()
}

fn unwrap(datasets: &BTreeMap<String, PyRef<'_, PyTaskDataset>>) -> BTreeMap<String, ingest::TaskDataset> {
    datasets
        .iter()
        .map(|(k, v)| (k.clone(), v.inner.clone()))
        .collect()
}

#[pyfunction]
#[pyo3(signature = (spec=None))]
fn generate_synthetic(spec: Option<&Bound<'_, PyAny>>) -> PyResult<BTreeMap<String, PyTaskDataset>> {
    let spec: SyntheticSpec = from_py(spec)?;
    Ok(wrap(ingest::generate_synthetic(&spec).map_err(py_err)?))
}

/// Reads a raw CSV and splits it by school. Returns `(datasets, skipped_rows)`.
#[pyfunction]
#[pyo3(signature = (path, schools=None, lenient=false))]
fn load_csv(
    path: &str,
    schools: Option<Vec<String>>,
    lenient: bool,
) -> PyResult<(BTreeMap<String, PyTaskDataset>, usize)> {
    let file = std::fs::File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let options = ParseOptions {
        strictness: if lenient {
            Strictness::Lenient
        } else {
            Strictness::Strict
        },
        ..ParseOptions::default()
    };
    let outcome = ingest::parse_records(std::io::BufReader::new(file), &options).map_err(py_err)?;
    let schools = schools.unwrap_or_else(|| {
        let all: std::collections::BTreeSet<&str> =
            outcome.records.iter().map(|r| r.school_id.as_str()).collect();
        all.into_iter().map(String::from).collect()
    });
    let map = ingest::partition_by_school(&outcome.records, &schools).map_err(py_err)?;
    Ok((wrap(map), outcome.skipped.len()))
}

/// Trains a fresh model on one dataset's training folds. Returns `(checkpoint, history)`.
#[pyfunction]
#[pyo3(signature = (dataset, model=None, train=None, folds=None, init_seed=0))]
fn train_task<'py>(
    py: Python<'py>,
    dataset: &PyTaskDataset,
    model: Option<&Bound<'py, PyAny>>,
    train: Option<&Bound<'py, PyAny>>,
    folds: Option<&Bound<'py, PyAny>>,
    init_seed: u64,
) -> PyResult<(PyCheckpoint, Bound<'py, PyAny>)> {
    let config: SaktConfig = from_py(model)?;
    let cfg: TrainConfig = from_py(train)?;
    let folds: FoldSpec = from_py(folds)?;
    let source = ModelSource::Fresh {
        config,
        seed: init_seed,
    };
    let (ckpt, history) = py
        .detach(|| train::train_task(source, &dataset.inner, &folds, &cfg))
        .map_err(py_err)?;
    Ok((PyCheckpoint { inner: ckpt }, to_py(py, &history)?))
}

/// `(train_users, test_users)` under a fold spec.
#[pyfunction]
#[pyo3(signature = (dataset, folds=None))]
fn split_users(dataset: &PyTaskDataset, folds: Option<&Bound<'_, PyAny>>) -> PyResult<(Vec<String>, Vec<String>)> {
    let folds: FoldSpec = from_py(folds)?;
    let split = folds.split(&dataset.inner).map_err(py_err)?;
    Ok((split.train_users, split.test_users))
}

#[pyfunction]
#[pyo3(signature = (tasks, datasets, protocol=None))]
fn run_scenario<'py>(
    py: Python<'py>,
    tasks: Vec<String>,
    datasets: BTreeMap<String, PyRef<'py, PyTaskDataset>>,
    protocol: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ProtocolConfig = from_py(protocol)?;
    let data = unwrap(&datasets);
    let result = py
        .detach(|| continual::run_scenario(&ScenarioSpec::new(tasks), &data, &cfg))
        .map_err(py_err)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (tasks, datasets, protocol=None))]
fn run_disjoint<'py>(
    py: Python<'py>,
    tasks: Vec<String>,
    datasets: BTreeMap<String, PyRef<'py, PyTaskDataset>>,
    protocol: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ProtocolConfig = from_py(protocol)?;
    let data = unwrap(&datasets);
    let result = py
        .detach(|| continual::run_disjoint(&tasks, &data, &cfg))
        .map_err(py_err)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (tasks, datasets, protocol=None))]
fn run_joint<'py>(
    py: Python<'py>,
    tasks: Vec<String>,
    datasets: BTreeMap<String, PyRef<'py, PyTaskDataset>>,
    protocol: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ProtocolConfig = from_py(protocol)?;
    let data = unwrap(&datasets);
    let result = py
        .detach(|| continual::run_joint(&tasks, &data, &cfg))
        .map_err(py_err)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (pairs, datasets, protocol=None))]
fn run_ablation<'py>(
    py: Python<'py>,
    pairs: Vec<(String, String)>,
    datasets: BTreeMap<String, PyRef<'py, PyTaskDataset>>,
    protocol: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ProtocolConfig = from_py(protocol)?;
    let data = unwrap(&datasets);
    let result = py
        .detach(|| continual::run_ablation(&pairs, &data, &cfg))
        .map_err(py_err)?;
    to_py(py, &result)
}

/// `None` when only one class is present.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<Option<f64>> {
    metrics::auroc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<Option<f64>> {
    metrics::auprc(&scores, &labels).map_err(py_err)
}

/// Embeds the learners of `datasets` and scores pairwise mixing.
#[pyfunction]
#[pyo3(signature = (datasets, tsne=None, neighbours=10))]
fn drift_analysis<'py>(
    py: Python<'py>,
    datasets: Vec<PyRef<'py, PyTaskDataset>>,
    tsne: Option<&Bound<'py, PyAny>>,
    neighbours: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TsneConfig = from_py(tsne)?;
    let data: Vec<&ingest::TaskDataset> = datasets.iter().map(|d| &d.inner).collect();
    let analysis = drift::analyze(&data, &cfg).map_err(py_err)?;
    let labels = analysis.schools();
    let mixing: Vec<(String, String, f64)> =
        drift::mixing_table(&analysis.embedding.points, &labels, neighbours)
            .map_err(py_err)?
            .into_iter()
            .map(|((a, b), v)| (a, b, v))
            .collect();
    let points: Vec<[f64; 2]> = (0..labels.len())
        .map(|i| {
            let r = analysis.embedding.points.row(i);
            [r[0], r[1]]
        })
        .collect();
    let out = serde_json::json!({
        "labels": analysis.labels,
        "points": points,
        "kl_trace": analysis.embedding.kl_trace,
        "explained_variance_ratio": analysis.explained_variance_ratio,
        "warnings": analysis.warnings,
        "mixing": mixing,
    });
    to_py(py, &out)
}

#[pymodule]
fn pyikt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTaskDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_csv, m)?)?;
    m.add_function(wrap_pyfunction!(train_task, m)?)?;
    m.add_function(wrap_pyfunction!(split_users, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_disjoint, m)?)?;
    m.add_function(wrap_pyfunction!(run_joint, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(drift_analysis, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
