//! Python bindings: configs, synthetic domains, training and the gradient check.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serl::config::ExperimentConfig;
use serl::data::{Dataset, Split};
use serl::experiment::{self, TaskData, TermMask};
use serl::{Error, Tensor};

create_exception!(serl_py, ConfigError, PyValueError, "Invalid experiment configuration.");
create_exception!(serl_py, RuntimeFailure, PyRuntimeError, "Training, numeric or I/O failure.");

fn to_py(e: Error) -> PyErr {
    if e.is_config() {
        ConfigError::new_err(e.to_string())
    } else {
        RuntimeFailure::new_err(e.to_string())
    }
}

fn tensor_from(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(to_py)
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Experiment configuration. Keys match the `key = value` config files.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or the file at `path` layered over them.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => ExperimentConfig::load(p).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::from_text(text).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    /// Value of `key` as written in a config file.
    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| ConfigError::new_err(format!("unknown key {key:?}")))
    }

    /// Copy with `key` replaced; the result is validated.
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        self.get(key)?;
        let mut text = String::new();
        for line in self.inner.to_text().lines() {
            match line.split_once('=') {
                Some((k, _)) if k.trim() == key => text.push_str(&format!("{key} = {value}")),
                _ => text.push_str(line),
            }
            text.push('\n');
        }
        Self::from_text(&text)
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    fn __repr__(&self) -> String {
        format!("Config(classes={}, seeds={:?})", self.inner.classes, self.inner.seeds)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn dataset_dict<'py>(py: Python<'py>, ds: &Dataset) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("x", tensor_rows(&ds.features))?;
    d.set_item("y", ds.labels.clone())?;
    d.set_item("split", ds.splits.iter().map(|s| s.as_str()).collect::<Vec<_>>())?;
    Ok(d)
}

/// Source and split target domains as `{"source": ..., "target": ...}`, each
/// holding `x`, `y` and `split` lists.
#[pyfunction]
fn generate<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyDict>> {
    let data = experiment::prepare_data(&config.inner).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("source", dataset_dict(py, &data.source)?)?;
    d.set_item("target", dataset_dict(py, &data.target)?)?;
    Ok(d)
}

/// Writes `source.csv` and `target.csv` under `out`; returns both paths.
#[pyfunction]
fn write_data(config: &PyConfig, out: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
    let (_, src, tgt) = experiment::write_data(&config.inner, &out).map_err(to_py)?;
    Ok((src, tgt))
}

/// Feature extractor plus cosine classifier.
#[pyclass(name = "Model")]
struct PyModel {
    inner: serl::model::Model,
}

#[pymethods]
impl PyModel {
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor_from(x)?).map_err(to_py)
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let p = self.inner.predict_probs(&tensor_from(x)?).map_err(to_py)?;
        Ok(tensor_rows(&p))
    }

    /// Bottleneck features.
    fn features(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let z = self.inner.extractor.extract_features(&tensor_from(x)?).map_err(to_py)?;
        Ok(tensor_rows(&z))
    }

    /// Hex SHA-256 of all parameters.
    fn digest(&self) -> String {
        self.inner.digest().to_hex()
    }

    fn classifier_digest(&self) -> String {
        self.inner.classifier.digest().to_hex()
    }

    #[getter]
    fn classifier_frozen(&self) -> bool {
        self.inner.classifier.is_frozen()
    }
}

fn task(config: &PyConfig) -> PyResult<TaskData> {
    experiment::prepare_data(&config.inner).map_err(to_py)
}

/// Trains a fresh model on the labeled source domain.
#[pyfunction]
#[pyo3(signature = (config, seed=1))]
fn pretrain(py: Python<'_>, config: &PyConfig, seed: u64) -> PyResult<PyModel> {
    let cfg = config.inner.clone();
    let (model, _) = py
        .detach(move || {
            let data = experiment::prepare_data(&cfg)?;
            experiment::pretrain(&cfg, &data, seed)
        })
        .map_err(to_py)?;
    Ok(PyModel { inner: model })
}

/// Freezes the classifier of a copy of `model`, adapts it on the target and
/// returns `(adapted, target test accuracy)`.
#[pyfunction]
#[pyo3(signature = (config, model, seed=1))]
fn adapt(py: Python<'_>, config: &PyConfig, model: &PyModel, seed: u64) -> PyResult<(PyModel, f64)> {
    let data = task(config)?;
    let cfg = config.inner.clone();
    let pre = model.inner.clone();
    let (m, _, acc) = py
        .detach(move || experiment::adapt(&cfg, &data, &pre, seed, &format!("seed{seed}-adapt")))
        .map_err(to_py)?;
    Ok((PyModel { inner: m }, acc))
}

/// Accuracy of `model` on one split of the target domain.
#[pyfunction]
#[pyo3(signature = (config, model, split="test"))]
fn evaluate(config: &PyConfig, model: &PyModel, split: &str) -> PyResult<f64> {
    let split = Split::parse(split).ok_or_else(|| ConfigError::new_err(format!("unknown split {split:?}")))?;
    serl::trainer::evaluate(&model.inner, &task(config)?.target, split).map_err(to_py)
}

/// Full run into `out`, as the `run` command does. Returns the summary.
#[pyfunction]
#[pyo3(signature = (config, out, seeds=None, export_features=false))]
fn run<'py>(
    py: Python<'py>,
    config: &PyConfig,
    out: PathBuf,
    seeds: Option<Vec<u64>>,
    export_features: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = config.inner.clone();
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    cfg.validate().map_err(to_py)?;
    let s = py.detach(move || experiment::run_experiment(&cfg, &out, export_features)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("seeds", s.seeds)?;
    d.set_item("test_acc", s.test_acc)?;
    d.set_item("mean", s.mean)?;
    d.set_item("std", s.std)?;
    Ok(d)
}

/// Target test accuracy per regulariser subset, e.g. `terms="base;prob+mix+pre"`.
#[pyfunction]
#[pyo3(signature = (config, terms="all", seeds=None))]
fn ablate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    terms: &str,
    seeds: Option<Vec<u64>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let masks = TermMask::parse_list(terms).map_err(to_py)?;
    let cfg = config.inner.clone();
    let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
    let rows = py
        .detach(move || {
            let data = experiment::prepare_data(&cfg)?;
            experiment::ablate(&cfg, &data, &seeds, &masks, |_, _| Ok(()))
        })
        .map_err(to_py)?;
    rows.into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("terms", r.label)?;
            d.set_item("accs", r.accs)?;
            d.set_item("mean", r.mean)?;
            d.set_item("std", r.std)?;
            Ok(d)
        })
        .collect()
}

/// Finite-difference check of every loss term: `{name: max relative error}`.
#[pyfunction]
#[pyo3(signature = (instances=20, seed=0, corrupt=false))]
fn gradcheck<'py>(py: Python<'py>, instances: usize, seed: u64, corrupt: bool) -> PyResult<Bound<'py, PyDict>> {
    let checks = experiment::gradcheck_suite(instances, seed, corrupt).map_err(to_py)?;
    let d = PyDict::new(py);
    for c in checks {
        d.set_item(c.loss, c.max_rel_error)?;
    }
    Ok(d)
}

#[pymodule]
fn serl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("RuntimeFailure", m.py().get_type::<RuntimeFailure>())?;
    m.add("GRADCHECK_TOL", experiment::GRADCHECK_TOL)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(write_data, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
