//! Python bindings: windows files, training, evaluation, and explanation,
//! importable as the `adlgraph` module. Structured results cross the
//! boundary as plain dicts/lists so the Python side needs no wrapper types.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use adlgraph::explain::ExplainConfig;
use adlgraph::model::{Checkpoint, ModelParams};
use adlgraph::pipeline::{
    check_compatibility, explain_window, featurize_all, holdout_indices, prepare_from_log,
    run_selfcheck, run_training, Holdout, PipelineError, TrainSettings,
};
use adlgraph::registry::Registry;
use adlgraph::synth::SynthConfig;
use adlgraph::train::{evaluate as eval_model, SplitSpec};
use adlgraph::WindowsFile;

fn data_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn run_err(e: PipelineError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Converts any serializable value into native Python objects by routing it
/// through the interpreter's own json module.
fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(data_err)?;
    let json = PyModule::import(py, "json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

/// A labeled, windowed dataset (the output of `prepare`).
#[pyclass]
struct Windows {
    inner: WindowsFile,
}

#[pymethods]
impl Windows {
    /// Generates the built-in synthetic dataset.
    #[staticmethod]
    #[pyo3(signature = (classes=3, windows_per_class=300, noise_frac=0.2, window_secs=360.0, seed=7))]
    fn synthetic(
        classes: usize,
        windows_per_class: usize,
        noise_frac: f64,
        window_secs: f64,
        seed: u64,
    ) -> Self {
        Windows {
            inner: adlgraph::synth::generate(&SynthConfig {
                classes,
                windows_per_class,
                noise_frac,
                window_secs,
                seed,
            }),
        }
    }

    /// Ingests a raw sensor log using a registry config file.
    #[staticmethod]
    #[pyo3(signature = (log_path, registry_path, window_secs=360.0, overlap=0.8))]
    fn from_log(
        log_path: PathBuf,
        registry_path: PathBuf,
        window_secs: f64,
        overlap: f64,
    ) -> PyResult<Self> {
        let (inner, _report) =
            prepare_from_log(&log_path, &registry_path, window_secs, overlap).map_err(run_err)?;
        Ok(Windows { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Windows {
            inner: WindowsFile::load(&path).map_err(data_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(data_err)
    }

    #[getter]
    fn label_names(&self) -> Vec<String> {
        self.inner.label_names.clone()
    }

    #[getter]
    fn num_sensors(&self) -> usize {
        self.inner.registry.len()
    }

    /// Window count per class name.
    fn class_counts(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.class_counts())
    }

    /// (node count, arc count) of one window's graph.
    fn graph_stats(&self, index: usize) -> PyResult<(usize, usize)> {
        let w = self
            .inner
            .windows
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no window {index}")))?;
        let g = adlgraph::graphbuild::build_graph(w, &self.inner.registry).map_err(data_err)?;
        Ok((g.nodes.len(), g.arcs.len()))
    }

    fn __len__(&self) -> usize {
        self.inner.windows.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Windows({} windows, {} classes, {} sensors)",
            self.inner.windows.len(),
            self.inner.label_names.len(),
            self.inner.registry.len()
        )
    }
}

/// A trained classifier plus everything needed to apply and explain it.
#[pyclass]
struct Model {
    params: ModelParams,
    label_names: Vec<String>,
    registry: Registry,
    seed: u64,
}

impl Model {
    fn graphs_for(&self, windows: &Windows) -> PyResult<Vec<adlgraph::FeaturizedGraph>> {
        check_compatibility(&self.registry, &self.label_names, &windows.inner).map_err(run_err)?;
        featurize_all(&windows.inner).map_err(run_err)
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, label_names, registry, seed) = Checkpoint::load(&path)
            .map_err(data_err)?
            .into_params()
            .map_err(data_err)?;
        Ok(Model {
            params,
            label_names,
            registry,
            seed,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_params(
            &self.params,
            self.label_names.clone(),
            self.registry.clone(),
            self.seed,
        )
        .save(&path)
        .map_err(data_err)
    }

    #[getter]
    fn label_names(&self) -> Vec<String> {
        self.label_names.clone()
    }

    /// Predicted class name and the full probability vector for one window.
    fn predict(&self, windows: &Windows, index: usize) -> PyResult<(String, Vec<f64>)> {
        let feats = self.graphs_for(windows)?;
        let f = feats
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no window {index}")))?;
        let (probs, pred) = adlgraph::model::forward(&self.params, f).map_err(data_err)?;
        Ok((self.label_names[pred].clone(), probs))
    }

    /// Metrics dict (accuracy, weighted F1, per-class table) over a holdout.
    #[pyo3(signature = (windows, holdout="test", split_seed=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        windows: &Windows,
        holdout: &str,
        split_seed: Option<u64>,
    ) -> PyResult<Py<PyAny>> {
        let holdout: Holdout = holdout.parse().map_err(PyValueError::new_err)?;
        let feats = self.graphs_for(windows)?;
        let spec = SplitSpec::new(split_seed.unwrap_or(self.seed));
        let indices = holdout_indices(&windows.inner, holdout, &spec).map_err(run_err)?;
        let subset: Vec<&adlgraph::FeaturizedGraph> = indices.iter().map(|&i| &feats[i]).collect();
        let report = eval_model(&self.params, &subset, &self.label_names).map_err(data_err)?;
        to_py(py, &report)
    }

    /// Full explanation of one window: sentence, path, and importance scores.
    #[pyo3(signature = (windows, index, runs=10, epochs=100, seed=0))]
    fn explain(
        &self,
        py: Python<'_>,
        windows: &Windows,
        index: usize,
        runs: usize,
        epochs: usize,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let feats = self.graphs_for(windows)?;
        let f = feats
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no window {index}")))?;
        let config = ExplainConfig {
            runs,
            epochs,
            base_seed: seed,
            ..ExplainConfig::new(seed)
        };
        let (record, _) = explain_window(&self.params, f, &self.registry, &self.label_names, &config)
            .map_err(run_err)?;
        to_py(py, &record)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} classes, {} sensors, embed {}, hidden {})",
            self.params.config.num_classes,
            self.params.config.num_sensors,
            self.params.config.embed_dim,
            self.params.config.hidden_dim
        )
    }
}

/// Trains a model on a windows file. With `out_dir` the usual artifacts
/// (checkpoint, CSV reports, config echo) are written there too.
#[pyfunction]
#[pyo3(signature = (windows, seed=0, out_dir=None, learning_rate=None, max_epochs=None,
                    patience=None, batch_size=None, embed_dim=None, hidden_dim=None, rounds=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    windows: &Windows,
    seed: u64,
    out_dir: Option<PathBuf>,
    learning_rate: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    rounds: Option<usize>,
) -> PyResult<(Model, Py<PyAny>)> {
    let mut settings = TrainSettings::for_file(&windows.inner, seed);
    if let Some(v) = learning_rate {
        settings.train.learning_rate = v;
    }
    if let Some(v) = max_epochs {
        settings.train.max_epochs = v;
    }
    if let Some(v) = patience {
        settings.train.patience = v;
    }
    if let Some(v) = batch_size {
        settings.train.batch_size = v;
    }
    if let Some(v) = embed_dim {
        settings.model.embed_dim = v;
    }
    if let Some(v) = hidden_dim {
        settings.model.hidden_dim = v;
    }
    if let Some(v) = rounds {
        settings.model.num_mp_rounds = v;
    }
    // Training always goes through the artifact-writing path; without an
    // explicit out_dir the artifacts land in a throwaway directory.
    let tmp;
    let dir = match &out_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir().map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            tmp.path().to_path_buf()
        }
    };
    let artifacts = run_training(&windows.inner, &settings, &dir).map_err(run_err)?;
    let (params, label_names, registry, seed) = Checkpoint::load(&artifacts.checkpoint_path)
        .map_err(data_err)?
        .into_params()
        .map_err(data_err)?;
    let summary = to_py(py, &artifacts.summary)?;
    Ok((
        Model {
            params,
            label_names,
            registry,
            seed,
        },
        summary,
    ))
}

/// Runs the built-in verification battery; returns (name, passed, detail)
/// tuples.
#[pyfunction]
#[pyo3(signature = (seed=0, fuzz_cases=200))]
fn selfcheck(seed: u64, fuzz_cases: usize) -> Vec<(String, bool, String)> {
    run_selfcheck(seed, fuzz_cases)
        .checks
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pymodule(name = "adlgraph")]
fn adlgraph_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Windows>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
