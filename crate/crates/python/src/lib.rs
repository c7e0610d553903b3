//! Python bindings: corpus generation, ingestion, training, scoring and
//! evaluation.

use std::path::PathBuf;

use pyo3::exceptions::{PyFloatingPointError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use omniseq::domain::{HybridSequence, ItemId, TokenKind};
use omniseq::evaluation::{self, EvalConfig, ExclusionPolicy};
use omniseq::experiment::{self, ExperimentConfig, ModelShape};
use omniseq::model::{self, Checkpoint, Variant};
use omniseq::pipeline::{self, PipelineConfig};
use omniseq::synthgen::{self, GenConfig};
use omniseq::training::{self, SplitMode, TrainConfig};
use omniseq::Error;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyFloatingPointError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn items(ids: Vec<u32>) -> Vec<ItemId> {
    ids.into_iter().map(ItemId).collect()
}

/// One user's time-ordered hybrid sequence.
#[pyclass(name = "Sequence", module = "omniseq", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: HybridSequence,
}

#[pymethods]
impl PySequence {
    #[getter]
    fn user(&self) -> u64 {
        self.inner.user
    }

    /// `(item_or_none, timestamp, basket_or_none)` per position; set positions
    /// carry `None` as the item and the basket as a list.
    fn tokens(&self) -> Vec<(Option<u32>, i64, Option<Vec<u32>>)> {
        self.inner
            .tokens
            .iter()
            .map(|t| match &t.kind {
                TokenKind::Item(i) => (Some(i.0), t.timestamp, None),
                TokenKind::Set(s) => (None, t.timestamp, Some(s.iter().map(|i| i.0).collect())),
            })
            .collect()
    }

    fn online_count(&self) -> usize {
        self.inner.online_count()
    }

    fn __len__(&self) -> usize {
        self.inner.tokens.len()
    }

    fn __repr__(&self) -> String {
        format!("Sequence(user={}, len={})", self.inner.user, self.inner.tokens.len())
    }
}

/// A trained (or freshly initialized) recommender checkpoint.
#[pyclass(name = "Model", module = "omniseq", frozen)]
struct PyModel {
    inner: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (catalog_size, variant="attn-enc", d=64, blocks=2, seed=0))]
    fn new(catalog_size: usize, variant: &str, d: usize, blocks: usize, seed: u64) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(py_err)?;
        let shape = ModelShape { d, blocks, heads: 1 };
        let params = model::ModelParams::init(shape.config(catalog_size, variant), seed).map_err(py_err)?;
        Ok(PyModel {
            inner: Checkpoint { variant, seed, params },
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: Checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn catalog_size(&self) -> usize {
        self.inner.params.config.catalog_size
    }

    /// Scores for `candidates` after reading `sequence` (the whole sequence
    /// is the context).
    fn score(&self, sequence: &PySequence, candidates: Vec<u32>) -> PyResult<Vec<f64>> {
        let params = &self.inner.params;
        let tokens = evaluation::model_input(self.inner.variant, &sequence.inner, params.config.max_seq_len);
        if tokens.is_empty() {
            return Err(PyValueError::new_err("empty sequence"));
        }
        let hidden = model::forward_hidden(&tokens, params).map_err(py_err)?;
        model::score_candidates(hidden.row(hidden.rows() - 1), &items(candidates), params).map_err(py_err)
    }

    /// Attention-pooled representation of an item set.
    fn encode_set(&self, basket: Vec<u32>) -> PyResult<Vec<f64>> {
        model::encode_set_attn(&items(basket), &self.inner.params).map_err(py_err)
    }

    /// Attention weights over the basket's members in ascending id order.
    fn set_attention(&self, basket: Vec<u32>) -> PyResult<Vec<f64>> {
        model::set_attention_weights(&items(basket), &self.inner.params).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(variant={}, catalog_size={}, d={})",
            self.inner.variant,
            self.inner.params.config.catalog_size,
            self.inner.params.config.d
        )
    }
}

/// Writes a synthetic corpus to `out` and returns its ground-truth config.
#[pyfunction]
#[pyo3(signature = (out, users=2000, items=5000, rho=0.8, seed=0))]
fn generate<'py>(py: Python<'py>, out: PathBuf, users: usize, items: usize, rho: f64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let defaults = GenConfig::default();
    let cfg = GenConfig {
        users,
        catalog_size: items,
        items_per_intent: items / defaults.intents,
        rho,
        seed,
        ..defaults
    };
    let corpus = synthgen::generate(&cfg).map_err(py_err)?;
    synthgen::write_corpus(&corpus, &out).map_err(py_err)?;
    to_py(py, &cfg)
}

/// Streams the raw files in `data` through the windowed pipeline into `out`.
#[pyfunction]
#[pyo3(signature = (data, out, window_secs=86400, slide_secs=43200, micro_batch_secs=43200))]
fn ingest<'py>(
    py: Python<'py>,
    data: PathBuf,
    out: PathBuf,
    window_secs: i64,
    slide_secs: i64,
    micro_batch_secs: i64,
) -> PyResult<Bound<'py, PyAny>> {
    if micro_batch_secs <= 0 {
        return Err(PyValueError::new_err("micro_batch_secs must be positive"));
    }
    let cfg = PipelineConfig::new(window_secs, slide_secs).map_err(py_err)?;
    let (online, store) = pipeline::load_raw(&data).map_err(py_err)?;
    let (o, s): (Vec<_>, Vec<_>) = pipeline::split_micro_batches(&online, &store, micro_batch_secs)
        .into_iter()
        .unzip();
    let run = pipeline::run_pipeline(o, s, &cfg, &out).map_err(py_err)?;
    to_py(py, &run.stats)
}

/// Hybrid sequences from raw files or a feature store directory.
#[pyfunction]
#[pyo3(signature = (data, max_seq_len=90))]
fn load_sequences(data: PathBuf, max_seq_len: usize) -> PyResult<Vec<PySequence>> {
    let (dataset, _) = experiment::load_dataset(&data, max_seq_len, None).map_err(py_err)?;
    Ok(dataset.into_iter().map(|inner| PySequence { inner }).collect())
}

/// Trains one variant; returns the model and its per-epoch log.
#[pyfunction]
#[pyo3(signature = (data, variant="attn-enc", mode="clean", seed=0, epochs=20, batch_size=512, lr=0.001, d=64))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    data: PathBuf,
    variant: &str,
    mode: &str,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    d: usize,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let variant: Variant = variant.parse().map_err(py_err)?;
    let mode: SplitMode = mode.parse().map_err(py_err)?;
    let cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        ..TrainConfig::new(mode, seed)
    };
    let (dataset, catalog) = experiment::load_dataset(&data, cfg.max_seq_len, None).map_err(py_err)?;
    let shape = ModelShape { d, blocks: 2, heads: 1 };
    let outcome = py
        .detach(|| training::train(&dataset, variant, shape.config(catalog, variant), &cfg))
        .map_err(py_err)?;
    let log = to_py(py, &outcome.log)?;
    Ok((PyModel { inner: outcome.checkpoint }, log))
}

/// Hit@10 and NDCG@10 on each user's last online behavior.
#[pyfunction]
#[pyo3(signature = (model, data, seed=0, exclude="history"))]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, data: PathBuf, seed: u64, exclude: &str) -> PyResult<Bound<'py, PyAny>> {
    let policy: ExclusionPolicy = exclude.parse().map_err(py_err)?;
    let cfg = EvalConfig {
        policy,
        ..EvalConfig::new(seed)
    };
    let params = &model.inner.params;
    let (dataset, _) =
        experiment::load_dataset(&data, params.config.max_seq_len, Some(params.config.catalog_size)).map_err(py_err)?;
    let summary = py.detach(|| evaluation::evaluate(&model.inner, &dataset, &cfg)).map_err(py_err)?;
    #[derive(Serialize)]
    struct Report {
        hit10: f64,
        ndcg10: f64,
        users: usize,
        skipped: usize,
    }
    to_py(
        py,
        &Report {
            hit10: summary.hit10,
            ndcg10: summary.ndcg10,
            users: summary.users,
            skipped: summary.skipped,
        },
    )
}

/// Runs all stages for every variant into `out` and returns the report.
#[pyfunction]
#[pyo3(signature = (out, seed=0, smoke=true))]
fn run_experiment<'py>(py: Python<'py>, out: PathBuf, seed: u64, smoke: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = if smoke {
        ExperimentConfig::smoke(seed)
    } else {
        ExperimentConfig::desk(seed)
    };
    let report = py.detach(|| experiment::run_experiment(&cfg, &out)).map_err(py_err)?;
    to_py(py, &report)
}

/// Pessimistic 1-based rank of `scores[target]`.
#[pyfunction]
fn rank_target(scores: Vec<f64>, target: usize) -> PyResult<usize> {
    evaluation::rank_target(&scores, target).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (rank, k=10))]
fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    evaluation::ndcg_at_k(rank, k)
}

#[pyfunction]
#[pyo3(signature = (rank, k=10))]
fn hit_at_k(rank: usize, k: usize) -> f64 {
    evaluation::hit_at_k(rank, k)
}

#[pymodule(name = "omniseq")]
fn omniseq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", experiment::TOOL_VERSION)?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(load_sequences, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(rank_target, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_k, m)?)?;
    Ok(())
}
