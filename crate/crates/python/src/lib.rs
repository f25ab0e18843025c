//! Python bindings: corpora, models, training and evaluation.
//!
//! Reports cross the boundary as plain dicts and lists.

use std::collections::BTreeMap;

use agg_dst::cli::RunConfig;
use agg_dst::corpus::{self, DialogueState, SlotId, Tokenizer};
use agg_dst::evaluation::{self, EvalOptions};
use agg_dst::model::{DstModel, Variant};
use agg_dst::synth::{default_schema, generate_corpus, GenConfig};
use agg_dst::training;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_slots(names: Vec<String>) -> PyResult<Vec<SlotId>> {
    names.iter().map(|n| n.parse::<SlotId>().map_err(PyValueError::new_err)).collect()
}

/// A dialogue corpus with its slot catalog.
#[pyclass(module = "agg_dst_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Corpus {
    pub inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        corpus::load_corpus(path, Tokenizer::default())
            .map(|inner| Corpus { inner })
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        corpus::parse_corpus(text, Tokenizer::default())
            .map(|inner| Corpus { inner })
            .map_err(value_err)
    }

    /// Synthetic corpus from the built-in schema.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0, unseen_services=None))]
    fn synthetic(n: usize, seed: u64, unseen_services: Option<Vec<String>>) -> PyResult<Self> {
        let cfg = GenConfig {
            n_dialogues: n,
            seed,
            unseen_services: unseen_services.unwrap_or_default(),
            ..Default::default()
        };
        generate_corpus(&default_schema(), &cfg)
            .map(|inner| Corpus { inner })
            .map_err(value_err)
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        corpus::write_corpus(&self.inner, &mut buf).map_err(value_err)?;
        String::from_utf8(buf).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn dialogue_ids(&self) -> Vec<String> {
        self.inner.dialogues.iter().map(|d| d.id.clone()).collect()
    }

    fn catalog(&self) -> Vec<String> {
        self.inner.catalog.slots().iter().map(ToString::to_string).collect()
    }

    fn num_turns(&self, dialogue_id: &str) -> PyResult<usize> {
        Ok(self.dialogue(dialogue_id)?.num_turns())
    }

    /// History tokens visible at `turn`.
    fn history(&self, dialogue_id: &str, turn: usize) -> PyResult<Vec<String>> {
        self.dialogue(dialogue_id)?.history(turn).map_err(value_err)
    }

    /// Gold state at `turn` as `{slot: value}`.
    fn gold_state(&self, dialogue_id: &str, turn: usize) -> PyResult<BTreeMap<String, String>> {
        let d = self.dialogue(dialogue_id)?;
        if turn == 0 || turn > d.num_turns() {
            return Err(PyValueError::new_err(format!("turn {turn} outside 1..={}", d.num_turns())));
        }
        Ok(state_dict(d.state(turn)))
    }

    fn filter_domain(&self, domain: &str) -> Self {
        Corpus {
            inner: self.inner.filter_domain(domain),
        }
    }

    fn subsample(&self, rate: f64, seed: u64) -> PyResult<Self> {
        let dialogues = corpus::subsample(&self.inner.dialogues, rate, seed).map_err(value_err)?;
        Ok(Corpus {
            inner: self.inner.with_dialogues(dialogues),
        })
    }

    /// Number of training examples the regime yields.
    fn count_examples(&self, regime: &str) -> PyResult<usize> {
        let regime = regime.parse().map_err(PyValueError::new_err)?;
        let sets = training::supervise(&self.inner, regime).map_err(value_err)?;
        Ok(training::build_examples(&self.inner, &sets).len())
    }
}

impl Corpus {
    fn dialogue(&self, id: &str) -> PyResult<&corpus::Dialogue> {
        self.inner
            .dialogues
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no dialogue {id:?}")))
    }
}

fn state_dict(s: &DialogueState) -> BTreeMap<String, String> {
    s.assignments.keys().map(|k| (k.to_string(), s.value_of(k))).collect()
}

/// An encoder-decoder state tracker (`agg` or `trade`).
#[pyclass(module = "agg_dst_py", skip_from_py_object)]
#[derive(Clone)]
pub struct Model {
    pub inner: DstModel,
}

#[pymethods]
impl Model {
    /// Untrained model with a vocabulary over `corpus`. `config` is a JSON
    /// document with optional "model" and "train" sections.
    #[new]
    #[pyo3(signature = (corpus, variant="agg", seed=0, config=None))]
    fn new(corpus: &Corpus, variant: &str, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let mut cfg = run_config(config)?;
        cfg.model.variant = variant.parse().map_err(PyValueError::new_err)?;
        training::init_model(&corpus.inner, None, &cfg.model, &cfg.train, seed)
            .map(|inner| Model { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        DstModel::load(path)
            .map(|inner| Model { inner })
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names().to_vec()
    }

    /// Predicted state at `turn` as `{slot: value}`; none slots are omitted.
    #[pyo3(signature = (corpus, dialogue_id, turn, slots=None))]
    fn predict(
        &self,
        corpus: &Corpus,
        dialogue_id: &str,
        turn: usize,
        slots: Option<Vec<String>>,
    ) -> PyResult<BTreeMap<String, String>> {
        let d = corpus.dialogue(dialogue_id)?;
        let slots = match slots {
            Some(s) => parse_slots(s)?,
            None => self.inner.catalog().slots().to_vec(),
        };
        let state = self.inner.predict_state(d, turn, &slots).map_err(value_err)?;
        Ok(state_dict(&state))
    }

    /// Initialization attention per slot over the history at `turn`.
    #[pyo3(signature = (corpus, dialogue_id, turn, slots=None))]
    fn attention<'py>(
        &self,
        py: Python<'py>,
        corpus: &Corpus,
        dialogue_id: &str,
        turn: usize,
        slots: Option<Vec<String>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let d = corpus.dialogue(dialogue_id)?;
        let slots = match slots {
            Some(s) => parse_slots(s)?,
            None => self.inner.catalog().slots().to_vec(),
        };
        let dumps = evaluation::dump_attention(&self.inner, d, turn, &slots).map_err(value_err)?;
        to_py(py, &dumps)
    }

    #[pyo3(signature = (corpus, domain=None, active_only=false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &Corpus,
        domain: Option<String>,
        active_only: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts = EvalOptions {
            domain,
            active_only,
            ..Default::default()
        };
        let report = py
            .detach(|| evaluation::evaluate(&self.inner, &corpus.inner, &opts))
            .map_err(value_err)?;
        to_py(py, &report)
    }

    /// Teacher-forced, dropout-free loss averaged over the regime's examples.
    #[pyo3(signature = (corpus, regime="full"))]
    fn mean_loss(&self, corpus: &Corpus, regime: &str) -> PyResult<f64> {
        let regime = regime.parse().map_err(PyValueError::new_err)?;
        let sets = training::supervise(&corpus.inner, regime).map_err(value_err)?;
        let examples = training::build_examples(&corpus.inner, &sets);
        training::mean_loss(&self.inner, &corpus.inner, &examples)
            .map(|l| l as f64)
            .map_err(value_err)
    }
}

fn run_config(config: Option<&str>) -> PyResult<RunConfig> {
    match config {
        Some(text) => serde_json::from_str(text).map_err(value_err),
        None => Ok(RunConfig::default()),
    }
}

/// Trains one seed; returns the selected model and its run metrics.
#[pyfunction]
#[pyo3(signature = (train, dev=None, config=None, seed=1, regime=None, variant=None))]
fn train<'py>(
    py: Python<'py>,
    train: &Corpus,
    dev: Option<&Corpus>,
    config: Option<&str>,
    seed: u64,
    regime: Option<&str>,
    variant: Option<&str>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let mut cfg = run_config(config)?;
    if let Some(r) = regime {
        cfg.train.regime = r.parse().map_err(PyValueError::new_err)?;
    }
    if let Some(v) = variant {
        cfg.model.variant = v.parse::<Variant>().map_err(PyValueError::new_err)?;
    }
    let dev = dev.map(|d| &d.inner);
    let run = py
        .detach(|| training::train_seed(&train.inner, dev, &cfg.model, &cfg.train, seed, &mut ()))
        .map_err(|e| match e {
            training::TrainError::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
            other => value_err(other),
        })?;
    let metrics = to_py(py, &run.metrics)?;
    Ok((Model { inner: run.model }, metrics))
}

fn states(maps: Vec<BTreeMap<String, String>>) -> PyResult<Vec<DialogueState>> {
    let tok = Tokenizer::default();
    maps.into_iter()
        .enumerate()
        .map(|(i, m)| {
            let assignments = m
                .into_iter()
                .map(|(k, v)| Ok((k.parse::<SlotId>().map_err(PyValueError::new_err)?, tok.tokenize(&v))))
                .collect::<PyResult<_>>()?;
            Ok(DialogueState { turn: i + 1, assignments })
        })
        .collect()
}

#[pyfunction]
fn slot_accuracy(preds: Vec<BTreeMap<String, String>>, golds: Vec<BTreeMap<String, String>>, slots: Vec<String>) -> PyResult<f64> {
    evaluation::slot_accuracy(&states(preds)?, &states(golds)?, &parse_slots(slots)?).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (preds, golds, slots, active_only=false))]
fn joint_goal_accuracy(
    preds: Vec<BTreeMap<String, String>>,
    golds: Vec<BTreeMap<String, String>>,
    slots: Vec<String>,
    active_only: bool,
) -> PyResult<f64> {
    evaluation::joint_goal_accuracy(&states(preds)?, &states(golds)?, &parse_slots(slots)?, active_only).map_err(value_err)
}

#[pyfunction]
fn average_goal_accuracy(
    preds: Vec<BTreeMap<String, String>>,
    golds: Vec<BTreeMap<String, String>>,
    slots: Vec<String>,
) -> PyResult<Option<f64>> {
    evaluation::average_goal_accuracy(&states(preds)?, &states(golds)?, &parse_slots(slots)?).map_err(value_err)
}

#[pyfunction]
fn precision() -> &'static str {
    agg_dst::model::precision_name()
}

#[pymodule]
fn agg_dst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(slot_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(joint_goal_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_goal_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(precision, m)?)?;
    Ok(())
}
