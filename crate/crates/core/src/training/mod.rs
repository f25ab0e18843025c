//! Example construction, loss, the epoch loop with early stopping, and
//! seed averaging.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{clip_global_norm, AdamConfig, AdamState, Real, Tensor, TensorError, Var};
use crate::corpus::{
    derive_supervision, Corpus, CorpusError, Dialogue, Regime, SlotId, SupervisionSet, Tokenizer,
    Tokens, Vocab, EOS_ID, NONE, UNK_ID,
};
use crate::evaluation::{evaluate, EvalError, EvalOptions};
use crate::model::{DstModel, Graph, ModelConfig, ModelError, Variant};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged (seed {seed}, epoch {epoch}, dialogue {dialogue_id}, turn {turn}): {detail}")]
    Divergence {
        seed: u64,
        epoch: usize,
        dialogue_id: String,
        turn: usize,
        detail: String,
    },
    #[error("example refers to unknown dialogue {0}")]
    UnknownDialogue(String),
    #[error("reports to average disagree: {0}")]
    MismatchedReports(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub teacher_forcing: Real,
    /// Copied into the model config before initialization.
    pub dropout: Real,
    pub seeds: Vec<u64>,
    pub regime: Regime,
    /// Dev evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub clip_norm: Real,
    /// Minimum corpus frequency for a word to enter the vocabulary.
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 0.001,
            teacher_forcing: 0.5,
            dropout: 0.2,
            seeds: vec![1, 2, 3, 4, 5],
            regime: Regime::Full,
            patience: 6,
            clip_norm: 10.0,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return bad("teacher forcing ratio must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// Random stream used by one part of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Init,
    Shuffle,
    Dropout,
    Subsample,
}

/// Sub-seed for `component`, derived from a run seed.
pub fn sub_seed(seed: u64, component: Component) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component as u64 + 1);
    rng.gen()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    pub dialogue_id: String,
    pub turn: usize,
    /// Gold value tokens per supervised slot; unmentioned slots hold `none`.
    pub targets: Vec<(SlotId, Tokens)>,
}

pub fn supervise(corpus: &Corpus, regime: Regime) -> Result<Vec<SupervisionSet>> {
    Ok(corpus
        .dialogues
        .iter()
        .map(|d| derive_supervision(d, regime, &corpus.catalog))
        .collect::<std::result::Result<_, _>>()?)
}

/// One example per labeled turn, in corpus order. Sets naming dialogues
/// that are not in `corpus` are skipped.
pub fn build_examples(corpus: &Corpus, sets: &[SupervisionSet]) -> Vec<TrainExample> {
    let by_id: HashMap<&str, &SupervisionSet> = sets.iter().map(|s| (s.dialogue_id.as_str(), s)).collect();
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        let Some(set) = by_id.get(d.id.as_str()) else { continue };
        for label in &set.labels {
            let state = d.state(label.turn);
            out.push(TrainExample {
                dialogue_id: d.id.clone(),
                turn: label.turn,
                targets: label
                    .slots
                    .iter()
                    .map(|s| {
                        let v = state.assignments.get(s).cloned().unwrap_or_else(|| vec![NONE.to_string()]);
                        (s.clone(), v)
                    })
                    .collect(),
            })
        }
    }
    out
}

/// Target ids (value tokens then the end marker) and how many were unknown.
fn target_ids(model: &DstModel, ex: &TrainExample) -> (Vec<Vec<usize>>, usize) {
    let mut unknown = 0;
    let ids = ex
        .targets
        .iter()
        .map(|(_, toks)| {
            let mut ids: Vec<usize> = toks.iter().map(|t| model.vocab().id(t)).collect();
            unknown += ids.iter().filter(|&&i| i == UNK_ID).count();
            ids.push(EOS_ID);
            ids
        })
        .collect();
    (ids, unknown)
}

/// Builds the loss of `ex` on `g`. Teacher forcing and dropout follow the
/// graph's mode.
pub fn example_loss(g: &mut Graph<'_>, d: &Dialogue, ex: &TrainExample, ratio: Real) -> Result<Var> {
    let model = g.model();
    let slots: Vec<SlotId> = ex.targets.iter().map(|(s, _)| s.clone()).collect();
    model.check_slots(&slots)?;
    let history = d.history(ex.turn)?;
    if history.is_empty() {
        return Err(ModelError::EmptyHistory.into());
    }
    let tokens = model.vocab().encode(&history);
    let (targets, _) = target_ids(model, ex);
    let enc = g.encode_tokens(&tokens)?;
    let queries = g.slot_queries(&slots)?;
    let (h0, _) = g.init_decoder(&enc, queries)?;
    Ok(g.teacher_forced_loss(&enc, queries, h0, &targets, ratio)?)
}

/// Training-mode loss of one example; dropout and teacher forcing draw from `rng`.
pub fn loss(model: &DstModel, d: &Dialogue, ex: &TrainExample, ratio: Real, rng: ChaCha8Rng) -> Result<Real> {
    let mut g = model.training_graph(rng);
    let l = example_loss(&mut g, d, ex, ratio)?;
    Ok(g.tape.value(l).item())
}

/// Loss and per-parameter gradients (zeros for untouched parameters).
pub fn loss_and_gradients(
    model: &DstModel,
    d: &Dialogue,
    ex: &TrainExample,
    ratio: Real,
    rng: Option<ChaCha8Rng>,
) -> Result<(Real, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let value = accumulate(model, d, ex, ratio, rng, &mut grads)?;
    Ok((value, grads))
}

fn accumulate(
    model: &DstModel,
    d: &Dialogue,
    ex: &TrainExample,
    ratio: Real,
    rng: Option<ChaCha8Rng>,
    grads: &mut [Tensor],
) -> Result<Real> {
    let mut g = match rng {
        Some(r) => model.training_graph(r),
        None => model.graph(),
    };
    let l = example_loss(&mut g, d, ex, ratio)?;
    let value = g.tape.value(l).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let gr = g.tape.backward(l)?;
    for (i, v) in g.registered() {
        if let Some(t) = gr.get(v) {
            grads[i].add_assign(t);
        }
    }
    Ok(value)
}

/// Mean inference-mode loss with gold decoder inputs over `examples`.
pub fn mean_loss(model: &DstModel, corpus: &Corpus, examples: &[TrainExample]) -> Result<Real> {
    let index = dialogue_index(corpus);
    let mut total = 0.0;
    for ex in examples {
        let d = lookup(corpus, &index, ex)?;
        let mut g = model.graph();
        let l = example_loss(&mut g, d, ex, 1.0)?;
        total += g.tape.value(l).item();
    }
    Ok(total / examples.len().max(1) as Real)
}

fn dialogue_index(corpus: &Corpus) -> HashMap<&str, usize> {
    corpus.dialogues.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect()
}

fn lookup<'c>(corpus: &'c Corpus, index: &HashMap<&str, usize>, ex: &TrainExample) -> Result<&'c Dialogue> {
    index
        .get(ex.dialogue_id.as_str())
        .map(|&i| &corpus.dialogues[i])
        .ok_or_else(|| TrainError::UnknownDialogue(ex.dialogue_id.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    pub joint_goal_accuracy: f64,
    pub slot_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: Real,
    /// Wall-clock of the parameter updates alone.
    pub seconds: f64,
    /// Sum of `seconds` up to and including this epoch.
    pub cumulative_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<DevMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub regime: Regime,
    pub variant: Variant,
    pub examples: usize,
    pub dialogues: usize,
    /// Gold target tokens outside the vocabulary, per epoch.
    pub unknown_target_tokens: usize,
    pub epochs: Vec<EpochRecord>,
    /// Whole run including dev evaluation.
    pub total_seconds: f64,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl RunMetrics {
    pub fn mean_epoch_seconds(&self) -> Option<f64> {
        (!self.epochs.is_empty()).then(|| self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64)
    }
}

/// Hooks for progress reporting and instrumentation.
pub trait TrainObserver {
    fn example(&mut self, _ex: &TrainExample) {}
    fn epoch(&mut self, _seed: u64, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

/// Writes one line per epoch to standard error.
pub struct StderrProgress;

impl TrainObserver for StderrProgress {
    fn epoch(&mut self, seed: u64, r: &EpochRecord) {
        match &r.dev {
            Some(dev) => eprintln!(
                "seed {seed} epoch {} loss {:.4} time {:.1}s dev joint {:.4} slot {:.4}",
                r.epoch, r.loss, r.seconds, dev.joint_goal_accuracy, dev.slot_accuracy
            ),
            None => eprintln!("seed {seed} epoch {} loss {:.4} time {:.1}s", r.epoch, r.loss, r.seconds),
        }
    }
}

pub struct TrainedRun {
    pub model: DstModel,
    pub metrics: RunMetrics,
}

/// Fresh model for `train`, with a vocabulary over the train and dev dialogues.
pub fn init_model(train: &Corpus, dev: Option<&Corpus>, mcfg: &ModelConfig, tcfg: &TrainConfig, seed: u64) -> Result<DstModel> {
    let mut dialogues: Vec<Dialogue> = train.dialogues.clone();
    if let Some(dev) = dev {
        dialogues.extend(dev.dialogues.iter().cloned());
    }
    let vocab = Vocab::build(&dialogues, &train.catalog, tcfg.min_count);
    let cfg = ModelConfig {
        dropout: tcfg.dropout,
        ..mcfg.clone()
    };
    Ok(DstModel::new(cfg, Tokenizer::default(), vocab, train.catalog.clone(), sub_seed(seed, Component::Init))?)
}

/// Trains one seed. With a dev corpus the returned model is the one with the
/// best dev Joint GA; otherwise it is the last.
pub fn train_seed(
    train: &Corpus,
    dev: Option<&Corpus>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedRun> {
    let model = init_model(train, dev, mcfg, tcfg, seed)?;
    train_model(model, train, dev, tcfg, seed, observer)
}

/// Runs the epoch loop on an already initialized model.
pub fn train_model(
    mut model: DstModel,
    train: &Corpus,
    dev: Option<&Corpus>,
    tcfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedRun> {
    tcfg.validate()?;
    let start = Instant::now();
    let examples = build_examples(train, &supervise(train, tcfg.regime)?);
    let index = dialogue_index(train);
    let unknown: usize = examples.iter().map(|e| target_ids(&model, e).1).sum();
    let mut metrics = RunMetrics {
        seed,
        regime: tcfg.regime,
        variant: model.variant(),
        examples: examples.len(),
        dialogues: train.dialogues.len(),
        unknown_target_tokens: unknown,
        epochs: Vec::new(),
        total_seconds: 0.0,
        best_epoch: None,
        stopped_early: false,
    };
    let mut adam = AdamState::new(
        AdamConfig {
            lr: tcfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, Component::Shuffle));
    let mut graph_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, Component::Dropout));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut since_best = 0usize;
    let mut cumulative = 0.0;
    let mut grads: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();

    for epoch in 1..=tcfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            grads.iter_mut().for_each(|g| g.scale_assign(0.0));
            for &i in batch {
                let ex = &examples[i];
                observer.example(ex);
                let d = lookup(train, &index, ex)?;
                let rng = ChaCha8Rng::seed_from_u64(graph_rng.gen());
                let value = accumulate(&model, d, ex, tcfg.teacher_forcing, Some(rng), &mut grads)?;
                if !value.is_finite() {
                    return Err(TrainError::Divergence {
                        seed,
                        epoch,
                        dialogue_id: ex.dialogue_id.clone(),
                        turn: ex.turn,
                        detail: format!("loss is {value}"),
                    });
                }
                total += value;
            }
            let scale = 1.0 / batch.len() as Real;
            grads.iter_mut().for_each(|g| g.scale_assign(scale));
            clip_global_norm(&mut grads, tcfg.clip_norm);
            if let Err(e) = adam.step(model.params_mut(), &grads) {
                let ex = &examples[batch[0]];
                return Err(TrainError::Divergence {
                    seed,
                    epoch,
                    dialogue_id: ex.dialogue_id.clone(),
                    turn: ex.turn,
                    detail: e.to_string(),
                });
            }
        }
        let seconds = epoch_start.elapsed().as_secs_f64();
        cumulative += seconds;
        let dev_metrics = match dev {
            Some(dev) if !dev.is_empty() => {
                let t = Instant::now();
                let rep = evaluate(&model, dev, &EvalOptions::default())?;
                Some(DevMetrics {
                    joint_goal_accuracy: rep.joint_goal_accuracy,
                    slot_accuracy: rep.slot_accuracy,
                    seconds: t.elapsed().as_secs_f64(),
                })
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            loss: total / examples.len().max(1) as Real,
            seconds,
            cumulative_seconds: cumulative,
            dev: dev_metrics.clone(),
        };
        observer.epoch(seed, &record);
        metrics.epochs.push(record);
        if let Some(dm) = dev_metrics {
            if best.as_ref().map_or(true, |(b, _)| dm.joint_goal_accuracy > *b) {
                best = Some((dm.joint_goal_accuracy, model.params().to_vec()));
                metrics.best_epoch = Some(epoch);
                since_best = 0;
            } else {
                since_best += 1;
                if tcfg.patience > 0 && since_best >= tcfg.patience {
                    metrics.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().clone_from_slice(&params);
    } else if !metrics.epochs.is_empty() {
        metrics.best_epoch = Some(metrics.epochs.len());
    }
    metrics.total_seconds = start.elapsed().as_secs_f64();
    Ok(TrainedRun { model, metrics })
}

/// One run per configured seed, in order.
pub fn train(
    train: &Corpus,
    dev: Option<&Corpus>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<TrainedRun>> {
    tcfg.validate()?;
    mcfg.validate()?;
    tcfg.seeds
        .iter()
        .map(|&s| train_seed(train, dev, mcfg, tcfg, s, observer))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single report.
    pub stdev: f64,
    pub values: Vec<f64>,
}

/// Per-metric mean and sample standard deviation across seeds. Every
/// report must carry the same metric names.
pub fn seed_average(reports: &[BTreeMap<String, f64>]) -> Result<BTreeMap<String, MeanStd>> {
    let first = reports
        .first()
        .ok_or_else(|| TrainError::MismatchedReports("no reports".into()))?;
    for (i, r) in reports.iter().enumerate() {
        if r.len() != first.len() || r.keys().zip(first.keys()).any(|(a, b)| a != b) {
            return Err(TrainError::MismatchedReports(format!("report {i} has different metrics than report 0")));
        }
    }
    let n = reports.len() as f64;
    Ok(first
        .keys()
        .map(|k| {
            let values: Vec<f64> = reports.iter().map(|r| r[k]).collect();
            let mean = values.iter().sum::<f64>() / n;
            let stdev = if reports.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (k.clone(), MeanStd { mean, stdev, values })
        })
        .collect())
}
