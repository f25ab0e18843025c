//! Turn-level scoring: slot accuracy, joint and average goal accuracy,
//! per-domain and seen/unseen splits, and attention export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Real;
use crate::corpus::{Corpus, Dialogue, DialogueState, SlotId, NONE};
use crate::model::{DstModel, ModelError, Variant};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predicted states for {golds} gold states")]
    Misaligned { preds: usize, golds: usize },
    #[error("nothing to score")]
    NothingToScore,
    #[error("corpus slot {0} is not in the model catalog")]
    UnknownSlot(SlotId),
    #[error("attention dumps need the attention-guided variant, model is {0}")]
    Unsupported(Variant),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn aligned(preds: &[DialogueState], golds: &[DialogueState]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(EvalError::Misaligned {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    Ok(())
}

/// Domains with at least one non-none gold slot.
pub fn active_services(gold: &DialogueState) -> BTreeSet<String> {
    gold.assignments
        .iter()
        .filter(|(s, _)| gold.value_of(s) != NONE)
        .map(|(s, _)| s.domain.clone())
        .collect()
}

/// Fraction of (turn, slot) pairs whose normalized values agree.
pub fn slot_accuracy(preds: &[DialogueState], golds: &[DialogueState], slots: &[SlotId]) -> Result<f64> {
    aligned(preds, golds)?;
    let total = preds.len() * slots.len();
    if total == 0 {
        return Err(EvalError::NothingToScore);
    }
    let correct: usize = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| slots.iter().filter(|s| p.value_of(s) == g.value_of(s)).count())
        .sum();
    Ok(correct as f64 / total as f64)
}

/// Fraction of turns whose whole state is right. With `active_only`, only
/// slots of services active in the gold state are compared and turns with
/// no active service are not scored.
pub fn joint_goal_accuracy(
    preds: &[DialogueState],
    golds: &[DialogueState],
    slots: &[SlotId],
    active_only: bool,
) -> Result<f64> {
    aligned(preds, golds)?;
    let mut scored = 0usize;
    let mut correct = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        let active = active_services(g);
        if active_only && active.is_empty() {
            continue;
        }
        scored += 1;
        let ok = slots
            .iter()
            .filter(|s| !active_only || active.contains(&s.domain))
            .all(|s| p.value_of(s) == g.value_of(s));
        correct += ok as usize;
    }
    if scored == 0 {
        return Err(EvalError::NothingToScore);
    }
    Ok(correct as f64 / scored as f64)
}

/// Accuracy over (turn, slot) pairs whose gold value is not none; `None`
/// when there are no such pairs.
pub fn average_goal_accuracy(
    preds: &[DialogueState],
    golds: &[DialogueState],
    slots: &[SlotId],
) -> Result<Option<f64>> {
    aligned(preds, golds)?;
    let (mut active, mut correct) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        for s in slots {
            let gv = g.value_of(s);
            if gv != NONE {
                active += 1;
                correct += (p.value_of(s) == gv) as usize;
            }
        }
    }
    Ok((active > 0).then(|| correct as f64 / active as f64))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Keep only dialogues tagged with this domain.
    pub domain: Option<String>,
    /// Schema-guided mode: decode and compare active-service slots only.
    pub active_only: bool,
    /// Worker threads for inference; 0 or 1 means the calling thread.
    pub threads: usize,
    /// Keep per-turn predictions in the report.
    pub keep_predictions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub predicted: BTreeMap<String, String>,
    pub gold: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    /// (turn, service) frames scored.
    pub frames: usize,
    pub joint_goal_accuracy: Option<f64>,
    pub average_goal_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slot_accuracy: f64,
    pub joint_goal_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_goal_accuracy: Option<f64>,
    pub per_domain_joint_goal_accuracy: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen: Option<SplitMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen: Option<SplitMetrics>,
    pub dialogues: usize,
    pub turns: usize,
    pub slot_pairs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<TurnRecord>,
}

impl EvalReport {
    /// Flat metric map, for averaging across seeds.
    pub fn metric_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("slot_accuracy".to_string(), self.slot_accuracy);
        m.insert("joint_goal_accuracy".to_string(), self.joint_goal_accuracy);
        if let Some(a) = self.average_goal_accuracy {
            m.insert("average_goal_accuracy".to_string(), a);
        }
        for (d, v) in &self.per_domain_joint_goal_accuracy {
            m.insert(format!("joint_goal_accuracy.{d}"), *v);
        }
        for (name, split) in [("seen", &self.seen), ("unseen", &self.unseen)] {
            if let Some(s) = split {
                if let Some(v) = s.joint_goal_accuracy {
                    m.insert(format!("{name}.joint_goal_accuracy"), v);
                }
                if let Some(v) = s.average_goal_accuracy {
                    m.insert(format!("{name}.average_goal_accuracy"), v);
                }
            }
        }
        m
    }
}

/// Gold and predicted states for every turn of a corpus.
#[derive(Clone, Debug, Default)]
pub struct Scored {
    pub ids: Vec<(String, usize)>,
    pub domains: Vec<BTreeSet<String>>,
    pub preds: Vec<DialogueState>,
    pub golds: Vec<DialogueState>,
}

fn predict_dialogue(model: &DstModel, d: &Dialogue, slots: &[SlotId], active_only: bool) -> Result<Vec<DialogueState>> {
    (1..=d.num_turns())
        .map(|j| {
            let gold = d.state(j);
            let wanted: Vec<SlotId> = if active_only {
                let active = active_services(gold);
                slots.iter().filter(|s| active.contains(&s.domain)).cloned().collect()
            } else {
                slots.to_vec()
            };
            Ok(model.predict_state(d, j, &wanted)?)
        })
        .collect()
}

/// Runs the model at every turn of every dialogue. Dialogues are split
/// across `threads` workers and results are joined in corpus order.
pub fn predict_corpus(model: &DstModel, corpus: &Corpus, active_only: bool, threads: usize) -> Result<Scored> {
    for s in corpus.catalog.slots() {
        if !model.catalog().contains(s) {
            return Err(EvalError::UnknownSlot(s.clone()));
        }
    }
    for d in &corpus.dialogues {
        for st in &d.gold_states {
            if let Some(s) = st.assignments.keys().find(|s| !model.catalog().contains(s)) {
                return Err(EvalError::UnknownSlot(s.clone()));
            }
        }
    }
    let slots = model.catalog().slots().to_vec();
    let dialogues = &corpus.dialogues;
    let per_dialogue: Vec<Vec<DialogueState>> = if threads <= 1 || dialogues.len() < 2 {
        dialogues
            .iter()
            .map(|d| predict_dialogue(model, d, &slots, active_only))
            .collect::<Result<_>>()?
    } else {
        let chunk = dialogues.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Vec<DialogueState>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = dialogues
                .chunks(chunk)
                .map(|part| {
                    let slots = &slots;
                    scope.spawn(move || {
                        part.iter()
                            .map(|d| predict_dialogue(model, d, slots, active_only))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(dialogues.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let mut out = Scored::default();
    for (d, preds) in dialogues.iter().zip(per_dialogue) {
        for (j, p) in preds.into_iter().enumerate() {
            out.ids.push((d.id.clone(), j + 1));
            out.domains.push(d.domains.clone());
            out.preds.push(p);
            out.golds.push(d.state(j + 1).clone());
        }
    }
    Ok(out)
}

fn state_map(s: &DialogueState) -> BTreeMap<String, String> {
    s.assignments
        .keys()
        .map(|k| (k.to_string(), s.value_of(k)))
        .filter(|(_, v)| v != NONE)
        .collect()
}

/// Aggregates scored turns into a report over `slots`.
pub fn report(
    scored: &Scored,
    slots: &[SlotId],
    active_only: bool,
    unseen_services: &BTreeSet<String>,
    dialogues: usize,
    keep_predictions: bool,
) -> Result<EvalReport> {
    let (preds, golds) = (&scored.preds, &scored.golds);
    let mut per_domain = BTreeMap::new();
    let domains: BTreeSet<&str> = slots.iter().map(|s| s.domain.as_str()).collect();
    for dom in domains {
        let idx: Vec<usize> = (0..golds.len()).filter(|&i| scored.domains[i].contains(dom)).collect();
        if idx.is_empty() {
            continue;
        }
        let dslots: Vec<SlotId> = slots.iter().filter(|s| s.domain == dom).cloned().collect();
        let p: Vec<DialogueState> = idx.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<DialogueState> = idx.iter().map(|&i| golds[i].clone()).collect();
        per_domain.insert(dom.to_string(), joint_goal_accuracy(&p, &g, &dslots, false)?);
    }
    let (seen, unseen) = if unseen_services.is_empty() {
        (None, None)
    } else {
        (
            Some(split_metrics(preds, golds, slots, |s| !unseen_services.contains(s))),
            Some(split_metrics(preds, golds, slots, |s| unseen_services.contains(s))),
        )
    };
    Ok(EvalReport {
        slot_accuracy: slot_accuracy(preds, golds, slots)?,
        joint_goal_accuracy: joint_goal_accuracy(preds, golds, slots, active_only)?,
        average_goal_accuracy: average_goal_accuracy(preds, golds, slots)?,
        per_domain_joint_goal_accuracy: per_domain,
        seen,
        unseen,
        dialogues,
        turns: golds.len(),
        slot_pairs: golds.len() * slots.len(),
        predictions: if keep_predictions {
            scored
                .ids
                .iter()
                .zip(preds.iter().zip(golds))
                .map(|((id, turn), (p, g))| TurnRecord {
                    dialogue_id: id.clone(),
                    turn: *turn,
                    predicted: state_map(p),
                    gold: state_map(g),
                })
                .collect()
        } else {
            Vec::new()
        },
    })
}

/// Metrics over (turn, active service) frames for services selected by `keep`.
fn split_metrics(
    preds: &[DialogueState],
    golds: &[DialogueState],
    slots: &[SlotId],
    keep: impl Fn(&str) -> bool,
) -> SplitMetrics {
    let (mut frames, mut joint) = (0usize, 0usize);
    let (mut active, mut correct) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(golds) {
        for service in active_services(g).into_iter().filter(|s| keep(s)) {
            frames += 1;
            let mut all = true;
            for s in slots.iter().filter(|s| s.domain == service) {
                let (pv, gv) = (p.value_of(s), g.value_of(s));
                all &= pv == gv;
                if gv != NONE {
                    active += 1;
                    correct += (pv == gv) as usize;
                }
            }
            joint += all as usize;
        }
    }
    SplitMetrics {
        frames,
        joint_goal_accuracy: (frames > 0).then(|| joint as f64 / frames as f64),
        average_goal_accuracy: (active > 0).then(|| correct as f64 / active as f64),
    }
}

/// Predicts every turn of `corpus` and scores it against the gold states.
pub fn evaluate(model: &DstModel, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    let filtered;
    let corpus = match &opts.domain {
        Some(d) => {
            filtered = corpus.filter_domain(d);
            &filtered
        }
        None => corpus,
    };
    let scored = predict_corpus(model, corpus, opts.active_only, opts.threads)?;
    report(
        &scored,
        model.catalog().slots(),
        opts.active_only,
        &corpus.unseen_services,
        corpus.dialogues.len(),
        opts.keep_predictions,
    )
}

/// Initialization attention of one slot over the history tokens of one turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub dialogue_id: String,
    pub turn: usize,
    pub slot: String,
    pub tokens: Vec<String>,
    pub weights: Vec<Real>,
}

impl AttentionDump {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

pub fn dump_attention(model: &DstModel, d: &Dialogue, turn: usize, slots: &[SlotId]) -> Result<Vec<AttentionDump>> {
    if model.variant() != Variant::Agg {
        return Err(EvalError::Unsupported(model.variant()));
    }
    let tokens = d.history(turn).map_err(ModelError::from)?;
    let preds = model.predict_slots(d, turn, slots, false)?;
    Ok(preds
        .into_iter()
        .map(|p| AttentionDump {
            dialogue_id: d.id.clone(),
            turn,
            slot: p.slot.to_string(),
            tokens: tokens.clone(),
            weights: p.attention.unwrap_or_default(),
        })
        .collect())
}

pub fn write_attention_jsonl<W: Write>(dumps: &[AttentionDump], mut out: W) -> Result<()> {
    for d in dumps {
        serde_json::to_writer(&mut out, d).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// One row per (slot, token) with its weight, for plotting.
pub fn write_attention_tsv<W: Write>(dumps: &[AttentionDump], mut out: W) -> Result<()> {
    writeln!(out, "dialogue_id\tturn\tslot\tposition\ttoken\tweight")?;
    for d in dumps {
        for (i, (t, w)) in d.tokens.iter().zip(&d.weights).enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}\t{}\t{}", d.dialogue_id, d.turn, d.slot, i, t, w)?;
        }
    }
    Ok(())
}

/// How often the attention peak falls inside the user utterance that
/// introduced a slot's final value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pairs: usize,
    pub hits: usize,
    pub rate: f64,
}

/// Token span of user utterance `j` inside the history at turn `last`.
fn user_span(d: &Dialogue, j: usize) -> (usize, usize) {
    let mut pos = 0;
    for t in &d.turns[..j - 1] {
        pos += t.user.len() + t.agent.len();
    }
    (pos, pos + d.turns[j - 1].user.len())
}

/// Scores (dialogue, filled slot) pairs at each dialogue's final turn.
pub fn attention_alignment(model: &DstModel, dialogues: &[Dialogue]) -> Result<AlignmentReport> {
    let mut rep = AlignmentReport::default();
    for d in dialogues {
        let n = d.num_turns();
        if n == 0 {
            continue;
        }
        let last = d.state(n);
        let filled: Vec<SlotId> = last.assignments.keys().cloned().collect();
        if filled.is_empty() {
            continue;
        }
        let dumps = dump_attention(model, d, n, &filled)?;
        for (slot, dump) in filled.iter().zip(&dumps) {
            let value = last.value_of(slot);
            // First turn from which the slot holds its final value.
            let mut intro = n;
            for j in (1..=n).rev() {
                if d.state(j).value_of(slot) == value {
                    intro = j;
                } else {
                    break;
                }
            }
            let (a, b) = user_span(d, intro);
            rep.pairs += 1;
            let peak = dump.argmax();
            rep.hits += (peak >= a && peak < b) as usize;
        }
    }
    rep.rate = if rep.pairs > 0 {
        rep.hits as f64 / rep.pairs as f64
    } else {
        0.0
    };
    Ok(rep)
}
