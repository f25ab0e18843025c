//! Dialogue data model, history construction, and supervision regimes.

mod io;
mod vocab;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_corpus, parse_corpus, write_corpus};
pub use vocab::{EncodedTokens, Vocab, EOS, EOS_ID, NONE, PAD, PAD_ID, SOS, SOS_ID, UNK, UNK_ID};

pub type Tokens = Vec<String>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema error: {msg}")]
    Schema { line: usize, msg: String },
    #[error("dialogue {id}: turn {turn} outside 1..={len}")]
    TurnOutOfRange { id: String, turn: usize, len: usize },
    #[error("dialogue {0}: weak-service supervision needs a service completion map")]
    MissingCompletion(String),
    #[error("subsample rate {0} outside (0, 1]")]
    InvalidRate(f64),
}

/// Whitespace tokenizer, lowercasing unless `preserve_case` is set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub preserve_case: bool,
}

impl Tokenizer {
    pub fn tokenize(&self, text: &str) -> Tokens {
        text.split_whitespace()
            .map(|t| {
                if self.preserve_case {
                    t.to_string()
                } else {
                    t.to_lowercase()
                }
            })
            .collect()
    }
}

/// Lowercase and collapse whitespace; applied to predictions and gold alike.
pub fn normalize_value(value: &str) -> String {
    value
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A `(domain, slot name)` pair, written `domain-slot` on the wire.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId {
    pub domain: String,
    pub slot: String,
}

impl SlotId {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>) -> Self {
        SlotId {
            domain: domain.into(),
            slot: slot.into(),
        }
    }

    /// Tokens of the domain name followed by tokens of the slot name.
    pub fn name_tokens(&self) -> Tokens {
        self.domain
            .split_whitespace()
            .chain(self.slot.split_whitespace())
            .map(str::to_string)
            .collect()
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.domain, self.slot)
    }
}

impl FromStr for SlotId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('-') {
            Some((d, sl)) if !d.trim().is_empty() && !sl.trim().is_empty() => {
                Ok(SlotId::new(d.trim(), sl.trim()))
            }
            _ => Err(format!("slot id {s:?} is not of the form domain-slot")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    /// 1-based.
    pub index: usize,
    pub user: Tokens,
    pub agent: Tokens,
}

/// Slot assignments after a turn. Absent slots have value none.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogueState {
    pub turn: usize,
    pub assignments: BTreeMap<SlotId, Tokens>,
}

impl DialogueState {
    /// Value of `slot` as a normalized string, `"none"` when absent.
    pub fn value_of(&self, slot: &SlotId) -> String {
        self.assignments
            .get(slot)
            .map(|v| normalize_value(&v.join(" ")))
            .unwrap_or_else(|| NONE.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub gold_states: Vec<DialogueState>,
    pub domains: BTreeSet<String>,
    /// Service name → turn at which it was completed.
    pub service_done: Option<BTreeMap<String, usize>>,
}

impl Dialogue {
    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// `u_1 ‖ a_1 ‖ u_2 ‖ a_2 ‖ … ‖ a_{j−1} ‖ u_j`.
    pub fn history(&self, j: usize) -> Result<Tokens, CorpusError> {
        if j == 0 || j > self.turns.len() {
            return Err(CorpusError::TurnOutOfRange {
                id: self.id.clone(),
                turn: j,
                len: self.turns.len(),
            });
        }
        let mut out = Vec::new();
        for turn in &self.turns[..j - 1] {
            out.extend(turn.user.iter().cloned());
            out.extend(turn.agent.iter().cloned());
        }
        out.extend(self.turns[j - 1].user.iter().cloned());
        Ok(out)
    }

    pub fn state(&self, j: usize) -> &DialogueState {
        &self.gold_states[j - 1]
    }
}

/// Free-function form of [`Dialogue::history`].
pub fn build_history(d: &Dialogue, j: usize) -> Result<Tokens, CorpusError> {
    d.history(j)
}

/// Ordered slot list shared by a corpus and the model trained on it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCatalog {
    slots: Vec<SlotId>,
}

impl SlotCatalog {
    pub fn new(slots: Vec<SlotId>) -> Self {
        let mut out = SlotCatalog::default();
        for s in slots {
            out.insert(s);
        }
        out
    }

    /// Appends `slot` unless present. Returns whether it was new.
    pub fn insert(&mut self, slot: SlotId) -> bool {
        if self.slots.contains(&slot) {
            false
        } else {
            self.slots.push(slot);
            true
        }
    }

    pub fn slots(&self) -> &[SlotId] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn contains(&self, slot: &SlotId) -> bool {
        self.slots.contains(slot)
    }

    pub fn position(&self, slot: &SlotId) -> Option<usize> {
        self.slots.iter().position(|s| s == slot)
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.slots.iter().map(|s| s.domain.clone()).collect()
    }

    pub fn slots_of(&self, domain: &str) -> Vec<SlotId> {
        self.slots.iter().filter(|s| s.domain == domain).cloned().collect()
    }
}

/// A loaded corpus: dialogues plus the slot catalog and declared unseen services.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub catalog: SlotCatalog,
    pub unseen_services: BTreeSet<String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    /// Same catalog, dialogues restricted to those tagged with `domain`.
    pub fn filter_domain(&self, domain: &str) -> Corpus {
        Corpus {
            dialogues: self
                .dialogues
                .iter()
                .filter(|d| d.domains.contains(domain))
                .cloned()
                .collect(),
            catalog: self.catalog.clone(),
            unseen_services: self.unseen_services.clone(),
        }
    }

    pub fn with_dialogues(&self, dialogues: Vec<Dialogue>) -> Corpus {
        Corpus {
            dialogues,
            catalog: self.catalog.clone(),
            unseen_services: self.unseen_services.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Every turn labeled.
    Full,
    /// Only the final turn labeled.
    WeakFinal,
    /// Each service labeled once, at its completion turn, on its own slots.
    WeakService,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Full => "full",
            Regime::WeakFinal => "weak-final",
            Regime::WeakService => "weak-service",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Regime::Full),
            "weak-final" => Ok(Regime::WeakFinal),
            "weak-service" => Ok(Regime::WeakService),
            other => Err(format!(
                "unknown regime {other:?}; expected full, weak-final or weak-service"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTurn {
    pub turn: usize,
    pub slots: Vec<SlotId>,
}

/// Which turns of a dialogue carry labels, and on which slots.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionSet {
    pub dialogue_id: String,
    pub regime: Regime,
    pub labels: Vec<LabeledTurn>,
}

impl SupervisionSet {
    pub fn turns(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.turn).collect()
    }
}

pub fn derive_supervision(
    d: &Dialogue,
    regime: Regime,
    catalog: &SlotCatalog,
) -> Result<SupervisionSet, CorpusError> {
    let all = catalog.slots().to_vec();
    let labels = match regime {
        Regime::Full => (1..=d.num_turns())
            .map(|turn| LabeledTurn {
                turn,
                slots: all.clone(),
            })
            .collect(),
        Regime::WeakFinal => {
            if d.num_turns() == 0 {
                Vec::new()
            } else {
                vec![LabeledTurn {
                    turn: d.num_turns(),
                    slots: all,
                }]
            }
        }
        Regime::WeakService => {
            let done = d
                .service_done
                .as_ref()
                .ok_or_else(|| CorpusError::MissingCompletion(d.id.clone()))?;
            let mut labels: Vec<LabeledTurn> = done
                .iter()
                .map(|(service, &turn)| LabeledTurn {
                    turn,
                    slots: catalog.slots_of(service),
                })
                .filter(|l| !l.slots.is_empty())
                .collect();
            labels.sort_by_key(|l| l.turn);
            labels
        }
    };
    Ok(SupervisionSet {
        dialogue_id: d.id.clone(),
        regime,
        labels,
    })
}

/// Seeded dialogue-level sample of `⌈rate·n⌉` dialogues, in corpus order.
pub fn subsample(dialogues: &[Dialogue], rate: f64, seed: u64) -> Result<Vec<Dialogue>, CorpusError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(CorpusError::InvalidRate(rate));
    }
    let n = dialogues.len();
    let k = ((rate * n as f64).ceil() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| dialogues[i].clone()).collect())
}
