use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Corpus, CorpusError, Dialogue, DialogueState, SlotCatalog, SlotId, Tokenizer, Turn, NONE,
};

#[derive(Serialize, Deserialize)]
struct RawTurn {
    #[serde(default)]
    agent: String,
    #[serde(default)]
    user: String,
}

#[derive(Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    #[serde(default)]
    domains: Vec<String>,
    turns: Vec<RawTurn>,
    states: Vec<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    service_done: Option<BTreeMap<String, usize>>,
}

#[derive(Serialize, Deserialize)]
struct RawSlot {
    domain: String,
    slot: String,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    catalog: Vec<RawSlot>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    unseen_services: Vec<String>,
}

pub fn load_corpus(path: impl AsRef<Path>, tokenizer: Tokenizer) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, tokenizer)
}

/// Parses JSON-lines text. A leading `{"catalog": [...]}` record makes the
/// catalog authoritative: states naming other slots are rejected. Without
/// one the catalog is the slots seen, in order of first appearance.
pub fn parse_corpus(text: &str, tokenizer: Tokenizer) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    let mut declared = false;
    let mut first_record = true;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CorpusError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        let is_header = value.get("catalog").is_some() && value.get("id").is_none();
        if is_header {
            if !first_record {
                return Err(CorpusError::Schema {
                    line: line_no,
                    msg: "catalog header must be the first record".into(),
                });
            }
            let header: RawHeader = serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            for s in header.catalog {
                corpus.catalog.insert(SlotId::new(s.domain, s.slot));
            }
            corpus.unseen_services = header.unseen_services.into_iter().collect();
            declared = true;
        } else {
            let raw: RawDialogue = serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            let d = convert(raw, tokenizer, line_no, &mut corpus.catalog, declared)?;
            corpus.dialogues.push(d);
        }
        first_record = false;
    }
    Ok(corpus)
}

fn convert(
    raw: RawDialogue,
    tokenizer: Tokenizer,
    line: usize,
    catalog: &mut SlotCatalog,
    declared: bool,
) -> Result<Dialogue, CorpusError> {
    let schema = |msg: String| CorpusError::Schema { line, msg };
    let n = raw.turns.len();
    if raw.states.len() != n {
        return Err(schema(format!(
            "dialogue {} has {} states for {} turns",
            raw.id,
            raw.states.len(),
            n
        )));
    }
    let turns = raw
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| Turn {
            index: i + 1,
            user: tokenizer.tokenize(&t.user),
            agent: tokenizer.tokenize(&t.agent),
        })
        .collect();
    let mut gold_states = Vec::with_capacity(n);
    for (i, raw_state) in raw.states.iter().enumerate() {
        let mut assignments = BTreeMap::new();
        for (key, value) in raw_state {
            let slot: SlotId = key.parse().map_err(schema)?;
            if declared && !catalog.contains(&slot) {
                return Err(schema(format!("state references undeclared slot {slot}")));
            }
            catalog.insert(slot.clone());
            let tokens = tokenizer.tokenize(value);
            if tokens.is_empty() {
                return Err(schema(format!("empty value for slot {slot}")));
            }
            if tokens.len() == 1 && tokens[0].eq_ignore_ascii_case(NONE) {
                continue;
            }
            assignments.insert(slot, tokens);
        }
        gold_states.push(DialogueState {
            turn: i + 1,
            assignments,
        });
    }
    if let Some(done) = &raw.service_done {
        for (service, &turn) in done {
            if turn == 0 || turn > n {
                return Err(schema(format!(
                    "service {service} completed at turn {turn}, outside 1..={n}"
                )));
            }
        }
    }
    Ok(Dialogue {
        id: raw.id,
        turns,
        gold_states,
        domains: raw.domains.into_iter().collect::<BTreeSet<_>>(),
        service_done: raw.service_done,
    })
}

/// Writes the header (when the catalog is non-empty) and one line per dialogue.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<(), CorpusError> {
    if !corpus.catalog.is_empty() {
        let header = RawHeader {
            catalog: corpus
                .catalog
                .slots()
                .iter()
                .map(|s| RawSlot {
                    domain: s.domain.clone(),
                    slot: s.slot.clone(),
                })
                .collect(),
            unseen_services: corpus.unseen_services.iter().cloned().collect(),
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    for d in &corpus.dialogues {
        let raw = RawDialogue {
            id: d.id.clone(),
            domains: d.domains.iter().cloned().collect(),
            turns: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    agent: t.agent.join(" "),
                    user: t.user.join(" "),
                })
                .collect(),
            states: d
                .gold_states
                .iter()
                .map(|s| {
                    s.assignments
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.join(" ")))
                        .collect()
                })
                .collect(),
            service_done: d.service_done.clone(),
        };
        serde_json::to_writer(&mut out, &raw).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
