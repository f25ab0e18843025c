//! Template-grammar generator of multi-domain slot-filling dialogues with
//! per-turn gold states and per-service completion turns.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Dialogue, DialogueState, SlotCatalog, SlotId, Tokenizer, Turn};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("schema has no domains")]
    EmptySchema,
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BooleanTemplates {
    pub yes: Vec<String>,
    pub no: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub name: String,
    pub values: Vec<String>,
    /// Single-slot user templates; `{name}` is replaced by the value.
    #[serde(default)]
    pub templates: Vec<String>,
    /// Agent prompts asking for this slot.
    pub requests: Vec<String>,
    /// Boolean-style slot: templates imply `yes`/`no` without stating it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boolean: Option<BooleanTemplates>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub name: String,
    pub open: Vec<String>,
    pub confirm: Vec<String>,
    /// Multi-slot user templates.
    #[serde(default)]
    pub combos: Vec<String>,
    pub slots: Vec<SlotSchema>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub domains: Vec<DomainSchema>,
    /// Slot-irrelevant user turns. `{domain-slot}` placeholders are filled
    /// with a random value that is not assigned.
    pub chitchat: Vec<String>,
    pub chitchat_replies: Vec<String>,
    pub revisions: Vec<String>,
    pub closing: Vec<String>,
    pub closing_replies: Vec<String>,
    pub followups: Vec<String>,
}

/// Placeholder names inside `{…}`.
fn placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let Some(len) = rest[start..].find('}') else { break };
        out.push(&rest[start + 1..start + len]);
        rest = &rest[start + len + 1..];
    }
    out
}

fn render(template: &str, fill: &BTreeMap<&str, &str>) -> String {
    let mut out = template.to_string();
    for (k, v) in fill {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

impl Schema {
    pub fn default_schema() -> Schema {
        serde_json::from_str(include_str!("default_schema.json")).expect("bundled schema parses")
    }

    pub fn catalog(&self) -> SlotCatalog {
        SlotCatalog::new(
            self.domains
                .iter()
                .flat_map(|d| d.slots.iter().map(|s| SlotId::new(&d.name, &s.name)))
                .collect(),
        )
    }

    fn slot(&self, id: &str) -> Option<&SlotSchema> {
        let (domain, slot) = id.split_once('-')?;
        self.domains
            .iter()
            .find(|d| d.name == domain)?
            .slots
            .iter()
            .find(|s| s.name == slot)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSchema(m));
        if self.domains.is_empty() {
            return Err(SynthError::EmptySchema);
        }
        for (name, list) in [
            ("chitchat_replies", &self.chitchat_replies),
            ("revisions", &self.revisions),
            ("closing", &self.closing),
            ("closing_replies", &self.closing_replies),
            ("followups", &self.followups),
        ] {
            if list.is_empty() {
                return bad(format!("{name} is empty"));
            }
        }
        for d in &self.domains {
            if d.slots.is_empty() || d.open.is_empty() || d.confirm.is_empty() {
                return bad(format!("domain {} needs slots, open and confirm templates", d.name));
            }
            for t in d.open.iter().chain(&d.confirm) {
                if !placeholders(t).is_empty() {
                    return bad(format!("template {t:?} may not have placeholders"));
                }
            }
            for s in &d.slots {
                if s.values.is_empty() || s.requests.is_empty() {
                    return bad(format!("slot {}-{} needs values and requests", d.name, s.name));
                }
                match &s.boolean {
                    Some(b) => {
                        if b.yes.is_empty() || b.no.is_empty() {
                            return bad(format!("boolean slot {}-{} needs yes/no templates", d.name, s.name));
                        }
                    }
                    None => {
                        if s.templates.is_empty() {
                            return bad(format!("slot {}-{} has no templates", d.name, s.name));
                        }
                        for t in &s.templates {
                            if placeholders(t) != [s.name.as_str()] {
                                return bad(format!("template {t:?} must mention exactly {{{}}}", s.name));
                            }
                        }
                    }
                }
            }
            for t in &d.combos {
                let names = placeholders(t);
                if names.len() < 2 {
                    return bad(format!("combo {t:?} needs at least two placeholders"));
                }
                for n in names {
                    match d.slots.iter().find(|s| s.name == n) {
                        Some(s) if s.boolean.is_none() => {}
                        _ => return bad(format!("combo {t:?} names unknown or boolean slot {n}")),
                    }
                }
            }
        }
        for t in &self.chitchat {
            for p in placeholders(t) {
                if self.slot(p).is_none() {
                    return bad(format!("chitchat {t:?} names unknown slot {p}"));
                }
            }
        }
        Ok(())
    }
}

pub fn default_schema() -> Schema {
    Schema::default_schema()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_dialogues: usize,
    /// Inclusive range.
    pub domains_per_dialogue: (usize, usize),
    /// Inclusive range of user turns spent filling each domain.
    pub turns_per_domain: (usize, usize),
    pub chitchat_prob: f64,
    pub revision_prob: f64,
    /// Chance each ordinary slot of an active domain is requested.
    pub slot_prob: f64,
    /// Chance each boolean-style slot of an active domain is requested.
    pub boolean_prob: f64,
    pub seed: u64,
    /// Services written to the header as unseen.
    pub unseen_services: Vec<String>,
    pub id_prefix: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_dialogues: 100,
            domains_per_dialogue: (1, 2),
            turns_per_domain: (2, 3),
            chitchat_prob: 0.2,
            revision_prob: 0.15,
            slot_prob: 0.75,
            boolean_prob: 0.5,
            seed: 0,
            unseen_services: Vec::new(),
            id_prefix: "syn".into(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self, schema: &Schema) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        let (dmin, dmax) = self.domains_per_dialogue;
        if dmin == 0 || dmin > dmax {
            return bad("domains_per_dialogue must be a positive range");
        }
        if dmax > schema.domains.len() {
            return bad("domains_per_dialogue exceeds the schema's domain count");
        }
        let (tmin, tmax) = self.turns_per_domain;
        if tmin == 0 || tmin > tmax {
            return bad("turns_per_domain must be a positive range");
        }
        for p in [self.chitchat_prob, self.revision_prob, self.slot_prob, self.boolean_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Generates a corpus whose catalog is the whole schema. Each dialogue draws
/// from its own ChaCha stream, so dialogue `i` is independent of `n_dialogues`.
pub fn generate_corpus(schema: &Schema, cfg: &GenConfig) -> Result<Corpus, SynthError> {
    schema.validate()?;
    cfg.validate(schema)?;
    let dialogues = (0..cfg.n_dialogues)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            DialogueBuilder::new(schema, cfg, &mut rng).build(format!("{}-{}-{i:05}", cfg.id_prefix, cfg.seed))
        })
        .collect();
    Ok(Corpus {
        dialogues,
        catalog: schema.catalog(),
        unseen_services: cfg.unseen_services.iter().cloned().collect(),
    })
}

struct DialogueBuilder<'a, R: Rng> {
    schema: &'a Schema,
    cfg: &'a GenConfig,
    rng: &'a mut R,
    tok: Tokenizer,
    turns: Vec<Turn>,
    states: Vec<DialogueState>,
    current: BTreeMap<SlotId, Vec<String>>,
}

impl<'a, R: Rng> DialogueBuilder<'a, R> {
    fn new(schema: &'a Schema, cfg: &'a GenConfig, rng: &'a mut R) -> Self {
        DialogueBuilder {
            schema,
            cfg,
            rng,
            tok: Tokenizer::default(),
            turns: Vec::new(),
            states: Vec::new(),
            current: BTreeMap::new(),
        }
    }

    fn pick<'t>(&mut self, options: &'t [String]) -> &'t str {
        options.choose(self.rng).map_or("", String::as_str)
    }

    fn push_turn(&mut self, user: &str, agent: &str) {
        let index = self.turns.len() + 1;
        self.turns.push(Turn {
            index,
            user: self.tok.tokenize(user),
            agent: self.tok.tokenize(agent),
        });
        self.states.push(DialogueState {
            turn: index,
            assignments: self.current.clone(),
        });
    }

    fn maybe_chitchat(&mut self) {
        if !self.rng.gen_bool(self.cfg.chitchat_prob) {
            return;
        }
        let template = self.pick(&self.schema.chitchat).to_string();
        let mut fill = BTreeMap::new();
        let mut values = Vec::new();
        for p in placeholders(&template) {
            let slot = self.schema.slot(p).expect("validated");
            values.push((p, self.pick(&slot.values).to_string()));
        }
        for (p, v) in &values {
            fill.insert(*p, v.as_str());
        }
        let user = render(&template, &fill);
        let agent = self.pick(&self.schema.chitchat_replies).to_string();
        self.push_turn(&user, &agent);
    }

    /// User text realizing `slots` of `domain` with `values`; updates the state.
    fn realize(&mut self, domain: &DomainSchema, group: &[usize]) -> String {
        let mut values: BTreeMap<usize, String> = BTreeMap::new();
        for &si in group {
            let s = &domain.slots[si];
            // Slots sharing a pool (departure/destination) get distinct values.
            let taken: BTreeSet<String> = domain
                .slots
                .iter()
                .filter(|o| o.name != s.name)
                .filter_map(|o| self.current.get(&SlotId::new(&domain.name, &o.name)))
                .map(|v| v.join(" "))
                .chain(values.values().cloned())
                .collect();
            let pool: Vec<String> = s.values.iter().filter(|v| !taken.contains(*v)).cloned().collect();
            let pool = if pool.is_empty() { s.values.clone() } else { pool };
            let v = self.pick(&pool).to_string();
            values.insert(si, v);
        }
        self.say(domain, &values)
    }

    fn say(&mut self, domain: &DomainSchema, values: &BTreeMap<usize, String>) -> String {
        let span: Vec<usize> = values
            .keys()
            .copied()
            .filter(|&si| domain.slots[si].boolean.is_none())
            .collect();
        let mut parts = Vec::new();
        let names: BTreeSet<&str> = span.iter().map(|&si| domain.slots[si].name.as_str()).collect();
        let combos: Vec<&String> = domain
            .combos
            .iter()
            .filter(|t| placeholders(t).into_iter().collect::<BTreeSet<_>>() == names)
            .collect();
        if span.len() >= 2 && !combos.is_empty() && self.rng.gen_bool(0.5) {
            let t = combos.choose(self.rng).expect("non-empty");
            let fill = span
                .iter()
                .map(|&si| (domain.slots[si].name.as_str(), values[&si].as_str()))
                .collect();
            parts.push(render(t, &fill));
        } else {
            for &si in &span {
                let s = &domain.slots[si];
                let t = self.pick(&s.templates).to_string();
                parts.push(render(&t, &BTreeMap::from([(s.name.as_str(), values[&si].as_str())])));
            }
        }
        for (&si, v) in values {
            let s = &domain.slots[si];
            if let Some(b) = &s.boolean {
                let options = if v == "yes" { &b.yes } else { &b.no };
                parts.push(self.pick(options).to_string());
            }
        }
        for (&si, v) in values {
            let id = SlotId::new(&domain.name, &domain.slots[si].name);
            self.current.insert(id, self.tok.tokenize(v));
        }
        parts.join(" and ")
    }

    fn build(mut self, id: String) -> Dialogue {
        let schema = self.schema;
        let (dmin, dmax) = self.cfg.domains_per_dialogue;
        let k = self.rng.gen_range(dmin..=dmax);
        let mut order: Vec<usize> = (0..schema.domains.len()).collect();
        order.shuffle(self.rng);
        order.truncate(k);

        let mut service_done = BTreeMap::new();
        let mut domains = BTreeSet::new();
        for (pos, &di) in order.iter().enumerate() {
            let domain = &schema.domains[di];
            domains.insert(domain.name.clone());
            let mut chosen: Vec<usize> = (0..domain.slots.len())
                .filter(|&si| {
                    let p = if domain.slots[si].boolean.is_some() {
                        self.cfg.boolean_prob
                    } else {
                        self.cfg.slot_prob
                    };
                    self.rng.gen_bool(p)
                })
                .collect();
            if chosen.is_empty() {
                let span: Vec<usize> = (0..domain.slots.len())
                    .filter(|&si| domain.slots[si].boolean.is_none())
                    .collect();
                chosen.push(*span.choose(self.rng).unwrap_or(&0));
            }
            chosen.shuffle(self.rng);

            let (tmin, tmax) = self.cfg.turns_per_domain;
            let n_turns = self.rng.gen_range(tmin..=tmax);
            // Group g receives chosen[cuts[g]..cuts[g+1]]; groups may be empty.
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_turns];
            for (i, &si) in chosen.iter().enumerate() {
                let g = if i < n_turns {
                    n_turns - 1 - (i % n_turns)
                } else {
                    self.rng.gen_range(0..n_turns)
                };
                groups[g].push(si);
            }
            for g in &mut groups {
                g.sort_unstable();
            }
            let revise_at = if n_turns >= 2 && self.rng.gen_bool(self.cfg.revision_prob) {
                Some(self.rng.gen_range(1..n_turns))
            } else {
                None
            };

            let mut mentioned: Vec<usize> = Vec::new();
            for (g, group) in groups.iter().enumerate() {
                self.maybe_chitchat();
                if revise_at == Some(g) {
                    let span: Vec<usize> = mentioned
                        .iter()
                        .copied()
                        .filter(|&si| domain.slots[si].boolean.is_none())
                        .collect();
                    if let Some(&si) = span.choose(self.rng) {
                        let id = SlotId::new(&domain.name, &domain.slots[si].name);
                        let old = self.current.get(&id).cloned().unwrap_or_default().join(" ");
                        let others: BTreeSet<String> = self
                            .current
                            .iter()
                            .filter(|(k, _)| k.domain == domain.name)
                            .map(|(_, v)| v.join(" "))
                            .collect();
                        let pool: Vec<String> = domain.slots[si]
                            .values
                            .iter()
                            .filter(|v| **v != old && !others.contains(*v))
                            .cloned()
                            .collect();
                        if let Some(v) = pool.choose(self.rng).cloned() {
                            let lead = self.pick(&schema.revisions).to_string();
                            let said = self.say(domain, &BTreeMap::from([(si, v)]));
                            let ack = self.pick(&schema.chitchat_replies).to_string();
                            self.push_turn(&format!("{lead} {said}"), &ack);
                        }
                    }
                }
                let mut user = if g == 0 {
                    self.pick(&domain.open).to_string()
                } else {
                    String::new()
                };
                if !group.is_empty() {
                    let said = self.realize(domain, group);
                    user = if user.is_empty() { said } else { format!("{user} . {said}") };
                }
                if user.is_empty() {
                    user = self.pick(&schema.chitchat_replies).to_string();
                }
                mentioned.extend(group.iter().copied());
                let last = g + 1 == groups.len();
                let agent = if last {
                    let mut a = self.pick(&domain.confirm).to_string();
                    if pos + 1 < order.len() {
                        a = format!("{a} {}", self.pick(&schema.followups));
                    }
                    a
                } else {
                    match groups[g + 1].first() {
                        Some(&next) => self.pick(&domain.slots[next].requests).to_string(),
                        None => self.pick(&schema.followups).to_string(),
                    }
                };
                self.push_turn(&user, &agent);
                if last {
                    service_done.insert(domain.name.clone(), self.turns.len());
                }
            }
        }
        self.maybe_chitchat();
        let closing = self.pick(&schema.closing).to_string();
        let reply = self.pick(&schema.closing_replies).to_string();
        self.push_turn(&closing, &reply);

        Dialogue {
            id,
            turns: self.turns,
            gold_states: self.states,
            domains,
            service_done: Some(service_done),
        }
    }
}
