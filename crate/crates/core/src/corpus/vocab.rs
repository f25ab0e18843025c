use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Dialogue, SlotCatalog};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
/// Value sentinel for unassigned slots.
pub const NONE: &str = "none";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Word ids plus per-word character ids, ready for embedding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedTokens {
    pub ids: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
}

impl EncodedTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token ↔ index bijection with reserved ids 0–3, plus a character table
/// (index 0 is the unknown character).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    chars: Vec<char>,
    char_index: HashMap<char, usize>,
    token_chars: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    chars: String,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_parts(r.tokens, r.chars.chars().collect())
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            chars: v.chars.iter().skip(1).collect(),
        }
    }
}

impl Vocab {
    /// Reserved tokens and `none`, then the given tokens in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all: Vec<String> = [PAD, UNK, SOS, EOS, NONE].iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = all.iter().cloned().collect();
        for t in tokens {
            if seen.insert(t.clone()) {
                all.push(t);
            }
        }
        let chars: BTreeSet<char> = all.iter().flat_map(|t| t.chars()).collect();
        Vocab::from_parts(all, chars.into_iter().collect())
    }

    fn from_parts(tokens: Vec<String>, chars: Vec<char>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let mut all_chars = vec!['\u{0}'];
        all_chars.extend(chars.into_iter().filter(|&c| c != '\u{0}'));
        let char_index: HashMap<char, usize> = all_chars
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &c)| (c, i))
            .collect();
        let token_chars = tokens.iter().map(|t| chars_of(&char_index, t)).collect();
        Vocab {
            tokens,
            index,
            chars: all_chars,
            char_index,
            token_chars,
        }
    }

    /// Dialogue tokens seen at least `min_count` times, plus every domain,
    /// slot-name, and gold-value token regardless of count. Frequent tokens
    /// come first (ties alphabetical), so the order is stable.
    pub fn build(dialogues: &[Dialogue], catalog: &SlotCatalog, min_count: usize) -> Self {
        let min_count = min_count.max(1);
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for d in dialogues {
            for t in &d.turns {
                for tok in t.user.iter().chain(&t.agent) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut frequent: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        frequent.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

        let mut forced = BTreeSet::new();
        for s in catalog.slots() {
            forced.extend(s.name_tokens());
        }
        for d in dialogues {
            for st in &d.gold_states {
                for (slot, value) in &st.assignments {
                    forced.extend(slot.name_tokens());
                    forced.extend(value.iter().cloned());
                }
            }
        }
        Vocab::from_tokens(
            frequent
                .into_iter()
                .map(|(t, _)| t.to_string())
                .chain(forced),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn char_count(&self) -> usize {
        self.chars.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Character ids of vocabulary entry `id`.
    pub fn chars_of_id(&self, id: usize) -> &[usize] {
        &self.token_chars[id]
    }

    /// Word ids and character ids. Out-of-vocabulary words map to UNK but
    /// keep their own characters.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> EncodedTokens {
        let mut out = EncodedTokens::default();
        for t in tokens {
            let t = t.as_ref();
            let id = self.id(t);
            out.ids.push(id);
            if id == UNK_ID {
                out.chars.push(chars_of(&self.char_index, t));
            } else {
                out.chars.push(self.token_chars[id].clone());
            }
        }
        out
    }

    pub fn encode_ids(&self, ids: &[usize]) -> EncodedTokens {
        EncodedTokens {
            ids: ids.to_vec(),
            chars: ids.iter().map(|&i| self.token_chars[i].clone()).collect(),
        }
    }
}

fn chars_of(index: &HashMap<char, usize>, token: &str) -> Vec<usize> {
    let ids: Vec<usize> = token.chars().map(|c| index.get(&c).copied().unwrap_or(0)).collect();
    if ids.is_empty() {
        vec![0]
    } else {
        ids
    }
}
