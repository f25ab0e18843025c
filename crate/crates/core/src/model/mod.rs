//! The state-tracking network: shared embeddings, bidirectional GRU encoder,
//! per-slot GRU generator with soft-gated copy, and the two decoder
//! initializations (encoder last state vs. slot attention).

mod graph;

use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tensor, TensorError};
use crate::corpus::{
    build_history, CorpusError, Dialogue, DialogueState, SlotCatalog, SlotId, Tokenizer, Vocab,
    EOS_ID, NONE,
};

pub use graph::{DecodeOptions, DecodedRow, EncodedHistory, Graph, StepOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("slot {0} is not in the model catalog")]
    UnknownSlot(SlotId),
    #[error("empty dialogue history")]
    EmptyHistory,
    #[error("{0}")]
    Unsupported(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Decoder starts from the encoder's final hidden state.
    Trade,
    /// Decoder starts from a slot-conditioned attention summary of the history.
    #[default]
    Agg,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Trade => "trade",
            Variant::Agg => "agg",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "trade" => Ok(Variant::Trade),
            "agg" => Ok(Variant::Agg),
            other => Err(format!("unknown variant {other:?}; expected trade or agg")),
        }
    }
}

/// How forward and backward encoder outputs are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Sum,
    Concat,
}

/// Score function for the slot attention that initializes the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScore {
    /// `qᵀ W h` with a learned `W` of shape `[d_emb × d_hdd]`.
    #[default]
    Bilinear,
    /// `qᵀ h`; needs `d_emb == d_hdd`.
    Dot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Encoder hidden size per direction.
    pub hidden: usize,
    pub combine: Combine,
    pub max_decode_len: usize,
    pub variant: Variant,
    pub dropout: Real,
    pub attention: AttentionScore,
    /// Filled in from the vocabulary when the model is built; 0 in a config
    /// file means "whatever the training vocabulary turns out to be".
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 32,
            char_dim: 8,
            hidden: 64,
            combine: Combine::Sum,
            max_decode_len: 4,
            variant: Variant::Agg,
            dropout: 0.2,
            attention: AttentionScore::Bilinear,
            vocab_size: 0,
        }
    }
}

impl ModelConfig {
    pub fn emb_dim(&self) -> usize {
        self.word_dim + self.char_dim
    }

    /// Width of the combined encoder output, which is also the decoder width.
    pub fn enc_dim(&self) -> usize {
        match self.combine {
            Combine::Sum => self.hidden,
            Combine::Concat => 2 * self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.word_dim == 0 || self.char_dim == 0 || self.hidden == 0 {
            return bad("word_dim, char_dim and hidden must be positive");
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.variant == Variant::Agg
            && self.attention == AttentionScore::Dot
            && self.emb_dim() != self.enc_dim()
        {
            return Err(ModelError::Config(format!(
                "dot attention needs d_emb ({}) == d_hdd ({})",
                self.emb_dim(),
                self.enc_dim()
            )));
        }
        Ok(())
    }
}

/// Parameter indices of one GRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruIds {
    pub w_x: usize,
    pub w_h: usize,
    pub b_x: usize,
    pub b_h: usize,
}

/// Positions of each named parameter in [`DstModel::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParamIds {
    pub word: usize,
    pub chars: usize,
    pub enc_fwd: GruIds,
    pub enc_bwd: GruIds,
    pub dec: GruIds,
    pub vocab_w: usize,
    pub vocab_b: usize,
    pub gate_w: usize,
    pub gate_b: usize,
    pub attn: Option<usize>,
}

struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    bounds: Vec<Real>,
    ids: ParamIds,
}

impl Layout {
    fn add(&mut self, name: &str, shape: Vec<usize>, bound: Real) -> usize {
        self.names.push(name.to_string());
        self.shapes.push(shape);
        self.bounds.push(bound);
        self.names.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruIds {
        let b = 1.0 / (hidden as Real).sqrt();
        GruIds {
            w_x: self.add(&format!("{prefix}.w_x"), vec![input, 3 * hidden], b),
            w_h: self.add(&format!("{prefix}.w_h"), vec![hidden, 3 * hidden], b),
            b_x: self.add(&format!("{prefix}.b_x"), vec![1, 3 * hidden], b),
            b_h: self.add(&format!("{prefix}.b_h"), vec![1, 3 * hidden], b),
        }
    }

    /// Parameter names and shapes in initialization order. The attention
    /// matrix comes last so that both variants draw identical values for
    /// everything they share.
    fn new(cfg: &ModelConfig, vocab: usize, chars: usize) -> Layout {
        let mut l = Layout {
            names: Vec::new(),
            shapes: Vec::new(),
            bounds: Vec::new(),
            ids: ParamIds {
                word: 0,
                chars: 0,
                enc_fwd: GruIds { w_x: 0, w_h: 0, b_x: 0, b_h: 0 },
                enc_bwd: GruIds { w_x: 0, w_h: 0, b_x: 0, b_h: 0 },
                dec: GruIds { w_x: 0, w_h: 0, b_x: 0, b_h: 0 },
                vocab_w: 0,
                vocab_b: 0,
                gate_w: 0,
                gate_b: 0,
                attn: None,
            },
        };
        let (de, dh) = (cfg.emb_dim(), cfg.enc_dim());
        let word = l.add("embed.word", vec![vocab, cfg.word_dim], 0.5);
        let chars = l.add("embed.char", vec![chars, cfg.char_dim], 0.5);
        let enc_fwd = l.gru("encoder.fwd", de, cfg.hidden);
        let enc_bwd = l.gru("encoder.bwd", de, cfg.hidden);
        let dec = l.gru("decoder.gru", de, dh);
        let pb = 1.0 / (dh as Real).sqrt();
        let vocab_w = l.add("decoder.vocab.w", vec![dh, vocab], pb);
        let vocab_b = l.add("decoder.vocab.b", vec![1, vocab], 0.0);
        let gb = 1.0 / ((2 * dh + de) as Real).sqrt();
        let gate_w = l.add("decoder.gate.w", vec![2 * dh + de, 1], gb);
        let gate_b = l.add("decoder.gate.b", vec![1, 1], 0.0);
        let attn = (cfg.variant == Variant::Agg && cfg.attention == AttentionScore::Bilinear)
            .then(|| l.add("agg.attn.w", vec![de, dh], 1.0 / (de as Real).sqrt()));
        l.ids = ParamIds {
            word,
            chars,
            enc_fwd,
            enc_bwd,
            dec,
            vocab_w,
            vocab_b,
            gate_w,
            gate_b,
            attn,
        };
        l
    }
}

/// A trained or freshly initialized network together with the vocabulary
/// and slot catalog it was built for.
#[derive(Debug)]
pub struct DstModel {
    config: ModelConfig,
    tokenizer: Tokenizer,
    vocab: Vocab,
    catalog: SlotCatalog,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub(crate) ids: ParamIds,
    encoder_calls: AtomicUsize,
}

impl Clone for DstModel {
    fn clone(&self) -> Self {
        DstModel {
            config: self.config.clone(),
            tokenizer: self.tokenizer,
            vocab: self.vocab.clone(),
            catalog: self.catalog.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            ids: self.ids,
            encoder_calls: AtomicUsize::new(self.encoder_calls.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for DstModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tokenizer == other.tokenizer
            && self.vocab == other.vocab
            && self.catalog == other.catalog
            && self.names == other.names
            && self.params == other.params
    }
}

/// One decoded slot at one turn.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPrediction {
    pub slot: SlotId,
    /// Generated tokens without the end marker.
    pub value: Vec<String>,
    /// Final output distribution at each decode step (kept on request).
    pub distributions: Vec<Vec<Real>>,
    /// Copy gate `p_gen` at each step.
    pub gates: Vec<Real>,
    /// Initialization attention over history tokens (AGG only).
    pub attention: Option<Vec<Real>>,
}

impl SlotPrediction {
    /// Normalized value string; an empty generation counts as none.
    pub fn value_string(&self) -> String {
        if self.value.is_empty() {
            NONE.to_string()
        } else {
            crate::corpus::normalize_value(&self.value.join(" "))
        }
    }
}

impl DstModel {
    /// Random initialization from `seed`.
    pub fn new(
        mut config: ModelConfig,
        tokenizer: Tokenizer,
        vocab: Vocab,
        catalog: SlotCatalog,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != 0 && config.vocab_size != vocab.len() {
            return Err(ModelError::Config(format!(
                "vocab_size {} does not match vocabulary of {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        config.vocab_size = vocab.len();
        let layout = Layout::new(&config, vocab.len(), vocab.char_count());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .zip(&layout.bounds)
            .map(|(s, &b)| {
                if b == 0.0 {
                    Tensor::zeros(s)
                } else {
                    Tensor::uniform(s, b, &mut rng)
                }
            })
            .collect();
        Ok(DstModel {
            config,
            tokenizer,
            vocab,
            catalog,
            names: layout.names,
            params,
            ids: layout.ids,
            encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn catalog(&self) -> &SlotCatalog {
        &self.catalog
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Encoder GRU of one direction.
    pub fn encoder_gru(&self, backward: bool) -> GruIds {
        if backward {
            self.ids.enc_bwd
        } else {
            self.ids.enc_fwd
        }
    }

    pub fn decoder_gru(&self) -> GruIds {
        self.ids.dec
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Number of encoder passes run so far.
    pub fn encoder_calls(&self) -> usize {
        self.encoder_calls.load(Ordering::Relaxed)
    }

    pub(crate) fn count_encoder_call(&self) {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
    }

    /// Inference graph (no dropout, no teacher forcing).
    pub fn graph(&self) -> Graph<'_> {
        Graph::new(self, None)
    }

    /// Training graph: dropout and teacher forcing draw from `rng`.
    pub fn training_graph(&self, rng: ChaCha8Rng) -> Graph<'_> {
        Graph::new(self, Some(rng))
    }

    pub fn check_slots(&self, slots: &[SlotId]) -> Result<()> {
        match slots.iter().find(|s| !self.catalog.contains(s)) {
            Some(s) => Err(ModelError::UnknownSlot(s.clone())),
            None => Ok(()),
        }
    }

    /// Greedy decoding of `slots` at turn `j` of `d`, with one encoder pass.
    pub fn predict_slots(
        &self,
        d: &Dialogue,
        j: usize,
        slots: &[SlotId],
        keep_distributions: bool,
    ) -> Result<Vec<SlotPrediction>> {
        self.check_slots(slots)?;
        if slots.is_empty() {
            return Ok(Vec::new());
        }
        let history = build_history(d, j)?;
        if history.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        let tokens = self.vocab.encode(&history);
        let mut g = self.graph();
        let enc = g.encode_tokens(&tokens)?;
        let queries = g.slot_queries(slots)?;
        let (h0, alpha) = g.init_decoder(&enc, queries)?;
        let opts = DecodeOptions {
            max_len: self.config.max_decode_len,
            keep_distributions,
            force_gate: None,
        };
        let rows = g.greedy(&enc, queries, h0, &opts)?;
        let alpha = alpha.map(|a| g.tape.value(a).clone());
        Ok(slots
            .iter()
            .zip(rows)
            .enumerate()
            .map(|(i, (slot, row))| SlotPrediction {
                slot: slot.clone(),
                value: row
                    .ids
                    .iter()
                    .take_while(|&&t| t != EOS_ID)
                    .map(|&t| self.vocab.token(t).to_string())
                    .collect(),
                distributions: row.distributions,
                gates: row.gates,
                attention: alpha.as_ref().map(|a| a.row(i).to_vec()),
            })
            .collect())
    }

    /// Predicted state at turn `j` over `slots`; none values are omitted.
    pub fn predict_state(&self, d: &Dialogue, j: usize, slots: &[SlotId]) -> Result<DialogueState> {
        let preds = self.predict_slots(d, j, slots, false)?;
        let assignments = preds
            .into_iter()
            .filter_map(|p| {
                let v = p.value_string();
                (v != NONE).then(|| (p.slot, v.split(' ').map(str::to_string).collect()))
            })
            .collect();
        Ok(DialogueState { turn: j, assignments })
    }

    /// Overwrites word vectors from a text file of `token v1 v2 ...` lines.
    /// Tokens outside the vocabulary are skipped. Returns rows replaced.
    pub fn load_word_vectors(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        let file = std::fs::File::open(path)?;
        let dim = self.config.word_dim;
        let word = self.ids.word;
        let mut replaced = 0;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: std::result::Result<Vec<Real>, _> = parts.map(str::parse::<Real>).collect();
            let values = values
                .map_err(|e| ModelError::Config(format!("word vectors line {}: {e}", n + 1)))?;
            if values.len() != dim {
                return Err(ModelError::Config(format!(
                    "word vectors line {}: {} values, expected {dim}",
                    n + 1,
                    values.len()
                )));
            }
            if !self.vocab.contains(token) {
                continue;
            }
            let id = self.vocab.id(token);
            self.params[word].row_mut(id).copy_from_slice(&values);
            replaced += 1;
        }
        Ok(replaced)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            precision: precision_name().to_string(),
            config: self.config.clone(),
            tokenizer: self.tokenizer,
            vocab: self.vocab.clone(),
            catalog: self.catalog.clone(),
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    tensor: t.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {}",
                file.version
            )));
        }
        file.config.validate()?;
        let layout = Layout::new(&file.config, file.vocab.len(), file.vocab.char_count());
        if file.config.vocab_size != file.vocab.len() {
            return Err(ModelError::Checkpoint("vocab_size disagrees with vocabulary".into()));
        }
        if file.params.len() != layout.names.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} parameters stored, {} expected",
                file.params.len(),
                layout.names.len()
            )));
        }
        for (p, (name, shape)) in file.params.iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            if !p.tensor.is_finite() {
                return Err(ModelError::Checkpoint(format!("parameter {name} is not finite")));
            }
        }
        Ok(DstModel {
            config: file.config,
            tokenizer: file.tokenizer,
            vocab: file.vocab,
            catalog: file.catalog,
            names: layout.names,
            params: file.params.into_iter().map(|p| p.tensor).collect(),
            ids: layout.ids,
            encoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        DstModel::from_json(&std::fs::read_to_string(path)?)
    }
}

const CHECKPOINT_FORMAT: &str = "agg-dst-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// `"f64"` or `"f32"`, matching the build.
pub fn precision_name() -> &'static str {
    if std::mem::size_of::<Real>() == 8 {
        "f64"
    } else {
        "f32"
    }
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    #[serde(flatten)]
    tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    precision: String,
    config: ModelConfig,
    tokenizer: Tokenizer,
    vocab: Vocab,
    catalog: SlotCatalog,
    params: Vec<NamedTensor>,
}
