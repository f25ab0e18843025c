use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DstModel, GruIds, ModelError, Result, Variant};
use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::corpus::{EncodedTokens, SlotId, EOS_ID, PAD_ID};

/// Encoder output for one history.
#[derive(Clone, Debug)]
pub struct EncodedHistory {
    /// `[T × d_hdd]` per-token states.
    pub states: Var,
    /// `[d_hdd × T]`, kept for attention scores.
    pub states_t: Var,
    /// `[1 × d_hdd]` final states of both directions, combined.
    pub last: Var,
    /// Vocabulary ids of the history tokens (copy targets).
    pub source_ids: Vec<usize>,
}

impl EncodedHistory {
    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub keep_distributions: bool,
    /// Replaces the learned copy gate `p_gen` with a constant.
    pub force_gate: Option<Real>,
}

/// Outputs of one decoder step for all slot rows.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub hidden: Var,
    /// `[N × T]` step attention over history tokens.
    pub attention: Var,
    pub p_vocab: Var,
    /// `[N × 1]`
    pub gate: Var,
    /// `[N × V]` final mixture.
    pub dist: Var,
}

#[derive(Clone, Debug, Default)]
pub struct DecodedRow {
    /// Emitted ids, including the end marker when one was produced.
    pub ids: Vec<usize>,
    pub distributions: Vec<Vec<Real>>,
    pub gates: Vec<Real>,
}

/// A forward pass over one model. Parameters are registered on the tape
/// lazily and borrowed, never copied.
pub struct Graph<'m> {
    pub tape: Tape<'m>,
    model: &'m DstModel,
    vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
}

impl<'m> Graph<'m> {
    pub(crate) fn new(model: &'m DstModel, rng: Option<ChaCha8Rng>) -> Self {
        Graph {
            tape: Tape::new(),
            model,
            vars: vec![None; model.params.len()],
            rng,
        }
    }

    pub fn model(&self) -> &'m DstModel {
        self.model
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    /// Tape variable of parameter `i`, registering it on first use.
    pub fn param(&mut self, i: usize) -> Var {
        if let Some(v) = self.vars[i] {
            return v;
        }
        let v = self.tape.param(&self.model.params[i]);
        self.vars[i] = Some(v);
        v
    }

    /// `(parameter index, tape variable)` for every parameter used so far.
    pub fn registered(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout;
        match self.rng.as_mut() {
            Some(rng) => Ok(self.tape.dropout(x, p, true, rng)?),
            None => Ok(x),
        }
    }

    /// `[T × d_emb]`: word vector next to the mean of the token's character
    /// vectors. Dropout applies in training mode when `dropout` is set.
    pub fn embed(&mut self, tokens: &EncodedTokens, dropout: bool) -> Result<Var> {
        if tokens.is_empty() {
            return Err(TensorError::Empty { op: "embed" }.into());
        }
        let (wi, ci) = (self.model.ids.word, self.model.ids.chars);
        let (w, c) = (self.param(wi), self.param(ci));
        let words = self.tape.gather_rows(w, &tokens.ids)?;
        let mut flat = Vec::new();
        let mut groups = Vec::with_capacity(tokens.len());
        for chars in &tokens.chars {
            let start = flat.len();
            flat.extend_from_slice(chars);
            if chars.is_empty() {
                flat.push(0);
            }
            groups.push((start..flat.len()).collect::<Vec<_>>());
        }
        let char_rows = self.tape.gather_rows(c, &flat)?;
        let char_mean = self.tape.group_mean_rows(char_rows, &groups)?;
        let e = self.tape.concat_cols(&[words, char_mean])?;
        if dropout {
            self.dropout(e)
        } else {
            Ok(e)
        }
    }

    /// `gx` already holds `x W_x + b_x`; rows `row..` feed the rows of `h`.
    fn gru_cell(&mut self, g: GruIds, gx: Var, row: usize, h: Var) -> Result<Var> {
        let (wh, bh) = (self.param(g.w_h), self.param(g.b_h));
        Ok(self.tape.gru_cell(gx, row, h, wh, bh)?)
    }

    fn input_projection(&mut self, g: GruIds, x: Var) -> Result<Var> {
        let (wx, bx) = (self.param(g.w_x), self.param(g.b_x));
        let p = self.tape.matmul(x, wx)?;
        Ok(self.tape.add_row(p, bx)?)
    }

    /// One GRU step on a batch of rows.
    pub fn gru_step(&mut self, g: GruIds, x: Var, h: Var) -> Result<Var> {
        let gx = self.input_projection(g, x)?;
        self.gru_cell(g, gx, 0, h)
    }

    /// Runs a GRU over the rows of `x`, in reverse when `reverse` is set.
    /// Returns per-position outputs in input order.
    fn run_gru(&mut self, g: GruIds, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let hidden = self.model.config.hidden;
        let steps = self.tape.value(x).rows();
        let gx = self.input_projection(g, x)?;
        let mut h = self.tape.constant(Tensor::zeros(&[1, hidden]));
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            h = self.gru_cell(g, gx, t, h)?;
            out[t] = h;
        }
        Ok(out)
    }

    /// Bidirectional pass over embedded history `e` (`[T × d_emb]`).
    pub fn encode(&mut self, e: Var, source_ids: &[usize]) -> Result<EncodedHistory> {
        let steps = self.tape.value(e).rows();
        if steps == 0 || steps != source_ids.len() {
            return Err(ModelError::EmptyHistory);
        }
        self.model.count_encoder_call();
        let ids = self.model.ids;
        let fwd = self.run_gru(ids.enc_fwd, e, false)?;
        let bwd = self.run_gru(ids.enc_bwd, e, true)?;
        let hf = self.tape.stack_rows(&fwd)?;
        let hb = self.tape.stack_rows(&bwd)?;
        // Final states: forward after the last token, backward after the first.
        let (lf, lb) = (fwd[steps - 1], bwd[0]);
        let (states, last) = match self.model.config.combine {
            super::Combine::Sum => (self.tape.add(hf, hb)?, self.tape.add(lf, lb)?),
            super::Combine::Concat => (
                self.tape.concat_cols(&[hf, hb])?,
                self.tape.concat_cols(&[lf, lb])?,
            ),
        };
        let states = self.dropout(states)?;
        let states_t = self.tape.transpose(states)?;
        Ok(EncodedHistory {
            states,
            states_t,
            last,
            source_ids: source_ids.to_vec(),
        })
    }

    /// Embeds (with dropout in training mode) and encodes a history.
    pub fn encode_tokens(&mut self, tokens: &EncodedTokens) -> Result<EncodedHistory> {
        let e = self.embed(tokens, true)?;
        self.encode(e, &tokens.ids)
    }

    /// `[N × d_emb]`: row `k` is the mean embedding of slot `k`'s domain and
    /// slot-name tokens.
    pub fn slot_queries(&mut self, slots: &[SlotId]) -> Result<Var> {
        self.model.check_slots(slots)?;
        let mut all = Vec::new();
        let mut groups = Vec::with_capacity(slots.len());
        for s in slots {
            let toks = s.name_tokens();
            let start = all.len();
            all.extend(toks);
            groups.push((start..all.len()).collect::<Vec<_>>());
        }
        if all.is_empty() {
            return Err(TensorError::Empty { op: "slot_queries" }.into());
        }
        let enc = self.model.vocab.encode(&all);
        let e = self.embed(&enc, false)?;
        Ok(self.tape.group_mean_rows(e, &groups)?)
    }

    /// Initial decoder state for each query row, plus the initialization
    /// attention `[N × T]` for the attention-guided variant.
    pub fn init_decoder(&mut self, enc: &EncodedHistory, queries: Var) -> Result<(Var, Option<Var>)> {
        let n = self.tape.value(queries).rows();
        match self.model.config.variant {
            Variant::Trade => Ok((self.tape.broadcast_rows(enc.last, n)?, None)),
            Variant::Agg => {
                let keys = match self.model.ids.attn {
                    Some(w) => {
                        let w = self.param(w);
                        self.tape.matmul(queries, w)?
                    }
                    None => queries,
                };
                let scores = self.tape.matmul(keys, enc.states_t)?;
                let alpha = self.tape.softmax(scores)?;
                let h0 = self.tape.matmul(alpha, enc.states)?;
                Ok((h0, Some(alpha)))
            }
        }
    }

    /// One decoder step for all rows: GRU update, step attention, vocabulary
    /// distribution, copy gate, and the gated mixture.
    pub fn decode_step(
        &mut self,
        enc: &EncodedHistory,
        x: Var,
        h: Var,
        force_gate: Option<Real>,
    ) -> Result<StepOutput> {
        let ids = self.model.ids;
        let vocab = self.model.vocab.len();
        let hidden = self.gru_step(ids.dec, x, h)?;
        let t = &mut self.tape;
        let scores = t.matmul(hidden, enc.states_t)?;
        let attention = t.softmax(scores)?;
        let context = t.matmul(attention, enc.states)?;
        let (vw, vb, gw, gb) = (
            self.param(ids.vocab_w),
            self.param(ids.vocab_b),
            self.param(ids.gate_w),
            self.param(ids.gate_b),
        );
        let t = &mut self.tape;
        let logits = t.matmul(hidden, vw)?;
        let logits = t.add_row(logits, vb)?;
        let p_vocab = t.softmax(logits)?;
        let n = t.value(hidden).rows();
        let gate = match force_gate {
            Some(g) => t.constant(Tensor::full(&[n, 1], g)),
            None => {
                let features = t.concat_cols(&[hidden, context, x])?;
                let g = t.matmul(features, gw)?;
                let g = t.add_row(g, gb)?;
                t.sigmoid(g)?
            }
        };
        let p_copy = t.scatter_cols(attention, &enc.source_ids, vocab)?;
        let gen = t.mul_col(p_vocab, gate)?;
        let not_gate = t.one_minus(gate)?;
        let copy = t.mul_col(p_copy, not_gate)?;
        let dist = t.add(gen, copy)?;
        Ok(StepOutput {
            hidden,
            attention,
            p_vocab,
            gate,
            dist,
        })
    }

    fn embed_ids(&mut self, ids: &[usize]) -> Result<Var> {
        let enc = self.model.vocab.encode_ids(ids);
        self.embed(&enc, false)
    }

    /// Greedy decoding; each row stops at its end marker.
    pub fn greedy(
        &mut self,
        enc: &EncodedHistory,
        queries: Var,
        h0: Var,
        opts: &DecodeOptions,
    ) -> Result<Vec<DecodedRow>> {
        let n = self.tape.value(queries).rows();
        let mut rows = vec![DecodedRow::default(); n];
        let mut done = vec![false; n];
        let (mut x, mut h) = (queries, h0);
        for _ in 0..opts.max_len.max(1) {
            let out = self.decode_step(enc, x, h, opts.force_gate)?;
            let dist = self.tape.value(out.dist);
            let gate = self.tape.value(out.gate);
            let mut next = Vec::with_capacity(n);
            for (r, row) in rows.iter_mut().enumerate() {
                let tok = dist.argmax_row(r);
                next.push(tok);
                if done[r] {
                    continue;
                }
                row.ids.push(tok);
                row.gates.push(gate.at(r, 0));
                if opts.keep_distributions {
                    row.distributions.push(dist.row(r).to_vec());
                }
                done[r] = tok == EOS_ID;
            }
            if done.iter().all(|&d| d) {
                break;
            }
            x = self.embed_ids(&next)?;
            h = out.hidden;
        }
        Ok(rows)
    }

    /// Mean over rows of the per-step negative log-likelihood of `targets`
    /// (each ending with the end marker). Inputs after step 0 are gold tokens
    /// with probability `ratio` per step, else the model's own argmax.
    pub fn teacher_forced_loss(
        &mut self,
        enc: &EncodedHistory,
        queries: Var,
        h0: Var,
        targets: &[Vec<usize>],
        ratio: Real,
    ) -> Result<Var> {
        let n = targets.len();
        if n == 0 || targets.iter().any(Vec::is_empty) || self.tape.value(queries).rows() != n {
            return Err(TensorError::Empty { op: "teacher_forced_loss" }.into());
        }
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        let (mut x, mut h) = (queries, h0);
        let mut terms = Vec::with_capacity(steps);
        for s in 0..steps {
            let out = self.decode_step(enc, x, h, None)?;
            let gold: Vec<usize> = targets.iter().map(|t| t.get(s).copied().unwrap_or(PAD_ID)).collect();
            let weights: Vec<Real> = targets
                .iter()
                .map(|t| {
                    if s < t.len() {
                        -1.0 / (t.len() * n) as Real
                    } else {
                        0.0
                    }
                })
                .collect();
            let picked = self.tape.pick_cols(out.dist, &gold)?;
            let logp = self.tape.log(picked)?;
            terms.push(self.tape.weighted_sum(logp, weights)?);
            if s + 1 == steps {
                break;
            }
            let use_gold = match self.rng.as_mut() {
                Some(rng) => rng.gen::<Real>() < ratio,
                None => ratio >= 1.0,
            };
            let next: Vec<usize> = if use_gold {
                gold.iter().map(|&g| if g == PAD_ID { EOS_ID } else { g }).collect()
            } else {
                let dist = self.tape.value(out.dist);
                (0..n).map(|r| dist.argmax_row(r)).collect()
            };
            x = self.embed_ids(&next)?;
            h = out.hidden;
        }
        let stacked = self.tape.stack_rows(&terms)?;
        Ok(self.tape.sum(stacked)?)
    }
}
