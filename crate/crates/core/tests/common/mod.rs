#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;

use agg_dst::autodiff::{Real, Tensor};
use agg_dst::corpus::{
    Dialogue, DialogueState, SlotCatalog, SlotId, Tokenizer, Turn, Vocab, EOS_ID,
};
use agg_dst::model::{DstModel, ModelConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn slot(s: &str) -> SlotId {
    s.parse().unwrap()
}

/// Hand-built dialogue: `(user, agent)` pairs and per-turn `slot=value` lists.
pub fn dialogue(id: &str, turns: &[(&str, &str)], states: &[&[(&str, &str)]]) -> Dialogue {
    let tok = Tokenizer::default();
    Dialogue {
        id: id.to_string(),
        turns: turns
            .iter()
            .enumerate()
            .map(|(i, (u, a))| Turn {
                index: i + 1,
                user: tok.tokenize(u),
                agent: tok.tokenize(a),
            })
            .collect(),
        gold_states: states
            .iter()
            .enumerate()
            .map(|(i, st)| DialogueState {
                turn: i + 1,
                assignments: st
                    .iter()
                    .map(|(s, v)| (slot(s), tok.tokenize(v)))
                    .collect::<BTreeMap<_, _>>(),
            })
            .collect(),
        domains: states
            .iter()
            .flat_map(|st| st.iter().map(|(s, _)| slot(s).domain))
            .collect(),
        service_done: None,
    }
}

/// Two turns, three slots (one never filled).
pub fn toy() -> (Dialogue, SlotCatalog) {
    let d = dialogue(
        "toy",
        &[
            ("i need a taxi to the museum", "when do you want to leave ?"),
            ("leave at 08:00 please", "booked ."),
        ],
        &[
            &[("taxi-destination", "museum")],
            &[("taxi-destination", "museum"), ("taxi-leave at", "08:00")],
        ],
    );
    let catalog = SlotCatalog::new(vec![
        slot("taxi-destination"),
        slot("taxi-leave at"),
        slot("hotel-area"),
    ]);
    (d, catalog)
}

pub fn model_for(dialogues: &[Dialogue], catalog: &SlotCatalog, cfg: ModelConfig, seed: u64) -> DstModel {
    let vocab = Vocab::build(dialogues, catalog, 1);
    DstModel::new(cfg, Tokenizer::default(), vocab, catalog.clone(), seed).unwrap()
}

pub fn desk(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        dropout: 0.0,
        ..Default::default()
    }
}

/// Gold ids for each slot: value tokens (or `none`) then the end marker.
pub fn targets(model: &DstModel, state: &DialogueState, slots: &[SlotId]) -> Vec<Vec<usize>> {
    slots
        .iter()
        .map(|s| {
            let mut ids: Vec<usize> = state
                .value_of(s)
                .split(' ')
                .map(|t| model.vocab().id(t))
                .collect();
            ids.push(EOS_ID);
            ids
        })
        .collect()
}

/// Teacher-forced loss (gold inputs every step, no dropout) at turn `j`,
/// with parameter gradients when `grads` is set.
pub fn turn_loss(
    model: &DstModel,
    d: &Dialogue,
    j: usize,
    slots: &[SlotId],
    grads: bool,
) -> (Real, Option<Vec<Tensor>>) {
    let history = d.history(j).unwrap();
    let tokens = model.vocab().encode(&history);
    let tg = targets(model, d.state(j), slots);
    let mut g = model.graph();
    let enc = g.encode_tokens(&tokens).unwrap();
    let q = g.slot_queries(slots).unwrap();
    let (h0, _) = g.init_decoder(&enc, q).unwrap();
    let loss = g.teacher_forced_loss(&enc, q, h0, &tg, 1.0).unwrap();
    let value = g.tape.value(loss).item();
    if !grads {
        return (value, None);
    }
    let mut out: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let gr = g.tape.backward(loss).unwrap();
    for (i, v) in g.registered() {
        if let Some(t) = gr.get(v) {
            out[i].add_assign(t);
        }
    }
    (value, Some(out))
}

/// Summed loss over every turn of `d`.
pub fn dialogue_loss(model: &DstModel, d: &Dialogue, slots: &[SlotId], grads: bool) -> (Real, Option<Vec<Tensor>>) {
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for j in 1..=d.num_turns() {
        let (l, g) = turn_loss(model, d, j, slots, grads);
        total += l;
        if let Some(g) = g {
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
            }
        }
    }
    (total, acc)
}

/// Central finite differences (step `1e-5`) on a random `fraction` of all
/// parameter entries. Returns (worst relative error, entries checked).
pub fn full_model_fd_check(model: &DstModel, d: &Dialogue, slots: &[SlotId], fraction: f64, seed: u64) -> (Real, usize) {
    let h: Real = 1e-5;
    let (_, analytic) = dialogue_loss(model, d, slots, true);
    let analytic = analytic.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut worst: Real = 0.0;
    let mut checked = 0;
    for p in 0..model.params().len() {
        for k in 0..model.params()[p].len() {
            if !rng.gen_bool(fraction) {
                continue;
            }
            let orig = model.params()[p].data()[k];
            probe.params_mut()[p].data_mut()[k] = orig + h;
            let (plus, _) = dialogue_loss(&probe, d, slots, false);
            probe.params_mut()[p].data_mut()[k] = orig - h;
            let (minus, _) = dialogue_loss(&probe, d, slots, false);
            probe.params_mut()[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}
