//! Independent metric scorer and the hand fixture it is checked on.

use std::collections::{BTreeMap, HashMap};

use agg_dst::corpus::{Dialogue, DialogueState, SlotId, Tokenizer};

use super::{dialogue, slot};

pub fn state(turn: usize, pairs: &[(&str, &str)]) -> DialogueState {
    let tok = Tokenizer::default();
    DialogueState {
        turn,
        assignments: pairs.iter().map(|(s, v)| (slot(s), tok.tokenize(v))).collect(),
    }
}

pub fn slots(names: &[&str]) -> Vec<SlotId> {
    names.iter().map(|s| slot(s)).collect()
}

/// Independent scorer over plain string maps.
pub struct Brute {
    pub sa: f64,
    pub jga: f64,
    pub aga: Option<f64>,
}

pub fn as_map(s: &DialogueState) -> HashMap<String, String> {
    s.assignments
        .iter()
        .map(|(k, v)| (k.to_string(), v.join(" ").to_lowercase()))
        .collect()
}

pub fn brute(preds: &[DialogueState], golds: &[DialogueState], names: &[&str]) -> Brute {
    let mut pairs = 0.0;
    let mut right = 0.0;
    let mut joint = 0.0;
    let mut active = 0.0;
    let mut active_right = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (as_map(p), as_map(g));
        let mut all = true;
        for n in names {
            let pv = p.get(*n).map_or("none", String::as_str);
            let gv = g.get(*n).map_or("none", String::as_str);
            pairs += 1.0;
            if pv == gv {
                right += 1.0;
            } else {
                all = false;
            }
            if gv != "none" {
                active += 1.0;
                if pv == gv {
                    active_right += 1.0;
                }
            }
        }
        if all {
            joint += 1.0;
        }
    }
    Brute {
        sa: right / pairs,
        jga: joint / preds.len() as f64,
        aga: (active > 0.0).then(|| active_right / active),
    }
}

/// Three hand-built dialogues with hand-written predictions.
pub fn fixture() -> (Vec<Dialogue>, Vec<DialogueState>, Vec<&'static str>) {
    let names = vec!["taxi-destination", "taxi-leave at", "hotel-area", "hotel-stars"];
    let d1 = dialogue(
        "a",
        &[("taxi to the museum", "ok"), ("at 08:00", "done")],
        &[
            &[("taxi-destination", "museum")],
            &[("taxi-destination", "museum"), ("taxi-leave at", "08:00")],
        ],
    );
    let d2 = dialogue(
        "b",
        &[("hotel in the north", "ok"), ("4 stars", "ok"), ("thanks", "bye")],
        &[
            &[("hotel-area", "north")],
            &[("hotel-area", "north"), ("hotel-stars", "4")],
            &[("hotel-area", "north"), ("hotel-stars", "4")],
        ],
    );
    let d3 = dialogue("c", &[("hello", "hi")], &[&[]]);
    let preds = vec![
        state(1, &[("taxi-destination", "museum")]),
        state(2, &[("taxi-destination", "museum"), ("taxi-leave at", "09:00")]),
        state(1, &[("hotel-area", "north")]),
        state(2, &[("hotel-area", "north"), ("hotel-stars", "4")]),
        state(3, &[("hotel-area", "north")]),
        state(1, &[("hotel-area", "east")]),
    ];
    (vec![d1, d2, d3], preds, names)
}

pub fn random_states(codes: &[(u8, u8)], turns: usize) -> (Vec<DialogueState>, Vec<DialogueState>) {
    let names = ["taxi-destination", "taxi-leave at", "hotel-area"];
    let values = ["museum", "08:00", "north"];
    let mut preds = Vec::new();
    let mut golds = Vec::new();
    for t in 0..turns {
        let mut p = BTreeMap::new();
        let mut g = BTreeMap::new();
        for (k, name) in names.iter().enumerate() {
            let (pc, gc) = codes[(t * names.len() + k) % codes.len()];
            if pc % 3 != 0 {
                p.insert(slot(name), vec![values[(pc % 3) as usize].to_string()]);
            }
            if gc % 3 != 0 {
                g.insert(slot(name), vec![values[(gc % 3) as usize].to_string()]);
            }
        }
        preds.push(DialogueState { turn: t + 1, assignments: p });
        golds.push(DialogueState { turn: t + 1, assignments: g });
    }
    (preds, golds)
}
