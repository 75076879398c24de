#![allow(dead_code)]

use mqa::model::MqaModel;
use mqa::vocab::{TokenId, BOA_ID, EOA_ID};
use mqa::{MqaConfig, Variant};

/// Argmax decoding written directly against `answer_step`, lowest id on ties.
pub fn greedy(
    model: &MqaModel,
    image: Option<&[f64]>,
    question: &[TokenId],
    max_len: usize,
) -> (Vec<TokenId>, f64) {
    let r_q = model.encode_question(question).unwrap();
    let mut state = model.zero_state();
    let mut input = BOA_ID;
    let mut ids = Vec::new();
    let mut logprob = 0.0;
    while ids.len() < max_len {
        let (probs, next) = model.answer_step(&r_q, image, &state, input).unwrap();
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        logprob += probs[best].ln();
        ids.push(best);
        if best == EOA_ID {
            break;
        }
        state = next;
        input = best;
    }
    (ids, logprob)
}

/// Every complete sequence of at most `max_len` tokens (ending in ⟨EOA⟩, or
/// cut at `max_len`) with its log-probability, best first, ids ascending on ties.
pub fn enumerate(
    model: &MqaModel,
    image: Option<&[f64]>,
    question: &[TokenId],
    max_len: usize,
) -> Vec<(Vec<TokenId>, f64)> {
    let r_q = model.encode_question(question).unwrap();
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0, model.zero_state())];
    while let Some((ids, lp, state)) = stack.pop() {
        let input = ids.last().copied().unwrap_or(BOA_ID);
        let (probs, next) = model.answer_step(&r_q, image, &state, input).unwrap();
        for (tok, p) in probs.iter().enumerate() {
            let mut seq: Vec<TokenId> = ids.clone();
            seq.push(tok);
            let l = lp + p.ln();
            if tok == EOA_ID || seq.len() == max_len {
                out.push((seq, l));
            } else {
                stack.push((seq, l, next.clone()));
            }
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn random_model(seed: u64, n: usize, variant: Variant, init_scale: f64) -> MqaModel {
    MqaModel::init(MqaConfig {
        n,
        d_embed: 4,
        d_hidden: 5,
        d_fuse: 6,
        d_img: 3,
        variant,
        seed,
        init_scale,
        ..MqaConfig::default()
    })
    .unwrap()
}
