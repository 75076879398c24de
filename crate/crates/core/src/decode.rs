//! Beam-search answer generation.

use std::cmp::Ordering;

use crate::data::ImageFeatureStore;
use crate::error::{MqaError, Result};
use crate::model::MqaModel;
use crate::nn::LstmState;
use crate::vocab::{TokenId, Vocabulary, BOA_ID, EOA_ID};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub k: usize,
    pub max_len: usize,
    pub length_normalize: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            k: 5,
            max_len: 30,
            length_normalize: false,
        }
    }
}

impl BeamConfig {
    pub fn with_k(k: usize) -> Self {
        BeamConfig {
            k,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_len == 0 {
            return Err(MqaError::Config(
                "beam width and max_len must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A partial or finished answer. `ids` starts after `⟨BOA⟩` and ends with
/// `⟨EOA⟩` when the model emitted it.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<TokenId>,
    pub logprob: f64,
    pub state: LstmState,
    pub finished: bool,
}

impl Hypothesis {
    /// The answer tokens without the trailing `⟨EOA⟩`.
    pub fn answer_ids(&self) -> &[TokenId] {
        match self.ids.last() {
            Some(&EOA_ID) => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }

    pub fn score(&self, length_normalize: bool) -> f64 {
        score(self.logprob, self.ids.len(), length_normalize)
    }
}

fn score(logprob: f64, len: usize, length_normalize: bool) -> f64 {
    if length_normalize && len > 0 {
        logprob / len as f64
    } else {
        logprob
    }
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

struct Candidate {
    parent: usize,
    ids: Vec<TokenId>,
    logprob: f64,
}

/// Keeps the `k` best expansions per step; hypotheses that emit `⟨EOA⟩`
/// (or reach `max_len`) are frozen and ranked at the end. Stops once `k`
/// hypotheses are finished or none remain live.
pub fn beam_search(
    model: &MqaModel,
    image: Option<&[f64]>,
    question: &[TokenId],
    cfg: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let r_q = model.encode_question(question)?;
    let mut live = vec![Hypothesis {
        ids: Vec::new(),
        logprob: 0.0,
        state: model.zero_state(),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() && finished.len() < cfg.k {
        let mut next_states = Vec::with_capacity(live.len());
        let mut candidates = Vec::with_capacity(live.len() * model.vocab_size());
        for (pi, h) in live.iter().enumerate() {
            let input = h.ids.last().copied().unwrap_or(BOA_ID);
            let (probs, state) = model.answer_step(&r_q, image, &h.state, input)?;
            next_states.push(state);
            for (tok, p) in probs.iter().enumerate() {
                let mut ids = Vec::with_capacity(h.ids.len() + 1);
                ids.extend_from_slice(&h.ids);
                ids.push(tok);
                candidates.push(Candidate {
                    parent: pi,
                    ids,
                    logprob: h.logprob + p.ln(),
                });
            }
        }
        candidates.sort_by(|a, b| {
            rank(
                (score(a.logprob, a.ids.len(), cfg.length_normalize), &a.ids),
                (score(b.logprob, b.ids.len(), cfg.length_normalize), &b.ids),
            )
        });
        candidates.truncate(cfg.k);

        let mut next_live = Vec::with_capacity(cfg.k);
        for c in candidates {
            let done = c.ids.last() == Some(&EOA_ID) || c.ids.len() >= cfg.max_len;
            let h = Hypothesis {
                ids: c.ids,
                logprob: c.logprob,
                state: next_states[c.parent].clone(),
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next_live.push(h);
            }
        }
        live = next_live;
    }

    finished.sort_by(|a, b| {
        rank(
            (a.score(cfg.length_normalize), &a.ids),
            (b.score(cfg.length_normalize), &b.ids),
        )
    });
    finished.truncate(cfg.k);
    Ok(finished)
}

/// Encodes the question, decodes with beam search and returns the best
/// answer's tokens together with its log-probability.
pub fn answer(
    model: &MqaModel,
    features: &ImageFeatureStore,
    vocab: &Vocabulary,
    image_id: &str,
    question_tokens: &[String],
    cfg: &BeamConfig,
) -> Result<(Vec<String>, f64)> {
    let ranked = answer_all(model, features, vocab, image_id, question_tokens, cfg)?;
    ranked
        .into_iter()
        .next()
        .ok_or(MqaError::Empty("beam result"))
}

/// Like [`answer`] but returns every ranked hypothesis.
pub fn answer_all(
    model: &MqaModel,
    features: &ImageFeatureStore,
    vocab: &Vocabulary,
    image_id: &str,
    question_tokens: &[String],
    cfg: &BeamConfig,
) -> Result<Vec<(Vec<String>, f64)>> {
    if vocab.len() != model.vocab_size() {
        return Err(MqaError::shape(
            "answer: vocabulary",
            model.vocab_size(),
            vocab.len(),
        ));
    }
    let image = model.image_for(features, image_id)?;
    let question = vocab.encode(question_tokens);
    beam_search(model, image, &question, cfg)?
        .into_iter()
        .map(|h| Ok((vocab.decode(h.answer_ids())?, h.logprob)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MqaConfig, Variant};

    fn tiny(seed: u64, n: usize) -> MqaModel {
        MqaModel::init(MqaConfig {
            n,
            d_embed: 3,
            d_hidden: 4,
            d_fuse: 5,
            d_img: 2,
            seed,
            init_scale: 1.5,
            ..MqaConfig::default()
        })
        .unwrap()
    }

    /// A model whose next-word distribution is effectively one-hot on a fixed
    /// chain: after ⟨BOA⟩ emit 3, after 3 emit 4, after 4 emit ⟨EOA⟩.
    fn forced_chain_model() -> MqaModel {
        let mut m = MqaModel::zeros(MqaConfig {
            n: 5,
            d_embed: 5,
            d_hidden: 1,
            d_fuse: 5,
            d_img: 1,
            variant: Variant::NoTws,
            ..MqaConfig::default()
        })
        .unwrap();
        let p = &mut m.params;
        // one-hot embeddings pass the current word straight through the fusing
        // and intermediate layers
        p.embedding.weights = crate::numerics::Matrix::identity(5);
        p.fusing.v_w = crate::numerics::Matrix::identity(5);
        p.intermediate.v_m = crate::numerics::Matrix::identity(5);
        let free = p.head.free_weights.as_mut().unwrap();
        free.fill(0.0);
        for (from, to) in [
            (BOA_ID, 3),
            (3, 4),
            (4, EOA_ID),
            (EOA_ID, EOA_ID),
            (2, EOA_ID),
        ] {
            free.set(to, from, 800.0);
        }
        m
    }

    #[test]
    fn forced_chain_for_any_width() {
        let m = forced_chain_model();
        for k in 1..=5 {
            let out = beam_search(&m, Some(&[0.0]), &[3], &BeamConfig::with_k(k)).unwrap();
            assert!(!out.is_empty() && out.len() <= k);
            assert_eq!(out[0].ids, vec![3, 4, EOA_ID]);
            assert_eq!(out[0].answer_ids(), &[3, 4]);
            assert!(out[0].logprob > -1e-12);
        }
    }

    #[test]
    fn results_sorted_and_terminated() {
        for seed in 0..20 {
            let m = tiny(seed, 6);
            let cfg = BeamConfig {
                k: 3,
                max_len: 4,
                length_normalize: seed % 2 == 0,
            };
            let out = beam_search(&m, Some(&[0.5, -0.5]), &[3, 4], &cfg).unwrap();
            assert!(out.len() <= 3 && !out.is_empty());
            for w in out.windows(2) {
                assert!(w[0].score(cfg.length_normalize) >= w[1].score(cfg.length_normalize));
            }
            for h in &out {
                assert!(h.finished && h.logprob <= 0.0);
                assert!(h.ids.last() == Some(&EOA_ID) || h.ids.len() == cfg.max_len);
                assert!(!h.ids[..h.ids.len() - 1].contains(&EOA_ID));
            }
        }
    }

    #[test]
    fn rejects_bad_config_and_empty_question() {
        let m = tiny(0, 6);
        assert!(beam_search(&m, Some(&[0.0, 0.0]), &[3], &BeamConfig::with_k(0)).is_err());
        assert!(beam_search(&m, Some(&[0.0, 0.0]), &[], &BeamConfig::default()).is_err());
    }
}
