//! The assembled question-answering model and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageFeatureStore;
use crate::error::{MqaError, Result};
use crate::nn::{self, LstmState, Params, StateSource, Trace};
use crate::numerics::Vector;
use crate::vocab::{TokenId, Vocabulary, BOA_ID};

/// Default half-width of the uniform weight initializer.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub enum Variant {
    /// Separate question and answer LSTMs, shared embedding, transposed head.
    #[default]
    Complete,
    /// Question code is the mean of its word embeddings.
    AvgQuestion,
    /// One LSTM cell serves both question and answer.
    SameLstms,
    /// Softmax layer has its own weight matrix.
    NoTws,
    /// No image term in the fusing layer.
    Blind,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Complete,
        Variant::AvgQuestion,
        Variant::SameLstms,
        Variant::NoTws,
        Variant::Blind,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Complete => "complete",
            Variant::AvgQuestion => "avg-question",
            Variant::SameLstms => "same-lstms",
            Variant::NoTws => "notws",
            Variant::Blind => "blind",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Complete => 0,
            Variant::AvgQuestion => 1,
            Variant::SameLstms => 2,
            Variant::NoTws => 3,
            Variant::Blind => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Variant::ALL.get(tag as usize).copied()
    }

    pub fn uses_image(self) -> bool {
        self != Variant::Blind
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MqaError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        let key = key.strip_prefix("mqa").unwrap_or(&key);
        match key {
            "complete" => Ok(Variant::Complete),
            "avgquestion" => Ok(Variant::AvgQuestion),
            "samelstms" => Ok(Variant::SameLstms),
            "notws" => Ok(Variant::NoTws),
            "blind" => Ok(Variant::Blind),
            _ => Err(MqaError::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MqaConfig {
    pub d_embed: usize,
    pub d_hidden: usize,
    pub d_fuse: usize,
    pub d_img: usize,
    /// Vocabulary size.
    pub n: usize,
    pub variant: Variant,
    pub state_source: StateSource,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for MqaConfig {
    /// Full-size layer widths: 512-d embeddings, 400 memory cells, and a
    /// 1024-d image feature.
    fn default() -> Self {
        MqaConfig {
            d_embed: 512,
            d_hidden: 400,
            d_fuse: 512,
            d_img: 1024,
            n: 3,
            variant: Variant::Complete,
            state_source: StateSource::Hidden,
            seed: 0,
            init_scale: INIT_SCALE,
        }
    }
}

impl MqaConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_embed", self.d_embed),
            ("d_hidden", self.d_hidden),
            ("d_fuse", self.d_fuse),
            ("d_img", self.d_img),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(MqaError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n < 3 {
            return Err(MqaError::Config(format!(
                "vocabulary size {} is smaller than the 3 special tokens",
                self.n
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(MqaError::Config(
                "init_scale must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "variant = {}\nstate_source = {}\nn = {}\nd_embed = {}\nd_hidden = {}\nd_fuse = {}\nd_img = {}\nseed = {}\ninit_scale = {}\n",
            self.variant,
            self.state_source.as_str(),
            self.n,
            self.d_embed,
            self.d_hidden,
            self.d_fuse,
            self.d_img,
            self.seed,
            self.init_scale,
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = MqaConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| MqaError::Parse {
                path: "model config".into(),
                line: lineno + 1,
                msg: "expected key = value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |msg: String| MqaError::Parse {
                path: "model config".into(),
                line: lineno + 1,
                msg,
            };
            let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{k}: {e}")));
            match k {
                "variant" => cfg.variant = v.parse()?,
                "state_source" => cfg.state_source = StateSource::parse(v)?,
                "n" => cfg.n = num(v)?,
                "d_embed" => cfg.d_embed = num(v)?,
                "d_hidden" => cfg.d_hidden = num(v)?,
                "d_fuse" => cfg.d_fuse = num(v)?,
                "d_img" => cfg.d_img = num(v)?,
                "seed" => cfg.seed = v.parse().map_err(|e| bad(format!("seed: {e}")))?,
                "init_scale" => {
                    cfg.init_scale = v.parse().map_err(|e| bad(format!("init_scale: {e}")))?
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A question/answer pair already mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub image_id: String,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

impl EncodedExample {
    /// Number of scored positions: the answer plus `⟨EOA⟩`.
    pub fn target_len(&self) -> usize {
        self.answer.len() + 1
    }
}

pub fn encode_examples(
    vocab: &Vocabulary,
    examples: &[crate::data::QaExample],
) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| EncodedExample {
            image_id: e.image_id.clone(),
            question: vocab.encode(&e.question),
            answer: vocab.encode(&e.answer),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MqaModel {
    pub config: MqaConfig,
    pub params: Params,
}

impl MqaModel {
    /// Seeded initialization; equal configs give bit-identical models.
    pub fn init(config: MqaConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        params.init_uniform(&mut rng, config.init_scale);
        Ok(MqaModel { config, params })
    }

    /// A model with every parameter zero.
    pub fn zeros(config: MqaConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::zeros(&config);
        Ok(MqaModel { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.config.n
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState::zeros(self.config.d_hidden)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.config.n) {
            Some(&id) => Err(MqaError::TokenOutOfRange {
                id,
                n: self.config.n,
            }),
            None => Ok(()),
        }
    }

    /// Question code `r_Q`: the final LSTM(Q) state, or the mean word
    /// embedding for the averaging variant.
    pub fn encode_question(&self, question: &[TokenId]) -> Result<Vector> {
        self.check_ids(question)?;
        nn::encode_question_cached(&self.params, self.config.state_source, question).map(|(r, _)| r)
    }

    /// Feeds `word` to LSTM(A) and returns the next-word distribution and
    /// the new recurrent state. `image` is ignored by the blind variant.
    pub fn answer_step(
        &self,
        r_q: &[f64],
        image: Option<&[f64]>,
        prev: &LstmState,
        word: TokenId,
    ) -> Result<(Vector, LstmState)> {
        let image = if self.variant().uses_image() {
            image
        } else {
            None
        };
        let step = nn::answer_step_cached(
            &self.params,
            self.config.state_source,
            r_q,
            image,
            prev,
            word,
            0,
        )?;
        let state = step.state();
        Ok((step.probs, state))
    }

    /// Looks up the image vector this model needs, if any.
    pub fn image_for<'a>(
        &self,
        features: &'a ImageFeatureStore,
        image_id: &str,
    ) -> Result<Option<&'a [f64]>> {
        if !self.variant().uses_image() {
            return Ok(None);
        }
        let v = features.get(image_id)?;
        if v.len() != self.config.d_img {
            return Err(MqaError::shape("image feature", self.config.d_img, v.len()));
        }
        Ok(Some(v))
    }

    /// Teacher-forced forward pass with everything cached for backward.
    pub fn forward(&self, example: &EncodedExample, features: &ImageFeatureStore) -> Result<Trace> {
        self.check_ids(&example.question)?;
        self.check_ids(&example.answer)?;
        let image = self.image_for(features, &example.image_id)?;
        nn::forward(
            &self.params,
            self.config.state_source,
            &example.question,
            image,
            &example.answer,
        )
    }

    /// Total negative log-likelihood (nats) of `answer ⟨EOA⟩` given
    /// `⟨BOA⟩ answer`, composed from [`MqaModel::answer_step`].
    pub fn sequence_nll(
        &self,
        example: &EncodedExample,
        features: &ImageFeatureStore,
    ) -> Result<f64> {
        if example.answer.is_empty() {
            return Err(MqaError::Empty("answer"));
        }
        self.check_ids(&example.answer)?;
        let image = self.image_for(features, &example.image_id)?;
        let r_q = self.encode_question(&example.question)?;
        let mut state = self.zero_state();
        let mut input = BOA_ID;
        let mut nll = 0.0;
        let targets = example
            .answer
            .iter()
            .copied()
            .chain(std::iter::once(crate::vocab::EOA_ID));
        for target in targets {
            let (probs, next) = self.answer_step(&r_q, image, &state, input)?;
            nll -= probs[target].ln();
            state = next;
            input = target;
        }
        Ok(nll)
    }

    /// [`MqaModel::sequence_nll`] divided by the number of scored positions.
    pub fn mean_token_nll(
        &self,
        example: &EncodedExample,
        features: &ImageFeatureStore,
    ) -> Result<f64> {
        Ok(self.sequence_nll(example, features)? / example.target_len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{scaled_tanh, softmax, Matrix};
    use crate::vocab::EOA_ID;

    fn tiny(variant: Variant) -> MqaConfig {
        MqaConfig {
            n: 7,
            d_embed: 3,
            d_hidden: 4,
            d_fuse: 5,
            d_img: 6,
            variant,
            seed: 17,
            init_scale: 0.5,
            ..MqaConfig::default()
        }
    }

    fn store() -> ImageFeatureStore {
        let mut s = ImageFeatureStore::new(6);
        s.insert("a", vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]).unwrap();
        s.insert("b", vec![-1.0, 0.5, 0.5, 0.0, 0.2, -0.2]).unwrap();
        s
    }

    fn example(q: &[usize], a: &[usize]) -> EncodedExample {
        EncodedExample {
            image_id: "a".into(),
            question: q.to_vec(),
            answer: a.to_vec(),
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_tag(v.tag()), Some(v));
        }
        assert_eq!("mQA-noTWS".parse::<Variant>().unwrap(), Variant::NoTws);
        assert_eq!(
            "mQA-same-LSTMs".parse::<Variant>().unwrap(),
            Variant::SameLstms
        );
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn config_text_round_trip_and_validation() {
        let cfg = MqaConfig {
            state_source: StateSource::Cell,
            ..tiny(Variant::NoTws)
        };
        assert_eq!(MqaConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(MqaModel::init(MqaConfig {
            d_hidden: 0,
            ..cfg.clone()
        })
        .is_err());
        assert!(MqaModel::init(MqaConfig { n: 2, ..cfg }).is_err());
        assert!(MqaConfig::from_text("nonsense = 3").is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = MqaModel::init(tiny(Variant::Complete)).unwrap();
        let b = MqaModel::init(tiny(Variant::Complete)).unwrap();
        assert_eq!(a, b);
        let c = MqaModel::init(MqaConfig {
            seed: 18,
            ..tiny(Variant::Complete)
        })
        .unwrap();
        assert_ne!(a, c);
        let bias_zero = a
            .params
            .tensors()
            .iter()
            .filter(|t| t.kind == nn::TensorKind::Bias)
            .all(|t| t.data.iter().all(|&x| x == 0.0));
        assert!(bias_zero);
    }

    #[test]
    fn same_lstms_has_one_cell() {
        let m = MqaModel::init(tiny(Variant::SameLstms)).unwrap();
        assert!(matches!(m.params.question, nn::QuestionEncoder::SharedLstm));
        assert!(std::ptr::eq(
            m.params.question_cell().unwrap(),
            &m.params.lstm_a
        ));
    }

    #[test]
    fn single_token_question_is_one_step() {
        let m = MqaModel::init(tiny(Variant::Complete)).unwrap();
        let r_q = m.encode_question(&[4]).unwrap();
        let cell = m.params.question_cell().unwrap();
        let s = nn::lstm_step(cell, &m.zero_state(), m.params.embedding.embed(4).unwrap()).unwrap();
        assert_eq!(r_q, s.h);
        assert!(matches!(m.encode_question(&[]), Err(MqaError::Empty(_))));
        assert!(m.encode_question(&[7]).is_err());
    }

    #[test]
    fn average_question_encoding() {
        let m = MqaModel::init(tiny(Variant::AvgQuestion)).unwrap();
        assert_eq!(
            m.encode_question(&[5, 5]).unwrap(),
            m.params.embedding.embed(5).unwrap()
        );
        let a = m.encode_question(&[3, 4, 6]).unwrap();
        let b = m.encode_question(&[6, 3, 4]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = MqaModel::zeros(tiny(Variant::Complete)).unwrap();
        let r_q = m.encode_question(&[3, 4]).unwrap();
        let (p, _) = m
            .answer_step(&r_q, Some(&[1.0; 6]), &m.zero_state(), 5)
            .unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
        let nll = m
            .sequence_nll(&example(&[3], &[4, 5, 6]), &store())
            .unwrap();
        assert!((nll - 4.0 * 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn blind_ignores_image() {
        let m = MqaModel::init(tiny(Variant::Blind)).unwrap();
        let r_q = m.encode_question(&[3, 4]).unwrap();
        let s = m.zero_state();
        let a = m.answer_step(&r_q, Some(&[1.0; 6]), &s, 5).unwrap();
        let b = m.answer_step(&r_q, Some(&[-3.0; 6]), &s, 5).unwrap();
        assert_eq!(a, b);
        let mut e = example(&[3], &[4]);
        e.image_id = "not-in-store".into();
        assert!(m.sequence_nll(&e, &store()).is_ok());
    }

    #[test]
    fn missing_image_is_an_error() {
        let m = MqaModel::init(tiny(Variant::Complete)).unwrap();
        let mut e = example(&[3], &[4]);
        e.image_id = "zzz".into();
        match m.sequence_nll(&e, &store()) {
            Err(MqaError::MissingImage(id)) => assert_eq!(id, "zzz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scalar_model_matches_hand_computation() {
        // All dims 1, N = 3. Only a few weights are nonzero so the chain is
        // easy to follow by hand.
        let cfg = MqaConfig {
            n: 3,
            d_embed: 1,
            d_hidden: 1,
            d_fuse: 1,
            d_img: 1,
            ..tiny(Variant::Complete)
        };
        let mut m = MqaModel::zeros(cfg).unwrap();
        let p = &mut m.params;
        p.embedding.weights = Matrix::from_vec(3, 1, vec![1.0, -1.0, 0.5]).unwrap();
        p.lstm_a.candidate.w.set(0, 0, 2.0);
        p.fusing.v_i.as_mut().unwrap().set(0, 0, 1.0);
        p.fusing.v_ra.set(0, 0, 1.0);
        p.fusing.v_w.set(0, 0, 1.0);
        p.intermediate.v_m.set(0, 0, 1.5);
        p.head.bias = vec![0.0, 0.1, 0.2];

        let image = [0.3];
        let (probs, state) = m
            .answer_step(&[0.0], Some(&image), &m.zero_state(), 0)
            .unwrap();
        // LSTM(A): gates 0.5, candidate relu(2·1) = 2, c = 1, h = 0.5
        assert_eq!(state.c, vec![1.0]);
        assert_eq!(state.h, vec![0.5]);
        let f = scaled_tanh(0.3 + 0.5 + 1.0);
        let mm = scaled_tanh(1.5 * f);
        let logits = [mm + 0.0, -mm + 0.1, 0.5 * mm + 0.2];
        let expected = softmax(&logits);
        for (a, b) in probs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nll_equals_product_of_step_probabilities() {
        for v in Variant::ALL {
            let m = MqaModel::init(tiny(v)).unwrap();
            let e = example(&[3, 6, 4], &[5, 2]);
            let img = store();
            let image = m.image_for(&img, "a").unwrap();
            let r_q = m.encode_question(&e.question).unwrap();
            let mut state = m.zero_state();
            let mut total = 0.0;
            for (input, target) in [(BOA_ID, 5), (5, 2), (2, EOA_ID)] {
                let (p, s) = m.answer_step(&r_q, image, &state, input).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                total += -p[target].ln();
                state = s;
            }
            let nll = m.sequence_nll(&e, &img).unwrap();
            assert!((nll - total).abs() < 1e-10, "{v}");
            let trace = m.forward(&e, &img).unwrap();
            assert!((trace.loss - nll).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn complete_with_zero_image_projection_equals_blind() {
        let complete = MqaModel::init(tiny(Variant::Complete)).unwrap();
        let mut zeroed = complete.clone();
        zeroed.params.fusing.v_i.as_mut().unwrap().fill(0.0);
        let mut blind = MqaModel::zeros(tiny(Variant::Blind)).unwrap();
        let mut params = zeroed.params.clone();
        params.fusing.v_i = None;
        blind.params = params;
        let e = example(&[3, 4], &[6, 5]);
        assert_eq!(
            zeroed.sequence_nll(&e, &store()).unwrap(),
            blind.sequence_nll(&e, &store()).unwrap()
        );
    }
}
