//! Token dictionary with the answer-delimiting and out-of-vocabulary sentinels.
//!
//! Ids `0`, `1`, `2` are always `⟨BOA⟩`, `⟨EOA⟩`, `⟨OOV⟩`. Remaining tokens
//! follow in descending corpus frequency, ties broken lexicographically.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{MqaError, Result};

pub type TokenId = usize;

pub const BOA: &str = "⟨BOA⟩";
pub const EOA: &str = "⟨EOA⟩";
pub const OOV: &str = "⟨OOV⟩";

pub const BOA_ID: TokenId = 0;
pub const EOA_ID: TokenId = 1;
pub const OOV_ID: TokenId = 2;

const SPECIALS: [&str; 3] = [BOA, EOA, OOV];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from pre-tokenized sequences, keeping tokens seen
    /// at least `min_count` times.
    pub fn build<T: AsRef<[S]>, S: AsRef<str>>(corpus: &[T], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(MqaError::Config("min_count must be >= 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for seq in corpus {
            for tok in seq.as_ref() {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !SPECIALS.contains(&t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
    }

    fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(MqaError::Config(format!(
                    "duplicate token `{tok}` in vocabulary"
                )));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Maps every token to its id, unknown tokens to `⟨OOV⟩`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(OOV_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(MqaError::TokenOutOfRange { id, n: self.len() })
            })
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(special) {
                return Err(MqaError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: format!("expected special token {special}"),
                });
            }
        }
        for (i, l) in lines.iter().enumerate() {
            if l.is_empty() || l.contains(char::is_whitespace) {
                return Err(MqaError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: "token must be nonempty and contain no whitespace".into(),
                });
            }
        }
        Self::from_tokens(lines[3..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| MqaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MqaError::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Splits on whitespace.
pub fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn build_respects_min_count() {
        let v = Vocabulary::build(&[seq("a b a")], 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocabulary::build::<Vec<String>, String>(&[], 1).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.tokens(), &[BOA, EOA, OOV]);
        assert!(Vocabulary::build::<Vec<String>, String>(&[], 0).is_err());
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let corpus = [seq("b c c a"), seq("b a d")];
        let v = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(&v.tokens()[3..], &["a", "b", "c", "d"]);
        let v2 = Vocabulary::build(&corpus, 1).unwrap();
        assert_eq!(v, v2);
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(&[seq("what color is it ?")], 1).unwrap();
        let ids = v.encode(&seq("what color ?"));
        assert_eq!(v.decode(&ids).unwrap(), seq("what color ?"));
        assert_eq!(v.encode(&["zzz_unseen"]), vec![OOV_ID]);
        assert_eq!(v.decode(&[BOA_ID, EOA_ID]).unwrap(), vec![BOA, EOA]);
        let err = v.decode(&[v.len()]).unwrap_err();
        assert!(err.to_string().contains(&v.len().to_string()));
    }

    #[test]
    fn text_round_trip_and_validation() {
        let v = Vocabulary::build(&[seq("x y y z")], 1).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("⟨BOA⟩\n⟨EOA⟩\n⟨OOV⟩\n"));
        assert_eq!(Vocabulary::from_text(&text, "mem").unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\nc\n", "mem").is_err());
        assert!(Vocabulary::from_text("⟨BOA⟩\n⟨EOA⟩\n⟨OOV⟩\nq\nq\n", "mem").is_err());
    }

    proptest! {
        #[test]
        fn ids_in_range_and_size_formula(
            corpus in prop::collection::vec(prop::collection::vec("[a-e]{1,2}", 0..8), 0..8),
            min_count in 1usize..4,
        ) {
            let v = Vocabulary::build(&corpus, min_count).unwrap();
            let mut counts = HashMap::new();
            for s in &corpus { for t in s { *counts.entry(t.clone()).or_insert(0usize) += 1; } }
            let expected = 3 + counts.values().filter(|&&c| c >= min_count).count();
            prop_assert_eq!(v.len(), expected);
            for s in &corpus {
                let ids = v.encode(s);
                prop_assert!(ids.iter().all(|&i| i < v.len()));
                if ids.iter().all(|&i| i != OOV_ID) {
                    prop_assert_eq!(&v.decode(&ids).unwrap(), s);
                }
            }
        }
    }
}
