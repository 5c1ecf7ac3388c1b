//! Closed-lexicon whitespace vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
/// Mask sentinels `<X0>`, `<X1>`, ... occupy the ids right after the other specials.
pub const SENTINEL_BASE: usize = 3;
pub const NUM_SENTINELS: usize = 4;
pub const NUM_SPECIALS: usize = SENTINEL_BASE + NUM_SENTINELS;

pub fn sentinel(i: usize) -> usize {
    assert!(i < NUM_SENTINELS, "sentinel {i} out of range");
    SENTINEL_BASE + i
}

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIALS
}

pub fn is_sentinel(id: usize) -> bool {
    (SENTINEL_BASE..NUM_SPECIALS).contains(&id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

fn special_tokens() -> Vec<String> {
    let mut out = vec!["<pad>".to_string(), "</s>".to_string(), "<unk>".to_string()];
    out.extend((0..NUM_SENTINELS).map(|i| format!("<X{i}>")));
    out
}

impl Vocabulary {
    /// Specials first, then `words` in the given order. Duplicates are an error.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = special_tokens();
        tokens.extend(words.into_iter().map(Into::into));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != special_tokens()[..] {
            return Err(CklError::VocabularyMismatch("special tokens missing or reordered".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(CklError::VocabularyMismatch(format!("bad token {t:?}")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(CklError::VocabularyMismatch(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Detokenizes with every special token dropped.
    pub fn detokenize_content(&self, ids: &[usize]) -> String {
        let content: Vec<usize> = ids.iter().copied().filter(|&id| !is_special(id)).collect();
        self.detokenize(&content)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = CklError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["Dante", "was", "born", "in", "Florence"]).unwrap()
    }

    #[test]
    fn tokenizes_by_lookup() {
        let v = vocab();
        let ids = v.tokenize("Dante was born in Florence");
        let expected: Vec<usize> = ["Dante", "was", "born", "in", "Florence"]
            .iter()
            .map(|w| v.id(w).unwrap())
            .collect();
        assert_eq!(ids, expected);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.detokenize(&ids), "Dante was born in Florence");
    }

    #[test]
    fn unknown_words_and_specials() {
        let v = vocab();
        assert_eq!(v.tokenize("Dante visited Rome"), vec![v.id("Dante").unwrap(), UNK, UNK]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<X0>"), Some(sentinel(0)));
        assert!(v.id("Dante").unwrap() >= NUM_SPECIALS);
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocabulary::new(["a", "b", "a"]).is_err());
        assert!(Vocabulary::new(["<pad>"]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let v = vocab();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}
