use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<sep>", "<eos>"];

/// Bijective map between word-level token strings and ids. The four special
/// tokens always occupy ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary with the specials followed by `words`.
    pub fn with_words<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|w| w.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Vocabulary from the complete id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let schema = |message: String| Error::Schema { line: 1, message };
        if tokens.len() < SPECIAL_TOKENS.len()
            || tokens[..SPECIAL_TOKENS.len()]
                .iter()
                .zip(SPECIAL_TOKENS)
                .any(|(a, b)| a != b)
        {
            return Err(schema(format!(
                "vocabulary must start with {SPECIAL_TOKENS:?}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(schema(format!("invalid token {t:?}")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(schema(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Whitespace tokenization.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Vocab(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
