//! Synthetic hypernym benchmark, vocabulary and the JSONL interchange format.

mod jsonl;
mod taxonomy;
mod vocab;

pub use jsonl::{load_corpus, load_jsonl, save_corpus, save_jsonl, Dataset};
pub use taxonomy::{gen_mcqa, gen_pretrain_corpus, gen_taxonomy, Taxonomy};
pub use vocab::{Vocab, BOS, EOS, PAD, SEP, SPECIAL_TOKENS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One multi-choice question: token ids of the question, each candidate
/// answer as its own token sequence, and the index of the correct one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqExample {
    pub question: Vec<usize>,
    pub candidates: Vec<Vec<usize>>,
    pub gold: usize,
}

impl McqExample {
    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Checks the example against a vocabulary of `vocab_len` ids.
    /// `line` is reported in errors (0 when not read from a file).
    pub fn validate(&self, vocab_len: usize, line: usize) -> Result<()> {
        let schema = |message: String| Error::Schema { line, message };
        if self.candidates.len() < 2 {
            return Err(schema(format!(
                "need at least 2 candidates, got {}",
                self.candidates.len()
            )));
        }
        if self.gold >= self.candidates.len() {
            return Err(schema(format!(
                "gold index {} out of range for {} candidates",
                self.gold,
                self.candidates.len()
            )));
        }
        if self.question.is_empty() || self.candidates.iter().any(Vec::is_empty) {
            return Err(schema("empty question or candidate".into()));
        }
        for (i, a) in self.candidates.iter().enumerate() {
            if self.candidates[..i].contains(a) {
                return Err(schema(format!("candidate {i} duplicates an earlier one")));
            }
        }
        let ids = self.question.iter().chain(self.candidates.iter().flatten());
        if let Some(&bad) = ids.into_iter().find(|&&id| id >= vocab_len) {
            return Err(Error::Vocab(format!("id {bad} (line {line})")));
        }
        Ok(())
    }
}
