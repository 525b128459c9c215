//! JSONL dataset files.
//!
//! The first line is `{"vocab": [...]}` with token strings in id order; each
//! following line is one example
//! `{"question": [ids], "candidates": [[ids], ...], "gold": int}`.
//! UTF-8 with LF line endings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;
use super::McqExample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub examples: Vec<McqExample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabRecord {
    vocab: Vec<String>,
}

#[derive(Serialize)]
struct ExampleRef<'a> {
    question: &'a [usize],
    candidates: &'a [Vec<usize>],
    gold: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    question: Vec<usize>,
    candidates: Vec<Vec<usize>>,
    gold: usize,
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain records always serialize")
}

pub fn save_jsonl(examples: &[McqExample], vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = to_json(&VocabRecord {
        vocab: vocab.tokens().to_vec(),
    });
    out.push('\n');
    for ex in examples {
        out.push_str(&to_json(&ExampleRef {
            question: &ex.question,
            candidates: &ex.candidates,
            gold: ex.gold,
        }));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub(crate) fn parse_jsonl(text: &str) -> Result<Dataset> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
        line,
        message: e.to_string(),
    };
    let (_, header) = lines.next().unwrap_or((1, ""));
    let header: VocabRecord = serde_json::from_str(header).map_err(|e| parse_err(1, e))?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    let mut examples = Vec::new();
    let mut lines = lines.peekable();
    while let Some((n, line)) = lines.next() {
        if line.is_empty() && lines.peek().is_none() {
            break;
        }
        let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| parse_err(n, e))?;
        let ex = McqExample {
            question: rec.question,
            candidates: rec.candidates,
            gold: rec.gold,
        };
        ex.validate(vocab.len(), n)?;
        examples.push(ex);
    }
    Ok(Dataset { vocab, examples })
}

/// Writes one whitespace-joined sentence per line.
pub fn save_corpus(corpus: &[Vec<usize>], vocab: &Vocab, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in corpus {
        out.push_str(&vocab.decode(s));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode(l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::with_words(["q", "a1", "a2"]).unwrap()
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_jsonl(&[], &vocab(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("{\"vocab\":[\"<pad>\""));
        let d = load_jsonl(&p).unwrap();
        assert!(d.examples.is_empty());
        assert_eq!(d.vocab, vocab());
    }

    #[test]
    fn exact_line_layout() {
        let ex = McqExample {
            question: vec![4],
            candidates: vec![vec![5], vec![6]],
            gold: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_jsonl(&[ex], &vocab(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(
            text.lines().nth(1).unwrap(),
            r#"{"question":[4],"candidates":[[5],[6]],"gold":1}"#
        );
    }

    #[test]
    fn rejects_single_candidate() {
        let text = format!(
            "{}\n{}\n",
            to_json(&VocabRecord {
                vocab: vocab().tokens().to_vec()
            }),
            r#"{"question":[4],"candidates":[[5]],"gold":0}"#
        );
        assert!(matches!(parse_jsonl(&text), Err(Error::Schema { line: 2, .. })));
    }

    #[test]
    fn reports_malformed_line_number() {
        let text = format!(
            "{}\n{}\nnot json\n",
            to_json(&VocabRecord {
                vocab: vocab().tokens().to_vec()
            }),
            r#"{"question":[4],"candidates":[[5],[6]],"gold":0}"#
        );
        assert!(matches!(parse_jsonl(&text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn rejects_unknown_ids() {
        let text = format!(
            "{}\n{}\n",
            to_json(&VocabRecord {
                vocab: vocab().tokens().to_vec()
            }),
            r#"{"question":[99],"candidates":[[5],[6]],"gold":0}"#
        );
        assert!(matches!(parse_jsonl(&text), Err(Error::Vocab(_))));
    }
}
