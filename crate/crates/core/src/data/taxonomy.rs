//! Procedural stand-in for a harvested hyponym/hypernym resource.
//!
//! Every hyponym belongs to exactly one of a handful of disjoint categories.
//! Knowledge of the mapping enters a language model through a templated
//! pretraining corpus; the multi-choice questions then ask for it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, BOS, EOS};
use super::McqExample;
use crate::error::{Error, Result};

/// Words of the question template `what is a <hyponym> ?` and of the
/// pretraining template `<hyponym> is a <category>`.
pub const TEMPLATE_WORDS: [&str; 4] = ["what", "is", "a", "?"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    pub categories: Vec<String>,
    pub hyponyms: Vec<String>,
    /// Category index of every hyponym.
    pub category_of: Vec<usize>,
    pub seed: u64,
}

impl Taxonomy {
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn n_hyponyms(&self) -> usize {
        self.hyponyms.len()
    }

    /// Hyponym indices of each category.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.categories.len()];
        for (h, &c) in self.category_of.iter().enumerate() {
            out[c].push(h);
        }
        out
    }
}

fn width(n: usize, min: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(min)
}

/// Generates a taxonomy and its closed vocabulary.
///
/// Hyponyms are assigned to categories round-robin and the assignment is then
/// shuffled, so category sizes differ by at most one.
pub fn gen_taxonomy(n_categories: usize, n_hyponyms: usize, seed: u64) -> Result<(Taxonomy, Vocab)> {
    if n_categories < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 categories, got {n_categories}"
        )));
    }
    if n_hyponyms < n_categories {
        return Err(Error::Parameter(format!(
            "need at least one hyponym per category ({n_hyponyms} < {n_categories})"
        )));
    }
    let cw = width(n_categories, 2);
    let hw = width(n_hyponyms, 4);
    let categories: Vec<String> = (0..n_categories).map(|i| format!("cat{i:0cw$}")).collect();
    let hyponyms: Vec<String> = (0..n_hyponyms).map(|i| format!("hyp{i:0hw$}")).collect();
    let mut category_of: Vec<usize> = (0..n_hyponyms).map(|i| i % n_categories).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    category_of.shuffle(&mut rng);

    let vocab = Vocab::with_words(
        TEMPLATE_WORDS
            .iter()
            .map(|s| s.to_string())
            .chain(categories.iter().cloned())
            .chain(hyponyms.iter().cloned()),
    )?;
    Ok((
        Taxonomy {
            categories,
            hyponyms,
            category_of,
            seed,
        },
        vocab,
    ))
}

fn id(vocab: &Vocab, word: &str) -> Result<usize> {
    vocab.id(word).ok_or_else(|| Error::Vocab(word.to_string()))
}

/// Sentences `<bos> <hyponym> is a <category> <eos>`, each pair repeated
/// `repeats` times, shuffled with the taxonomy seed.
pub fn gen_pretrain_corpus(taxonomy: &Taxonomy, vocab: &Vocab, repeats: usize) -> Result<Vec<Vec<usize>>> {
    if repeats == 0 {
        return Err(Error::Parameter("repeats must be at least 1".into()));
    }
    let (is, a) = (id(vocab, "is")?, id(vocab, "a")?);
    let mut corpus = Vec::with_capacity(taxonomy.n_hyponyms() * repeats);
    for (h, &c) in taxonomy.category_of.iter().enumerate() {
        let sentence = vec![
            BOS,
            id(vocab, &taxonomy.hyponyms[h])?,
            is,
            a,
            id(vocab, &taxonomy.categories[c])?,
            EOS,
        ];
        corpus.extend(std::iter::repeat_n(sentence, repeats));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(taxonomy.seed ^ 0x636f_7270_7573);
    corpus.shuffle(&mut rng);
    Ok(corpus)
}

/// One question `what is a <hyponym> ?` per hyponym, answered by choosing
/// among all categories (in taxonomy order).
///
/// The dev split takes `round(dev_fraction * n)` hyponyms, drawn by seed and
/// balanced across categories: hyponyms are dealt out category by category,
/// so no category contributes more than one more dev example than another.
pub fn gen_mcqa(
    taxonomy: &Taxonomy,
    vocab: &Vocab,
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<McqExample>, Vec<McqExample>)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "dev fraction must lie in (0, 1), got {dev_fraction}"
        )));
    }
    let candidates: Vec<Vec<usize>> = taxonomy
        .categories
        .iter()
        .map(|c| id(vocab, c).map(|i| vec![i]))
        .collect::<Result<_>>()?;
    let head: Vec<usize> = ["what", "is", "a"]
        .iter()
        .map(|w| id(vocab, w))
        .collect::<Result<_>>()?;
    let qmark = id(vocab, "?")?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members = taxonomy.members();
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let mut cat_order: Vec<usize> = (0..members.len()).collect();
    cat_order.shuffle(&mut rng);
    let longest = members.iter().map(Vec::len).max().unwrap_or(0);
    let dealt: Vec<usize> = (0..longest)
        .flat_map(|rank| {
            cat_order
                .iter()
                .filter_map(|&c| members[c].get(rank).copied())
                .collect::<Vec<_>>()
        })
        .collect();
    let n_dev = (dev_fraction * taxonomy.n_hyponyms() as f64).round() as usize;
    let mut is_dev = vec![false; taxonomy.n_hyponyms()];
    for &h in &dealt[..n_dev] {
        is_dev[h] = true;
    }

    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (h, &c) in taxonomy.category_of.iter().enumerate() {
        let mut question = head.clone();
        question.push(id(vocab, &taxonomy.hyponyms[h])?);
        question.push(qmark);
        let ex = McqExample {
            question,
            candidates: candidates.clone(),
            gold: c,
        };
        if is_dev[h] {
            dev.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((train, dev))
}
