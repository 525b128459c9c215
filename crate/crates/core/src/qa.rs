//! The generator-classifier system and its baselines.
//!
//! The generator reads `<bos> q <sep>` and decodes a hypothesis `c` one token
//! at a time, feeding each straight-through one-hot back as input. The
//! classifiers score every candidate answer:
//!
//! * similarity: `s_i = avg_{j,k} <e_c^j, e_a^k>` over a word-embedding table;
//!   it never sees the question;
//! * LM-based: `s_i = w^T g_i` with `g_i` the last hidden state of
//!   `<bos> q <sep> a_i <sep> c`;
//! * end-to-end baseline: `s_i = w^T g_i` over `<bos> q <sep> a_i`;
//! * no-interaction baseline: `s_i = avg_k <g_final, e_a^k>` with `g_final`
//!   the last hidden state of `<bos> q`.
//!
//! All batch functions take one entry per example and return one `[1 x n]`
//! score row per example.

use crate::autodiff::{Graph, Var};
use crate::data::{BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::estimator::{gumbel_noise, gumbel_softmax, top_k_indices};
use crate::lm::{self, LmVars, Slot, ToyLm};
use crate::tensor::{argmax, Scalar, Tensor};

pub use crate::data::McqExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    /// `len` autoregressive steps.
    Stepwise { len: usize },
    /// One step emitting the `k` most probable distinct tokens.
    TopK { k: usize },
}

impl Decoding {
    pub fn hypothesis_len(self) -> usize {
        match self {
            Decoding::Stepwise { len } => len,
            Decoding::TopK { k } => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisConfig {
    pub decoding: Decoding,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Perturb logits with Gumbel noise while training.
    pub gumbel: bool,
    /// Forward hard one-hots while training; when off, the relaxed
    /// distribution itself is passed on.
    pub straight_through: bool,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::Stepwise { len: 1 },
            tau: 1.0,
            gumbel: true,
            straight_through: true,
        }
    }
}

/// Training samples with noise and the configured estimator; evaluation
/// decodes noise-free argmax one-hots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Train,
    Eval,
}

/// One decoding step across the batch.
#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// Relaxed distributions `[B x V]`.
    pub soft: Var,
    /// Generator log-probabilities `[B x V]` (noise-free).
    pub log_probs: Var,
    /// Generator context of each example at this step:
    /// `<bos> q <sep> c_1 .. c_{i-1}`.
    pub contexts: Vec<Vec<usize>>,
    /// Tokens already emitted before this step.
    pub prefixes: Vec<Vec<usize>>,
}

/// Hypotheses for a batch of questions.
#[derive(Clone, Debug)]
pub struct HypothesisBatch {
    pub ids: Vec<Vec<usize>>,
    /// Per example `[|c| x V]` rows handed to the classifiers.
    pub rows: Vec<Var>,
    pub steps: Vec<DecodeStep>,
}

/// A single example's hypothesis.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    /// `[|c| x V]` forward values.
    pub hard: Var,
    /// Per-step relaxed distributions `[1 x V]` (batch rows).
    pub soft: Vec<Var>,
    /// Per-step generator log-probabilities.
    pub log_probs: Vec<Var>,
}

/// Generator input for a question.
pub fn generator_context(question: &[usize]) -> Vec<usize> {
    let mut ctx = Vec::with_capacity(question.len() + 2);
    ctx.push(BOS);
    ctx.extend_from_slice(question);
    ctx.push(SEP);
    ctx
}

/// Decodes one hypothesis per question.
pub fn generate_batch<T: Scalar>(
    g: &mut Graph<T>,
    gen: &LmVars,
    questions: &[&[usize]],
    cfg: &HypothesisConfig,
    sampling: Sampling,
) -> Result<HypothesisBatch> {
    let len = cfg.decoding.hypothesis_len();
    if len == 0 {
        return Err(Error::contract("hypothesis length must be at least 1"));
    }
    let contexts: Vec<Vec<usize>> = questions.iter().map(|q| generator_context(q)).collect();
    let steps_needed = match cfg.decoding {
        Decoding::Stepwise { len } => len,
        Decoding::TopK { .. } => 1,
    };
    for c in &contexts {
        let total = c.len() + steps_needed - 1;
        if total > gen.max_len() {
            return Err(Error::Length {
                len: total,
                max: gen.max_len(),
            });
        }
    }
    let train = sampling == Sampling::Train;
    let b = questions.len();
    let mut ids: Vec<Vec<usize>> = vec![Vec::with_capacity(len); b];
    let mut fed: Vec<Vec<Var>> = vec![Vec::with_capacity(len); b];
    let mut steps = Vec::with_capacity(steps_needed);

    for _ in 0..steps_needed {
        let seqs: Vec<Vec<Slot>> = (0..b)
            .map(|e| {
                let mut s = vec![Slot::Ids(contexts[e].clone())];
                s.extend(fed[e].iter().map(|&r| Slot::Rows(r)));
                s
            })
            .collect();
        let logits = lm::next_token_logits(g, gen, &seqs)?;
        let log_probs = g.log_softmax_last(logits)?;
        let noise = (train && cfg.gumbel).then(|| gumbel_noise(g, logits));
        let tau = if train { cfg.tau } else { 1.0 };
        let soft = gumbel_softmax(g, logits, tau, noise)?;
        let step_contexts = (0..b)
            .map(|e| {
                let mut c = contexts[e].clone();
                c.extend_from_slice(&ids[e]);
                c
            })
            .collect();
        let prefixes = ids.clone();

        for e in 0..b {
            let row = g.value(soft).row(e).to_vec();
            match cfg.decoding {
                Decoding::Stepwise { .. } => {
                    let id = argmax(&row);
                    let r = if train && !cfg.straight_through {
                        g.select_rows(soft, &[e])?
                    } else {
                        g.straight_through(soft, &[(e, id)])?
                    };
                    ids[e].push(id);
                    fed[e].push(r);
                }
                Decoding::TopK { k } => {
                    if k > row.len() {
                        return Err(Error::contract(format!("K = {k} exceeds vocabulary")));
                    }
                    let top = top_k_indices(&row, k);
                    let r = if train && !cfg.straight_through {
                        g.select_rows(soft, &vec![e; k])?
                    } else {
                        let picks: Vec<_> = top.iter().map(|&id| (e, id)).collect();
                        g.straight_through(soft, &picks)?
                    };
                    ids[e] = top;
                    fed[e].push(r);
                }
            }
        }
        steps.push(DecodeStep {
            soft,
            log_probs,
            contexts: step_contexts,
            prefixes,
        });
    }
    let rows = fed
        .into_iter()
        .map(|r| if r.len() == 1 { Ok(r[0]) } else { g.concat_rows(&r) })
        .collect::<Result<_>>()?;
    Ok(HypothesisBatch { ids, rows, steps })
}

/// Decodes the hypothesis for a single question.
pub fn generate_hypothesis<T: Scalar>(
    g: &mut Graph<T>,
    gen: &LmVars,
    question: &[usize],
    cfg: &HypothesisConfig,
    sampling: Sampling,
) -> Result<Hypothesis> {
    let batch = generate_batch(g, gen, &[question], cfg, sampling)?;
    let mut soft = Vec::new();
    let mut log_probs = Vec::new();
    for s in &batch.steps {
        soft.push(s.soft);
        log_probs.push(s.log_probs);
    }
    Ok(Hypothesis {
        ids: batch.ids.into_iter().next().expect("one example"),
        hard: batch.rows[0],
        soft,
        log_probs,
    })
}

/// What the classifiers see in the hypothesis slot.
#[derive(Clone, Copy, Debug)]
pub enum HypothesisInput {
    /// `[|c| x V]` rows from the generator.
    Rows(Var),
    /// `k` positions with zeroed embeddings (ablation).
    Zeroed(usize),
}

impl HypothesisInput {
    fn slot(self) -> Slot {
        match self {
            HypothesisInput::Rows(v) => Slot::Rows(v),
            HypothesisInput::Zeroed(k) => Slot::Zeros(k),
        }
    }
}

/// `[n x d]` mean embedding of each candidate.
fn candidate_means<T: Scalar>(g: &mut Graph<T>, table: Var, candidates: &[Vec<usize>]) -> Result<Var> {
    let mut means = Vec::with_capacity(candidates.len());
    for a in candidates {
        if a.is_empty() {
            return Err(Error::contract("empty answer candidate"));
        }
        let e = g.select_rows(table, a)?;
        means.push(g.mean_rows(e)?);
    }
    g.concat_rows(&means)
}

/// Similarity classifier over a batch. `table` is `[V x d]`.
pub fn similarity_scores_batch<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    hypotheses: &[HypothesisInput],
    candidates: &[&[Vec<usize>]],
) -> Result<Vec<Var>> {
    let d = g.value(table).cols();
    hypotheses
        .iter()
        .zip(candidates)
        .map(|(h, cands)| {
            let hyp_mean = match *h {
                HypothesisInput::Rows(rows) => {
                    if g.value(rows).rows() == 0 {
                        return Err(Error::contract("empty hypothesis"));
                    }
                    let e = g.matmul(rows, table)?;
                    g.mean_rows(e)?
                }
                HypothesisInput::Zeroed(_) => g.constant(Tensor::zeros(vec![1, d])),
            };
            let a = candidate_means(g, table, cands)?;
            g.matmul_nt(hyp_mean, a)
        })
        .collect()
}

/// `s_i = avg(E_c^T E_{a_i})` for one example; the question is not an input.
pub fn similarity_scores<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    hypothesis: HypothesisInput,
    candidates: &[Vec<usize>],
) -> Result<Var> {
    Ok(similarity_scores_batch(g, table, &[hypothesis], &[candidates])?[0])
}

/// Splits a `[1 x B*n]` row of scores into per-example `[1 x n]` rows.
fn split_scores<T: Scalar>(g: &mut Graph<T>, flat: Var, sizes: &[usize]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        let idx: Vec<usize> = (at..at + n).collect();
        let s = g.gather_elems(flat, &idx)?;
        out.push(g.reshape(s, vec![1, n])?);
        at += n;
    }
    Ok(out)
}

/// Scores every `(example, candidate)` sequence with `w^T g`.
fn head_scored<T: Scalar>(
    g: &mut Graph<T>,
    cls: &LmVars,
    head: Var,
    seqs: Vec<Vec<Slot>>,
    sizes: &[usize],
) -> Result<Vec<Var>> {
    let summaries = lm::summary_vector(g, cls, &seqs)?;
    let flat = lm::head_scores(g, head, summaries)?;
    split_scores(g, flat, sizes)
}

/// LM-based classifier: `g_i` from `<bos> q <sep> a_i <sep> c`.
pub fn lm_classifier_scores_batch<T: Scalar>(
    g: &mut Graph<T>,
    cls: &LmVars,
    head: Var,
    examples: &[&McqExample],
    hypotheses: &[HypothesisInput],
) -> Result<Vec<Var>> {
    let mut seqs = Vec::new();
    let mut sizes = Vec::with_capacity(examples.len());
    for (ex, h) in examples.iter().zip(hypotheses) {
        for a in &ex.candidates {
            let mut ids = generator_context(&ex.question);
            ids.extend_from_slice(a);
            ids.push(SEP);
            seqs.push(vec![Slot::Ids(ids), h.slot()]);
        }
        sizes.push(ex.candidates.len());
    }
    head_scored(g, cls, head, seqs, &sizes)
}

pub fn lm_classifier_scores<T: Scalar>(
    g: &mut Graph<T>,
    cls: &LmVars,
    head: Var,
    example: &McqExample,
    hypothesis: HypothesisInput,
) -> Result<Var> {
    Ok(lm_classifier_scores_batch(g, cls, head, &[example], &[hypothesis])?[0])
}

/// End-to-end baseline: `g_i` from `<bos> q <sep> a_i`, no hypothesis.
pub fn e2e_scores_batch<T: Scalar>(
    g: &mut Graph<T>,
    cls: &LmVars,
    head: Var,
    examples: &[&McqExample],
) -> Result<Vec<Var>> {
    let mut seqs = Vec::new();
    let mut sizes = Vec::with_capacity(examples.len());
    for ex in examples {
        for a in &ex.candidates {
            let mut ids = generator_context(&ex.question);
            ids.extend_from_slice(a);
            seqs.push(vec![Slot::Ids(ids)]);
        }
        sizes.push(ex.candidates.len());
    }
    head_scored(g, cls, head, seqs, &sizes)
}

pub fn e2e_scores<T: Scalar>(g: &mut Graph<T>, cls: &LmVars, head: Var, example: &McqExample) -> Result<Var> {
    Ok(e2e_scores_batch(g, cls, head, &[example])?[0])
}

/// No-interaction baseline: `s_i = avg_k <g_final, e_a^k>` where `g_final`
/// summarizes `<bos> q` alone.
pub fn no_interaction_scores_batch<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &LmVars,
    table: Var,
    examples: &[&McqExample],
) -> Result<Vec<Var>> {
    let seqs: Vec<Vec<Slot>> = examples
        .iter()
        .map(|ex| {
            let mut ids = vec![BOS];
            ids.extend_from_slice(&ex.question);
            vec![Slot::Ids(ids)]
        })
        .collect();
    let finals = lm::summary_vector(g, encoder, &seqs)?;
    let mut out = Vec::with_capacity(examples.len());
    for (b, ex) in examples.iter().enumerate() {
        let gf = g.select_rows(finals, &[b])?;
        let a = candidate_means(g, table, &ex.candidates)?;
        out.push(g.matmul_nt(gf, a)?);
    }
    Ok(out)
}

pub fn no_interaction_scores<T: Scalar>(
    g: &mut Graph<T>,
    encoder: &LmVars,
    table: Var,
    example: &McqExample,
) -> Result<Var> {
    Ok(no_interaction_scores_batch(g, encoder, table, &[example])?[0])
}

/// Softmax over candidate scores and the argmax (ties to the lowest index).
pub fn predict(scores: &[f32]) -> Result<(Vec<f32>, usize)> {
    if scores.len() < 2 {
        return Err(Error::contract("prediction needs at least 2 candidates"));
    }
    let mx = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = scores.iter().map(|&s| (s - mx).exp()).collect();
    let z: f32 = exps.iter().sum();
    Ok((exps.iter().map(|e| e / z).collect(), argmax(scores)))
}

/// Greedy decoding without noise, stopping early at `<eos>` (which is not
/// included in the output).
pub fn supgen_decode(generator: &ToyLm, question: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut out = supgen_decode_batch(generator, &[question], max_len)?;
    Ok(out.pop().expect("one question"))
}

pub fn supgen_decode_batch(generator: &ToyLm, questions: &[&[usize]], max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut g = Graph::<f32>::new(0);
    let gen = generator.bind(&mut g, false);
    let contexts: Vec<Vec<usize>> = questions.iter().map(|q| generator_context(q)).collect();
    let mut outs: Vec<Vec<usize>> = vec![Vec::new(); questions.len()];
    let mut done = vec![false; questions.len()];
    for _ in 0..max_len {
        let active: Vec<usize> = (0..questions.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let seqs: Vec<Vec<Slot>> = active
            .iter()
            .map(|&i| {
                let mut ids = contexts[i].clone();
                ids.extend_from_slice(&outs[i]);
                vec![Slot::Ids(ids)]
            })
            .collect();
        let logits = lm::next_token_logits(&mut g, &gen, &seqs)?;
        for (r, &i) in active.iter().enumerate() {
            let id = argmax(g.value(logits).row(r));
            if id == EOS {
                done[i] = true;
            } else {
                outs[i].push(id);
            }
        }
    }
    Ok(outs)
}
