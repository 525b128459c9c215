//! The forward pass shared by training and evaluation.

use super::bundle::{Bound, ModelBundle, Phase};
use super::config::{Mode, TrainConfig};
use crate::autodiff::{Graph, Var};
use crate::data::McqExample;
use crate::error::Result;
use crate::lm::{self, LmVars, Slot};
use crate::losses::{self, LossBreakdown};
use crate::qa::{self, generator_context, HypothesisInput, Sampling};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct BatchSpec {
    pub phase: Phase,
    pub sampling: Sampling,
    pub zero_hypothesis: bool,
    pub need_kld: bool,
    pub need_rep: bool,
}

pub(crate) struct BatchOut {
    /// Scalar loss to minimize, averaged over the batch.
    pub total: Var,
    /// Batch means.
    pub breakdown: LossBreakdown,
    /// Per-example prediction scores.
    pub scores: Vec<Vec<f32>>,
    pub hypotheses: Vec<Vec<usize>>,
    pub kld_sum: f64,
    pub kld_rows: usize,
    pub trainable: Vec<(String, Var)>,
}

/// `log_softmax` of each score row and the summed gold log-likelihood.
fn log_likelihood(g: &mut Graph<f32>, scores: &[Var], golds: &[usize]) -> Result<(Vec<Var>, Var)> {
    let mut lps = Vec::with_capacity(scores.len());
    let mut picked = Vec::with_capacity(scores.len());
    for (&s, &gold) in scores.iter().zip(golds) {
        let lp = g.log_softmax_last(s)?;
        picked.push(losses::qa_objective(g, lp, gold)?);
        lps.push(lp);
    }
    let all = g.concat_rows(&picked)?;
    let sum = g.sum(all);
    Ok((lps, sum))
}

fn rows_of(g: &Graph<f32>, vars: &[Var]) -> Vec<Vec<f32>> {
    vars.iter().map(|&v| g.value(v).data().to_vec()).collect()
}

/// Next-token distributions of the frozen reference, as constants.
fn reference_probs(g: &mut Graph<f32>, reference: &LmVars, contexts: &[Vec<usize>]) -> Result<Tensor> {
    let seqs: Vec<Vec<Slot>> = contexts.iter().map(|c| vec![Slot::Ids(c.clone())]).collect();
    let z = lm::next_token_logits(g, reference, &seqs)?;
    let p = g.softmax_last(z)?;
    Ok(g.value(p).clone())
}

/// KL terms for the decoded prefixes `ids` (step `i` conditions on the
/// first `i` tokens). Returns the summed KL and the number of rows.
fn kld_along(
    g: &mut Graph<f32>,
    gen: &LmVars,
    reference: &LmVars,
    questions: &[&[usize]],
    ids: &[Vec<usize>],
) -> Result<(Option<Var>, usize)> {
    let longest = ids.iter().map(Vec::len).max().unwrap_or(0);
    let mut total: Option<Var> = None;
    let mut rows = 0;
    for i in 0..longest {
        let contexts: Vec<Vec<usize>> = questions
            .iter()
            .zip(ids)
            .filter(|(_, h)| h.len() > i)
            .map(|(q, h)| {
                let mut c = generator_context(q);
                c.extend_from_slice(&h[..i]);
                c
            })
            .collect();
        let seqs: Vec<Vec<Slot>> = contexts.iter().map(|c| vec![Slot::Ids(c.clone())]).collect();
        let z = lm::next_token_logits(g, gen, &seqs)?;
        let lp = g.log_softmax_last(z)?;
        let rp = reference_probs(g, reference, &contexts)?;
        let k = losses::kld_step(g, lp, &rp)?;
        total = Some(match total {
            Some(t) => g.add(t, k)?,
            None => k,
        });
        rows += contexts.len();
    }
    Ok((total, rows))
}

pub(crate) fn run_batch(
    g: &mut Graph<f32>,
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    examples: &[&McqExample],
    spec: BatchSpec,
) -> Result<BatchOut> {
    let train = spec.sampling == Sampling::Train;
    let with_ref = spec.need_kld && bundle.reference.is_some();
    let Bound {
        gen,
        reference,
        cls,
        head,
        table,
        named,
    } = bundle.bind(g, spec.phase, train, with_ref, cfg.freeze_embeddings);
    let n = examples.len();
    let inv_n = 1.0 / n as f32;
    let questions: Vec<&[usize]> = examples.iter().map(|e| e.question.as_slice()).collect();
    let cands: Vec<&[Vec<usize>]> = examples.iter().map(|e| e.candidates.as_slice()).collect();
    let golds: Vec<usize> = examples.iter().map(|e| e.gold).collect();
    let hyp_len = cfg.decoding().hypothesis_len();

    let mut br = LossBreakdown {
        lambda_kld: cfg.lambda_kld,
        lambda_rep: cfg.lambda_rep,
        ..Default::default()
    };
    let mut terms: Vec<(Var, f32)> = Vec::new();
    let mut hypotheses = Vec::new();
    let mut kld_sum = 0.0;
    let mut kld_rows = 0;
    let scores;

    match bundle.mode {
        Mode::SimOnly | Mode::Joint => {
            let gen = gen.as_ref().expect("generator bound");
            let table = table.expect("similarity table bound");
            let mut steps = Vec::new();
            let inputs: Vec<HypothesisInput> = if spec.zero_hypothesis {
                vec![HypothesisInput::Zeroed(hyp_len); n]
            } else {
                let hb = qa::generate_batch(g, gen, &questions, &cfg.hypothesis(), spec.sampling)?;
                hypotheses = hb.ids;
                steps = hb.steps;
                hb.rows.into_iter().map(HypothesisInput::Rows).collect()
            };
            let sim = qa::similarity_scores_batch(g, table, &inputs, &cands)?;
            let (lp_sim, qa_sim) = log_likelihood(g, &sim, &golds)?;
            br.qa_sim = g.item(qa_sim) * inv_n;
            terms.push((qa_sim, -inv_n));
            let mut combined = rows_of(g, &lp_sim);
            if bundle.mode == Mode::Joint && spec.phase == Phase::Full {
                let cls = cls.as_ref().expect("classifier bound");
                let head = head.expect("head bound");
                let lm_scores = qa::lm_classifier_scores_batch(g, cls, head, examples, &inputs)?;
                let (lp_lm, qa_lm) = log_likelihood(g, &lm_scores, &golds)?;
                br.qa_lm = g.item(qa_lm) * inv_n;
                terms.push((qa_lm, -inv_n));
                for (row, lp) in combined.iter_mut().zip(rows_of(g, &lp_lm)) {
                    for (a, b) in row.iter_mut().zip(lp) {
                        *a += b;
                    }
                }
            }
            scores = combined;
            if let Some(reference) = &reference {
                let mut total: Option<Var> = None;
                for step in &steps {
                    let rp = reference_probs(g, reference, &step.contexts)?;
                    let k = losses::kld_step(g, step.log_probs, &rp)?;
                    kld_rows += step.contexts.len();
                    total = Some(match total {
                        Some(t) => g.add(t, k)?,
                        None => k,
                    });
                }
                if let Some(k) = total {
                    kld_sum = g.item(k) as f64;
                    br.kld = g.item(k) * inv_n;
                    if cfg.lambda_kld > 0.0 {
                        terms.push((k, cfg.lambda_kld * inv_n));
                    }
                }
            }
            if spec.need_rep {
                let mut total: Option<Var> = None;
                for step in &steps {
                    let r = losses::repetition_penalty(g, step.log_probs, &step.prefixes)?;
                    total = Some(match total {
                        Some(t) => g.add(t, r)?,
                        None => r,
                    });
                }
                if let Some(r) = total {
                    br.repetition = g.item(r) * inv_n;
                    if cfg.lambda_rep > 0.0 {
                        terms.push((r, -cfg.lambda_rep * inv_n));
                    }
                }
            }
        }
        Mode::Supgen => {
            let gen_lm = bundle.generator.as_ref().expect("supgen bundle has a generator");
            let gen = gen.as_ref().expect("generator bound");
            let table = table.expect("similarity table bound");
            let targets: Vec<Vec<usize>> = examples
                .iter()
                .map(|e| losses::supgen_target(&e.candidates[e.gold], hyp_len))
                .collect();
            let s = losses::supgen_loss(g, gen, &questions, &targets)?;
            br.supgen = g.item(s);
            terms.push((s, 1.0));

            if !spec.zero_hypothesis {
                hypotheses = qa::supgen_decode_batch(gen_lm, &questions, hyp_len)?;
            }
            let vocab = gen.vocab();
            let inputs: Vec<HypothesisInput> = (0..n)
                .map(|i| match hypotheses.get(i) {
                    Some(h) if !h.is_empty() => HypothesisInput::Rows(g.constant(Tensor::one_hot(h, vocab))),
                    _ => HypothesisInput::Zeroed(hyp_len),
                })
                .collect();
            let sim = qa::similarity_scores_batch(g, table, &inputs, &cands)?;
            let (lp_sim, qa_sim) = log_likelihood(g, &sim, &golds)?;
            br.qa_sim = g.item(qa_sim) * inv_n;
            terms.push((qa_sim, -inv_n));
            scores = rows_of(g, &lp_sim);
            if let Some(reference) = &reference {
                let (k, rows) = kld_along(g, gen, reference, &questions, &hypotheses)?;
                if let Some(k) = k {
                    kld_sum = g.item(k) as f64;
                    kld_rows = rows;
                    br.kld = g.item(k) * inv_n;
                }
            }
        }
        Mode::E2e => {
            let cls = cls.as_ref().expect("classifier bound");
            let head = head.expect("head bound");
            let s = qa::e2e_scores_batch(g, cls, head, examples)?;
            let (lp, qa_lm) = log_likelihood(g, &s, &golds)?;
            br.qa_lm = g.item(qa_lm) * inv_n;
            terms.push((qa_lm, -inv_n));
            scores = rows_of(g, &lp);
        }
        Mode::NoInteraction => {
            let cls = cls.as_ref().expect("encoder bound");
            let table = table.expect("encoder table bound");
            let s = qa::no_interaction_scores_batch(g, cls, table, examples)?;
            let (lp, qa_sim) = log_likelihood(g, &s, &golds)?;
            br.qa_sim = g.item(qa_sim) * inv_n;
            terms.push((qa_sim, -inv_n));
            scores = rows_of(g, &lp);
        }
    }

    br.compute_total();
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let t = g.scale(v, w);
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    let total = total.expect("every mode has a likelihood term");
    Ok(BatchOut {
        total,
        breakdown: br,
        scores,
        hypotheses,
        kld_sum,
        kld_rows,
        trainable: named,
    })
}
