//! Training objectives.
//!
//! Objectives that are *maximized* (`qa_objective`, `joint_objective`, the
//! repetition reward) return log-likelihood-like quantities; the trainer
//! minimizes
//!
//! ```text
//! total = -qa_sim - qa_lm + lambda_kld * kld - lambda_rep * repetition
//! ```
//!
//! where `repetition = sum log(1 - p(w))` over already-emitted tokens `w` is
//! never positive, so the last term penalizes mass on repeats.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::EOS;
use crate::error::{Error, Result};
use crate::lm::{self, LmVars, Slot};
use crate::qa::generator_context;
use crate::tensor::{Scalar, Tensor};

const P_FLOOR: f64 = 1e-9;


/// Per-component values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `log p_sim(a*)`, maximized. Baselines scoring by similarity report
    /// their log-likelihood here too.
    pub qa_sim: f32,
    /// `log p_lm(a*)`, maximized (also the end-to-end baseline).
    pub qa_lm: f32,
    /// Summed per-step `KL(p_gen || p_ref)`.
    pub kld: f32,
    /// Repetition reward `sum log(1 - p(w))`, never positive.
    pub repetition: f32,
    /// Teacher-forced negative log-likelihood of the supervised generator.
    pub supgen: f32,
    pub total: f32,
    pub lambda_kld: f32,
    pub lambda_rep: f32,
}

impl LossBreakdown {
    pub fn compute_total(&mut self) {
        self.total = -self.qa_sim - self.qa_lm + self.lambda_kld * self.kld - self.lambda_rep * self.repetition
            + self.supgen;
    }

    pub fn is_finite(&self) -> bool {
        [self.qa_sim, self.qa_lm, self.kld, self.repetition, self.supgen, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Running mean helper: adds `other` scaled by `w`.
    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f32) {
        self.qa_sim += other.qa_sim * w;
        self.qa_lm += other.qa_lm * w;
        self.kld += other.kld * w;
        self.repetition += other.repetition * w;
        self.supgen += other.supgen * w;
        self.total += other.total * w;
    }
}

/// `log p_QA(a* | q, c)` given the classifier's log-distribution `[1 x n]`.
pub fn qa_objective<T: Scalar>(g: &mut Graph<T>, log_probs: Var, gold: usize) -> Result<Var> {
    let n = g.value(log_probs).len();
    if gold >= n {
        return Err(Error::contract(format!("gold index {gold} out of range for {n} candidates")));
    }
    let picked = g.gather_elems(log_probs, &[gold])?;
    Ok(g.sum(picked))
}

/// `log p_sim(a*) + log p_lm(a*)`.
pub fn joint_objective<T: Scalar>(g: &mut Graph<T>, log_sim: Var, log_lm: Var, gold: usize) -> Result<Var> {
    if g.value(log_sim).len() != g.value(log_lm).len() {
        return Err(Error::Dimension {
            op: "joint_objective",
            lhs: g.shape(log_sim).to_vec(),
            rhs: g.shape(log_lm).to_vec(),
        });
    }
    let a = qa_objective(g, log_sim, gold)?;
    let b = qa_objective(g, log_lm, gold)?;
    g.add(a, b)
}

/// Summed over rows: `sum_v p_gen(v) (log p_gen(v) - log p_ref(v))`.
///
/// `gen_log_probs` is `[B x V]`; `ref_probs` holds the frozen reference
/// distributions (clamped below at 1e-9), so only the generator receives a
/// gradient.
pub fn kld_step<T: Scalar>(g: &mut Graph<T>, gen_log_probs: Var, ref_probs: &Tensor<T>) -> Result<Var> {
    if ref_probs.shape() != g.shape(gen_log_probs) {
        return Err(Error::Dimension {
            op: "kld_step",
            lhs: g.shape(gen_log_probs).to_vec(),
            rhs: ref_probs.shape().to_vec(),
        });
    }
    let floor = T::from_f64(P_FLOOR);
    let log_ref: Vec<T> = ref_probs.data().iter().map(|&p| p.max(floor).ln()).collect();
    let log_ref = g.constant(Tensor::new(ref_probs.shape().to_vec(), log_ref)?);
    let p = g.exp(gen_log_probs);
    let diff = g.sub(gen_log_probs, log_ref)?;
    let terms = g.mul(p, diff)?;
    Ok(g.sum(terms))
}

/// Unlikelihood reward for one decoding step over a batch:
/// `sum_b sum_{w in prefix_b} log(1 - p_b(w))`, each distinct prefix token
/// counted once. Empty prefixes contribute zero.
///
/// `log(1 - p(w))` is evaluated as `log sum_{v != w} p(v)` from the
/// log-probabilities, so it stays finite and keeps its gradient even when
/// `p(w)` rounds to one (where `1 - 1e-9` is already one in `f32`).
pub fn repetition_penalty<T: Scalar>(g: &mut Graph<T>, log_probs: Var, prefixes: &[Vec<usize>]) -> Result<Var> {
    let lp = g.value(log_probs);
    let v = lp.cols();
    if lp.rows() != prefixes.len() {
        return Err(Error::Dimension {
            op: "repetition_penalty",
            lhs: g.shape(log_probs).to_vec(),
            rhs: vec![prefixes.len()],
        });
    }
    let mut rows = Vec::new();
    let mut seen_tokens = Vec::new();
    for (b, prefix) in prefixes.iter().enumerate() {
        let seen: BTreeSet<usize> = prefix.iter().copied().collect();
        for w in seen {
            if w >= v {
                return Err(Error::Index {
                    what: "token",
                    index: w,
                    len: v,
                });
            }
            rows.push(b);
            seen_tokens.push(w);
        }
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    if v < 2 {
        return Err(Error::contract("repetition penalty needs at least two tokens"));
    }
    // Pivot for the log-sum-exp: the most likely token other than w.
    let pivots: Vec<usize> = rows
        .iter()
        .zip(&seen_tokens)
        .enumerate()
        .map(|(r, (&b, &w))| {
            let row = lp.row(b);
            let best = (0..v)
                .filter(|&u| u != w)
                .max_by(|&x, &y| row[x].partial_cmp(&row[y]).unwrap_or(std::cmp::Ordering::Equal))
                .expect("at least two tokens");
            r * v + best
        })
        .collect();
    let mut mask = Tensor::zeros(vec![rows.len(), v]);
    for (r, &w) in seen_tokens.iter().enumerate() {
        mask.data_mut()[r * v + w] = T::from_f64(MASKED);
    }
    let picked = g.select_rows(log_probs, &rows)?;
    let mask = g.constant(mask);
    let masked = g.add(picked, mask)?;
    let ls = g.log_softmax_last(masked)?;
    let top = g.gather_elems(masked, &pivots)?;
    let top_ls = g.gather_elems(ls, &pivots)?;
    let lse = g.sub(top, top_ls)?;
    Ok(g.sum(lse))
}

/// Additive mask that removes a token from a log-sum-exp.
const MASKED: f64 = -1e4;

/// Supervised target for the generator: the answer tokens followed by
/// `<eos>`, cut to at most `max_len` tokens.
pub fn supgen_target(answer: &[usize], max_len: usize) -> Vec<usize> {
    let mut t: Vec<usize> = answer.iter().copied().chain([EOS]).collect();
    t.truncate(max_len.max(1));
    t
}

/// Teacher-forced `-sum_i log p_gen(t_i | <bos> q <sep> t_<i)`, averaged
/// over the batch.
pub fn supgen_loss<T: Scalar>(
    g: &mut Graph<T>,
    gen: &LmVars,
    questions: &[&[usize]],
    targets: &[Vec<usize>],
) -> Result<Var> {
    if questions.len() != targets.len() || questions.is_empty() {
        return Err(Error::contract("one non-empty target per question"));
    }
    let mut seqs = Vec::with_capacity(questions.len());
    let mut picks = Vec::new();
    let mut row = 0;
    for (q, t) in questions.iter().zip(targets) {
        if t.is_empty() {
            return Err(Error::contract("empty supervised target"));
        }
        let mut ids = generator_context(q);
        let first = ids.len() - 1;
        ids.extend_from_slice(&t[..t.len() - 1]);
        if ids.len() > gen.max_len() {
            return Err(Error::Length {
                len: ids.len(),
                max: gen.max_len(),
            });
        }
        for (i, &tok) in t.iter().enumerate() {
            picks.push((row + first + i) * gen.vocab() + tok);
        }
        row += ids.len();
        seqs.push(vec![Slot::Ids(ids)]);
    }
    let (h, _) = lm::forward_hidden(g, gen, &seqs)?;
    let z = lm::logits(g, gen, h)?;
    let lp = g.log_softmax_last(z)?;
    let picked = g.gather_elems(lp, &picks)?;
    let s = g.sum(picked);
    Ok(g.scale(s, T::from_f64(-1.0 / questions.len() as f64)))
}
