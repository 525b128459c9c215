use serde::{Deserialize, Serialize};

use super::batch::{run_batch, BatchSpec};
use super::bundle::{ModelBundle, Phase};
use super::config::{Mode, TrainConfig};
use crate::autodiff::Graph;
use crate::data::McqExample;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::qa::{self, Sampling};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub repetition_rate: f64,
    /// Mean per-step `KL(p_gen || p_ref)`; zero without a generator.
    pub mean_kld: f64,
    /// Per-example means of the objective terms.
    pub losses: LossBreakdown,
    pub count: usize,
}

/// One evaluated example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Empty for modes without a generator or when the hypothesis is zeroed.
    pub hypothesis: Vec<usize>,
    pub predicted: usize,
    pub gold: usize,
    pub probs: Vec<f32>,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.predicted == self.gold
    }
}

/// Fraction of examples whose highest score is the gold candidate.
pub fn accuracy_from_scores(scores: &[Vec<f32>], golds: &[usize]) -> Result<f64> {
    if scores.len() != golds.len() || scores.is_empty() {
        return Err(Error::contract("one gold index per score row, at least one row"));
    }
    let mut hits = 0;
    for (s, &g) in scores.iter().zip(golds) {
        if qa::predict(s)?.1 == g {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Tokens repeating an earlier token of the same hypothesis, over all
/// hypothesis tokens.
pub fn repetition_rate<H: AsRef<[usize]>>(hypotheses: &[H]) -> f64 {
    let mut repeats = 0usize;
    let mut total = 0usize;
    for h in hypotheses {
        let h = h.as_ref();
        total += h.len();
        repeats += h.iter().enumerate().filter(|(i, t)| h[..*i].contains(t)).count();
    }
    if total == 0 {
        0.0
    } else {
        repeats as f64 / total as f64
    }
}

pub(crate) fn predict_phase(
    bundle: &ModelBundle,
    data: &[McqExample],
    cfg: &TrainConfig,
    phase: Phase,
    zero_hypothesis: bool,
) -> Result<(Vec<Prediction>, Metrics)> {
    if data.is_empty() {
        return Err(Error::contract("evaluation needs at least one example"));
    }
    let mut preds = Vec::with_capacity(data.len());
    let mut losses = LossBreakdown::default();
    let mut kld_sum = 0.0;
    let mut kld_rows = 0;
    let spec = BatchSpec {
        phase,
        sampling: Sampling::Eval,
        zero_hypothesis,
        need_kld: bundle.reference.is_some() && !zero_hypothesis,
        need_rep: bundle.mode.has_hypothesis() && !zero_hypothesis,
    };
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&McqExample> = chunk.iter().collect();
        let mut g = Graph::<f32>::new(0);
        let out = run_batch(&mut g, bundle, cfg, &refs, spec)?;
        losses.add_scaled(&out.breakdown, chunk.len() as f32 / data.len() as f32);
        kld_sum += out.kld_sum;
        kld_rows += out.kld_rows;
        for (i, (ex, s)) in chunk.iter().zip(&out.scores).enumerate() {
            let (probs, predicted) = qa::predict(s)?;
            preds.push(Prediction {
                hypothesis: out.hypotheses.get(i).cloned().unwrap_or_default(),
                predicted,
                gold: ex.gold,
                probs,
            });
        }
    }
    losses.lambda_kld = cfg.lambda_kld;
    losses.lambda_rep = cfg.lambda_rep;
    let correct = preds.iter().filter(|p| p.correct()).count();
    let hyps: Vec<&[usize]> = preds.iter().map(|p| p.hypothesis.as_slice()).collect();
    let metrics = Metrics {
        accuracy: correct as f64 / preds.len() as f64,
        repetition_rate: repetition_rate(&hyps),
        mean_kld: if kld_rows == 0 { 0.0 } else { kld_sum / kld_rows as f64 },
        losses,
        count: preds.len(),
    };
    Ok((preds, metrics))
}

/// Noise-free evaluation with argmax decoding. Never modifies `bundle`.
pub fn evaluate(bundle: &ModelBundle, data: &[McqExample], cfg: &TrainConfig) -> Result<Metrics> {
    Ok(predict_phase(bundle, data, cfg, Phase::Full, false)?.1)
}

/// Per-example predictions alongside the metrics; `zero_hypothesis` feeds
/// zero embeddings in place of the hypothesis.
pub fn predict_dataset(
    bundle: &ModelBundle,
    data: &[McqExample],
    cfg: &TrainConfig,
    zero_hypothesis: bool,
) -> Result<(Vec<Prediction>, Metrics)> {
    if zero_hypothesis && !bundle.mode.has_hypothesis() {
        return Err(Error::contract(format!("mode {} has no hypothesis input", bundle.mode)));
    }
    predict_phase(bundle, data, cfg, Phase::Full, zero_hypothesis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub with: Metrics,
    pub without: Metrics,
    /// `(without - with) / with * 100`; `None` when `with` has zero accuracy.
    pub delta_pct: Option<f64>,
}

pub fn delta_pct(with: f64, without: f64) -> Option<f64> {
    (with != 0.0).then(|| (without - with) / with * 100.0)
}

/// Accuracy with the generated hypothesis and with the hypothesis slot
/// zeroed out.
pub fn ablate_zero_hypothesis(bundle: &ModelBundle, data: &[McqExample], cfg: &TrainConfig) -> Result<Ablation> {
    if !matches!(bundle.mode, Mode::SimOnly | Mode::Joint) {
        return Err(Error::contract(format!(
            "zero-hypothesis ablation needs a sim_only or joint model, got {}",
            bundle.mode
        )));
    }
    let with = evaluate(bundle, data, cfg)?;
    let without = predict_phase(bundle, data, cfg, Phase::Full, true)?.1;
    let delta_pct = delta_pct(with.accuracy, without.accuracy);
    Ok(Ablation {
        with,
        without,
        delta_pct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repetition_examples() {
        assert_eq!(repetition_rate(&[vec![4, 5, 6]]), 0.0);
        assert!((repetition_rate(&[vec![4, 4, 4]]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(repetition_rate(&[vec![1], vec![2], vec![1]]), 0.0);
        assert!((repetition_rate(&[vec![4, 5, 4], vec![7, 8, 9]]) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        let golds = [0, 2, 1];
        let oracle: Vec<Vec<f32>> = golds
            .iter()
            .map(|&g| (0..4).map(|i| if i == g { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(accuracy_from_scores(&oracle, &golds).unwrap(), 1.0);
        let adversarial: Vec<Vec<f32>> = oracle.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
        assert_eq!(accuracy_from_scores(&adversarial, &golds).unwrap(), 0.0);
    }

    #[test]
    fn delta_formula() {
        assert!((delta_pct(0.8, 0.6).unwrap() + 25.0).abs() < 1e-12);
        assert_eq!(delta_pct(0.0, 0.5), None);
    }
}
