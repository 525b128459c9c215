use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::batch::{run_batch, BatchSpec};
use super::bundle::{ModelBundle, Phase, REFERENCE};
use super::config::{Mode, PretrainConfig, TrainConfig};
use super::eval::{predict_phase, Metrics};
use crate::autodiff::Graph;
use crate::data::McqExample;
use crate::error::{Error, Result};
use crate::lm::{self, ToyLm};
use crate::losses::LossBreakdown;
use crate::qa::Sampling;
use crate::tensor::Tensor;

const SHUFFLE_TAG: u64 = 0x5348_5546;
const STEP_TAG: u64 = 0x5354_4550;

/// Seed for the `index`-th use of a stream derived from `seed`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.rotate_left(32) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_TAG, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: String,
    pub steps: u64,
    /// Means over the epoch's training batches.
    pub train: LossBreakdown,
    pub dev: Option<Metrics>,
}

/// Training state: models, optimizer moments and progress counters.
///
/// All randomness is derived from `(config.seed, epoch)` for shuffling and
/// `(config.seed, step)` for Gumbel noise, so restoring these fields resumes
/// training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub bundle: ModelBundle,
    pub config: TrainConfig,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(bundle: ModelBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if bundle.mode != config.mode {
            return Err(Error::Config(format!(
                "config mode {} does not match model mode {}",
                config.mode, bundle.mode
            )));
        }
        if matches!(config.mode, Mode::E2e | Mode::NoInteraction) && !(config.gumbel && config.straight_through) {
            return Err(Error::Config(format!(
                "gumbel/straight_through switches do not apply to {}",
                config.mode
            )));
        }
        let max_len = bundle.lm_config().max_len;
        if config.mode.has_hypothesis() && config.hyp_len + 4 > max_len {
            return Err(Error::Config(format!(
                "hyp_len {} leaves no room for the question within max_len {max_len}",
                config.hyp_len
            )));
        }
        let params = bundle.named_tensors();
        let shapes: Vec<&[usize]> = params
            .iter()
            .filter(|(n, _)| !n.starts_with(REFERENCE))
            .map(|(_, t)| t.shape())
            .collect();
        let adam = AdamState::new(&shapes);
        Ok(Self {
            bundle,
            config,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn phase_for_epoch(&self, epoch: usize) -> Phase {
        if self.config.mode == Mode::Joint && epoch < self.config.warmup_epochs {
            Phase::Warmup
        } else {
            Phase::Full
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs one epoch over `data` and returns the mean training losses.
    pub fn train_epoch(&mut self, data: &[McqExample]) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(Error::contract("training needs at least one example"));
        }
        let phase = self.phase_for_epoch(self.epoch);
        let spec = BatchSpec {
            phase,
            sampling: Sampling::Train,
            zero_hypothesis: false,
            need_kld: self.config.lambda_kld > 0.0,
            need_rep: self.config.lambda_rep > 0.0,
        };
        let order = epoch_order(data.len(), self.config.seed, self.epoch);
        let mut mean = LossBreakdown::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&McqExample> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::<f32>::new(derive_seed(self.config.seed, STEP_TAG, self.step));
            let out = run_batch(&mut g, &self.bundle, &self.config, &batch, spec)?;
            if !g.item(out.total).is_finite() || !out.breakdown.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss at epoch {} step {}",
                    self.epoch + 1,
                    self.step
                )));
            }
            g.backward(out.total)?;
            let grads: Vec<(String, Tensor)> = out
                .trainable
                .iter()
                .map(|(n, v)| (n.clone(), g.grad_tensor(*v)))
                .collect();
            drop(g);
            self.apply(&grads)?;
            self.step += 1;
            mean.add_scaled(&out.breakdown, chunk.len() as f32 / data.len() as f32);
        }
        mean.lambda_kld = self.config.lambda_kld;
        mean.lambda_rep = self.config.lambda_rep;
        self.epoch += 1;
        Ok(mean)
    }

    fn apply(&mut self, grads: &[(String, Tensor)]) -> Result<()> {
        if let Some((n, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numeric(format!("gradient of {n}")));
        }
        let mut params: Vec<(String, &mut Tensor)> = self
            .bundle
            .named_tensors_mut()
            .into_iter()
            .filter(|(n, _)| !n.starts_with(REFERENCE))
            .collect();
        let slots: Vec<Option<&Tensor>> = params
            .iter()
            .map(|(n, _)| grads.iter().find(|(gn, _)| gn == n).map(|(_, t)| t))
            .collect();
        let mut tensors: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
        adam_step(&mut tensors, &slots, &mut self.adam, self.config.learning_rate)
    }

    /// Trains until `config.epochs` epochs are complete, evaluating on
    /// `dev` after every epoch. `on_epoch` sees each record as it is made
    /// and may stop training by returning an error.
    pub fn fit(
        &mut self,
        train: &[McqExample],
        dev: Option<&[McqExample]>,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut history = Vec::new();
        while !self.is_done() {
            let phase = self.phase_for_epoch(self.epoch);
            let losses = self.train_epoch(train)?;
            let dev_metrics = match dev {
                Some(d) => Some(predict_phase(&self.bundle, d, &self.config, phase, false)?.1),
                None => None,
            };
            let rec = EpochRecord {
                epoch: self.epoch,
                phase: match phase {
                    Phase::Warmup => "warmup".into(),
                    Phase::Full => "full".into(),
                },
                steps: self.step,
                train: losses,
                dev: dev_metrics,
            };
            on_epoch(self, &rec)?;
            history.push(rec);
        }
        Ok(history)
    }
}

/// Trains a fresh bundle for `config.mode` from `pretrained`.
pub fn train(
    pretrained: &ToyLm,
    train: &[McqExample],
    dev: Option<&[McqExample]>,
    config: &TrainConfig,
) -> Result<(ModelBundle, Vec<EpochRecord>)> {
    let bundle = ModelBundle::new(config.mode, pretrained, config.d_sim, config.seed)?;
    let mut t = Trainer::new(bundle, config.clone())?;
    let history = t.fit(train, dev, |_, _| Ok(()))?;
    Ok((t.bundle, history))
}

/// Next-token pretraining. Returns the mean loss of every epoch.
pub fn pretrain(
    lm: &mut ToyLm,
    corpus: &[Vec<usize>],
    cfg: &PretrainConfig,
    mut on_epoch: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("pretraining corpus is empty"));
    }
    let shapes: Vec<Vec<usize>> = lm.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = AdamState::new(&shape_refs);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut g = Graph::<f32>::new(0);
            let vars = lm.bind(&mut g, true);
            let loss = lm::lm_nll(&mut g, &vars, &batch)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss at epoch {}", epoch + 1)));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor> = vars.vars().iter().map(|&v| g.grad_tensor(v)).collect();
            let slots: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
            let mut params: Vec<&mut Tensor> = lm.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            adam_step(&mut params, &slots, &mut adam, cfg.learning_rate)?;
            total += value as f64 * chunk.len() as f64;
        }
        let mean = (total / corpus.len() as f64) as f32;
        on_epoch(epoch + 1, mean);
        history.push(mean);
    }
    Ok(history)
}
