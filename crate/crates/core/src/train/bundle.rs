use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Mode;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lm::{new_head, LmConfig, LmVars, ToyLm};
use crate::tensor::Tensor;

pub const GENERATOR: &str = "generator.";
pub const REFERENCE: &str = "reference.";
pub const CLASSIFIER: &str = "classifier.";
pub const HEAD: &str = "classifier_head.weight";
pub const SIMILARITY: &str = "similarity.embedding";

/// Every model taking part in one training mode.
///
/// | mode | generator | reference | classifier | head | similarity |
/// |---|---|---|---|---|---|
/// | sim_only, supgen | yes | yes | | | own table |
/// | joint | yes | yes | yes | yes | classifier's token table |
/// | e2e | | | yes | yes | |
/// | no_interaction | | | yes | | classifier's token table |
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub mode: Mode,
    pub generator: Option<ToyLm>,
    /// Frozen copy of the pretrained generator.
    pub reference: Option<ToyLm>,
    pub classifier: Option<ToyLm>,
    pub head: Option<Tensor>,
    pub similarity: Option<Tensor>,
}

/// Parameters placed on a graph for one forward pass.
pub(crate) struct Bound {
    pub gen: Option<LmVars>,
    pub reference: Option<LmVars>,
    pub cls: Option<LmVars>,
    pub head: Option<Var>,
    pub table: Option<Var>,
    /// Trainable leaves by checkpoint name.
    pub named: Vec<(String, Var)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// JOINT warm-up: generator plus similarity table only.
    Warmup,
    Full,
}

impl ModelBundle {
    /// Builds the models for `mode`, cloning `pretrained` for every LM.
    pub fn new(mode: Mode, pretrained: &ToyLm, d_sim: usize, seed: u64) -> Result<Self> {
        if d_sim == 0 {
            return Err(Error::Config("d_sim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6275_6e64_6c65);
        let cfg = pretrained.config();
        let sim_std = 1.0 / (d_sim as f64).sqrt();
        let b = match mode {
            Mode::SimOnly | Mode::Supgen => Self {
                mode,
                generator: Some(pretrained.clone()),
                reference: Some(pretrained.clone()),
                classifier: None,
                head: None,
                similarity: Some(Tensor::randn(vec![cfg.vocab, d_sim], sim_std, &mut rng)),
            },
            Mode::Joint => Self {
                mode,
                generator: Some(pretrained.clone()),
                reference: Some(pretrained.clone()),
                classifier: Some(pretrained.clone()),
                head: Some(new_head(cfg.d_model, &mut rng)),
                similarity: None,
            },
            Mode::E2e => Self {
                mode,
                generator: None,
                reference: None,
                classifier: Some(pretrained.clone()),
                head: Some(new_head(cfg.d_model, &mut rng)),
                similarity: None,
            },
            Mode::NoInteraction => Self {
                mode,
                generator: None,
                reference: None,
                classifier: Some(pretrained.clone()),
                head: None,
                similarity: None,
            },
        };
        Ok(b)
    }

    pub fn lm_config(&self) -> &LmConfig {
        self.generator
            .as_ref()
            .or(self.classifier.as_ref())
            .expect("every mode has a language model")
            .config()
    }

    /// All tensors under their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, lm) in self.lms() {
            if let Some(lm) = lm {
                out.extend(lm.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
            }
        }
        if let Some(h) = &self.head {
            out.push((HEAD.to_string(), h));
        }
        if let Some(s) = &self.similarity {
            out.push((SIMILARITY.to_string(), s));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (prefix, lm) in [
            (GENERATOR, self.generator.as_mut()),
            (REFERENCE, self.reference.as_mut()),
            (CLASSIFIER, self.classifier.as_mut()),
        ] {
            if let Some(lm) = lm {
                out.extend(
                    lm.named_tensors_mut()
                        .into_iter()
                        .map(|(n, t)| (format!("{prefix}{n}"), t)),
                );
            }
        }
        if let Some(h) = self.head.as_mut() {
            out.push((HEAD.to_string(), h));
        }
        if let Some(s) = self.similarity.as_mut() {
            out.push((SIMILARITY.to_string(), s));
        }
        out
    }

    /// Names of the tensors training may update (everything except the
    /// frozen reference).
    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| !n.starts_with(REFERENCE))
            .collect()
    }

    fn lms(&self) -> [(&'static str, Option<&ToyLm>); 3] {
        [
            (GENERATOR, self.generator.as_ref()),
            (REFERENCE, self.reference.as_ref()),
            (CLASSIFIER, self.classifier.as_ref()),
        ]
    }

    /// Rebuilds a bundle from named tensors; every expected tensor must be
    /// present with the right shape.
    pub fn from_named(mode: Mode, lm: LmConfig, d_sim: usize, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = ToyLm::new(lm, &mut rng)?;
        let mut b = Self::new(mode, &template, d_sim, 0)?;
        for (name, t) in b.named_tensors_mut() {
            let src = tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name:?}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(b)
    }

    /// Places the parameters on `g`. Only the parts used in `phase` are
    /// bound; the reference is bound (as constants) when `with_reference`.
    /// `freeze_embeddings` keeps the generator's token table constant.
    pub(crate) fn bind(
        &self,
        g: &mut Graph<f32>,
        phase: Phase,
        trainable: bool,
        with_reference: bool,
        freeze_embeddings: bool,
    ) -> Bound {
        let mut named = Vec::new();
        let bind_lm = |g: &mut Graph<f32>, lm: &ToyLm, prefix: &str, named: &mut Vec<(String, Var)>| {
            let vars = lm.bind(g, trainable);
            if trainable {
                for ((n, _), v) in lm.named_tensors().into_iter().zip(vars.vars()) {
                    named.push((format!("{prefix}{n}"), v));
                }
            }
            vars
        };
        let gen = self.generator.as_ref().map(|lm| {
            if trainable && freeze_embeddings {
                let emb = g.constant(lm.token_embeddings().clone());
                let vars = lm.bind_with(g, true, Some(emb));
                for ((n, _), v) in lm.named_tensors().into_iter().zip(vars.vars()).skip(1) {
                    named.push((format!("{GENERATOR}{n}"), v));
                }
                vars
            } else {
                bind_lm(g, lm, GENERATOR, &mut named)
            }
        });
        let reference = if with_reference {
            self.reference.as_ref().map(|lm| lm.bind(g, false))
        } else {
            None
        };
        let leaf = |g: &mut Graph<f32>, t: &Tensor, name: &str, named: &mut Vec<(String, Var)>| {
            let v = g.leaf(t.clone(), trainable);
            if trainable {
                named.push((name.to_string(), v));
            }
            v
        };
        let (cls, head, table) = match (self.mode, phase) {
            (Mode::Joint, Phase::Warmup) => {
                let cls = self.classifier.as_ref().expect("joint bundle has a classifier");
                let name = format!("{CLASSIFIER}tok_emb");
                let table = leaf(g, cls.token_embeddings(), &name, &mut named);
                (None, None, Some(table))
            }
            _ => {
                let cls = self.classifier.as_ref().map(|lm| bind_lm(g, lm, CLASSIFIER, &mut named));
                let head = self.head.as_ref().map(|h| leaf(g, h, HEAD, &mut named));
                let table = match (&self.similarity, &cls) {
                    (Some(s), _) => Some(leaf(g, s, SIMILARITY, &mut named)),
                    (None, Some(c)) if self.mode != Mode::E2e => Some(c.tok_emb),
                    _ => None,
                };
                (cls, head, table)
            }
        };
        Bound {
            gen,
            reference,
            cls,
            head,
            table,
            named,
        }
    }
}
