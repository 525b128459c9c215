//! Weakly supervised hypothesis generation for multi-choice question
//! answering.
//!
//! A small causal language model (the *generator*) reads a question and emits
//! a short sequence of discrete tokens, the *hypothesis*. A classifier must
//! pick the answer from the hypothesis alone (similarity classifier) or from
//! the question plus hypothesis (LM-based classifier). The only training
//! signal is whether the right answer was chosen; gradients reach the
//! generator through the straight-through Gumbel-softmax estimator.
//!
//! The crate is self-contained: [`autodiff`] provides the reverse-mode engine,
//! [`lm`] the transformer, [`estimator`] the discrete gradient estimators,
//! [`qa`] the classifiers and baselines, [`losses`] the objectives, [`data`]
//! the synthetic hypernym benchmark and [`train`] the optimizer, training
//! schedules, evaluation and checkpoints.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod estimator;
pub mod lm;
pub mod losses;
pub mod qa;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
