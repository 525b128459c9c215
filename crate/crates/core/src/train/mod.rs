//! Optimization, training schedules, evaluation and checkpoints.

mod adam;
mod batch;
mod bundle;
pub mod checkpoint;
mod config;
mod eval;
mod trainer;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use bundle::{ModelBundle, Phase, CLASSIFIER, GENERATOR, HEAD, REFERENCE, SIMILARITY};
pub use checkpoint::{load_checkpoint, load_lm, save_checkpoint, save_lm, Checkpoint};
pub use config::{format_key_values, parse_key_values, Mode, PretrainConfig, TrainConfig};
pub use eval::{
    ablate_zero_hypothesis, accuracy_from_scores, delta_pct, evaluate, predict_dataset, repetition_rate, Ablation,
    Metrics, Prediction,
};
pub use trainer::{derive_seed, pretrain, train, EpochRecord, Trainer};
