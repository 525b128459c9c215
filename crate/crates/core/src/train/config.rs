use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::qa::{Decoding, HypothesisConfig};

/// Which system is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SimOnly,
    Joint,
    E2e,
    NoInteraction,
    Supgen,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::SimOnly, Mode::Joint, Mode::E2e, Mode::NoInteraction, Mode::Supgen];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SimOnly => "sim_only",
            Mode::Joint => "joint",
            Mode::E2e => "e2e",
            Mode::NoInteraction => "no_interaction",
            Mode::Supgen => "supgen",
        }
    }

    /// Modes whose classifier reads a generated hypothesis.
    pub fn has_hypothesis(self) -> bool {
        matches!(self, Mode::SimOnly | Mode::Joint | Mode::Supgen)
    }

    pub fn has_generator(self) -> bool {
        self.has_hypothesis()
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// JOINT only: epochs trained with the similarity classifier alone.
    pub warmup_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Step-wise hypothesis length `|c|`.
    pub hyp_len: usize,
    /// Top-K decoding when non-zero; `hyp_len` must then equal `top_k`.
    pub top_k: usize,
    pub tau: f64,
    pub lambda_kld: f32,
    pub lambda_rep: f32,
    /// Width of the similarity table when it is not shared with a classifier.
    pub d_sim: usize,
    pub gumbel: bool,
    pub straight_through: bool,
    /// Keep the generator's token embeddings (and so its tied output
    /// projection) at their pretrained values.
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SimOnly,
            epochs: 30,
            warmup_epochs: 5,
            learning_rate: 3e-4,
            batch_size: 16,
            seed: 0,
            hyp_len: 1,
            top_k: 0,
            tau: 1.0,
            lambda_kld: 0.1,
            lambda_rep: 0.5,
            d_sim: 32,
            gumbel: true,
            straight_through: true,
            freeze_embeddings: true,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "mode",
        "epochs",
        "warmup_epochs",
        "learning_rate",
        "batch_size",
        "seed",
        "hyp_len",
        "top_k",
        "tau",
        "lambda_kld",
        "lambda_rep",
        "d_sim",
        "gumbel",
        "straight_through",
        "freeze_embeddings",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        if self.hyp_len == 0 {
            return bad("hyp_len must be at least 1".into());
        }
        if self.top_k > 0 && self.hyp_len != self.top_k {
            return bad(format!(
                "top_k = {} requires hyp_len = {} (got {})",
                self.top_k, self.top_k, self.hyp_len
            ));
        }
        if self.d_sim == 0 {
            return bad("d_sim must be positive".into());
        }
        if self.lambda_kld < 0.0 || self.lambda_rep < 0.0 {
            return bad("regularizer weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn decoding(&self) -> Decoding {
        if self.top_k > 0 {
            Decoding::TopK { k: self.top_k }
        } else {
            Decoding::Stepwise { len: self.hyp_len }
        }
    }

    pub fn hypothesis(&self) -> HypothesisConfig {
        HypothesisConfig {
            decoding: self.decoding(),
            tau: self.tau,
            gumbel: self.gumbel,
            straight_through: self.straight_through,
        }
    }

    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "hyp_len" => self.hyp_len = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "lambda_kld" => self.lambda_kld = parse(key, value)?,
            "lambda_rep" => self.lambda_rep = parse(key, value)?,
            "d_sim" => self.d_sim = parse(key, value)?,
            "gumbel" => self.gumbel = parse(key, value)?,
            "straight_through" => self.straight_through = parse(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("mode", self.mode.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("hyp_len", self.hyp_len.to_string()),
            ("top_k", self.top_k.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda_kld", self.lambda_kld.to_string()),
            ("lambda_rep", self.lambda_rep.to_string()),
            ("d_sim", self.d_sim.to_string()),
            ("gumbel", self.gumbel.to_string()),
            ("straight_through", self.straight_through.to_string()),
            ("freeze_embeddings", self.freeze_embeddings.to_string()),
        ]
    }
}

/// Language-model pretraining schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub const KEYS: [&'static str; 3] = ["pretrain_epochs", "pretrain_learning_rate", "pretrain_batch_size"];

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("pretraining needs a positive batch size and learning rate".into()));
        }
        Ok(())
    }

    /// Keys are prefixed with `pretrain_`; the seed is shared with training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "pretrain_epochs" => self.epochs = parse(key, value)?,
            "pretrain_learning_rate" => self.learning_rate = parse(key, value)?,
            "pretrain_batch_size" => self.batch_size = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("pretrain_epochs", self.epochs.to_string()),
            ("pretrain_learning_rate", self.learning_rate.to_string()),
            ("pretrain_batch_size", self.batch_size.to_string()),
        ]
    }
}

impl LmConfig {
    /// Architecture keys settable from a config file (the vocabulary size
    /// always comes from the data).
    pub const KEYS: [&'static str; 4] = ["d_model", "n_layers", "n_heads", "max_len"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_model" => self.d_model = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("max_len", self.max_len.to_string()),
        ]
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn format_key_values<K: AsRef<str>>(pairs: &[(K, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{} = {v}\n", k.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = TrainConfig {
            mode: Mode::Joint,
            top_k: 3,
            hyp_len: 3,
            learning_rate: 1.5e-3,
            gumbel: false,
            ..Default::default()
        };
        cfg.seed = 42;
        let text = format_key_values(&cfg.to_pairs());
        let mut back = TrainConfig::default();
        for (k, v) in parse_key_values(&text).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        let mut cfg = TrainConfig::default();
        assert!(matches!(cfg.set("epoch", "3"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("epochs", "three"), Err(Error::Config(_))));
        assert!(parse_key_values("a = 1\na = 2").is_err());
        assert!(parse_key_values("no equals sign").is_err());
        cfg.warmup_epochs = cfg.epochs + 1;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            top_k: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn comments_and_modes() {
        let kv = parse_key_values("# run\nmode = no-interaction # baseline\n\n").unwrap();
        assert_eq!(kv, vec![("mode".to_string(), "no-interaction".to_string())]);
        assert_eq!("NO_INTERACTION".parse::<Mode>().unwrap(), Mode::NoInteraction);
        assert!("bogus".parse::<Mode>().is_err());
    }
}
