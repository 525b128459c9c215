//! Flat `key = value` run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hypogen::lm::LmConfig;
use hypogen::train::{parse_key_values, PretrainConfig, TrainConfig};
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "HYPOGEN_SEED";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub dev_data: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Paths {
    fn slot(&mut self, key: &str) -> Option<&mut Option<PathBuf>> {
        match key {
            "train_data" => Some(&mut self.train_data),
            "dev_data" => Some(&mut self.dev_data),
            "corpus" => Some(&mut self.corpus),
            "pretrained" => Some(&mut self.pretrained),
            "checkpoint" => Some(&mut self.checkpoint),
            _ => None,
        }
    }

    fn pairs(&self) -> Vec<(&'static str, Option<&PathBuf>)> {
        vec![
            ("train_data", self.train_data.as_ref()),
            ("dev_data", self.dev_data.as_ref()),
            ("corpus", self.corpus.as_ref()),
            ("pretrained", self.pretrained.as_ref()),
            ("checkpoint", self.checkpoint.as_ref()),
        ]
    }
}

/// Everything a run can be configured with. Later sources win: defaults,
/// then the config file, then `HYPOGEN_SEED`, then command-line flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// `vocab` is filled in from the dataset.
    pub lm: LmConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            lm: LmConfig::with_vocab(0),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(slot) = self.paths.slot(key) {
            *slot = Some(PathBuf::from(value));
        } else if TrainConfig::KEYS.contains(&key) {
            self.train.set(key, value)?;
            if key == "seed" {
                self.pretrain.seed = self.train.seed;
            }
        } else if PretrainConfig::KEYS.contains(&key) {
            self.pretrain.set(key, value)?;
        } else if LmConfig::KEYS.contains(&key) {
            self.lm.set(key, value)?;
        } else {
            bail!(hypogen::Error::Config(format!("unknown config key {key:?}")));
        }
        Ok(())
    }

    /// Builds the effective config from an optional file, the seed
    /// environment variable and `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| hypogen::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            for (k, v) in parse_key_values(&text).with_context(|| format!("reading {}", path.display()))? {
                cfg.set(&k, &v).with_context(|| format!("in {}", path.display()))?;
            }
        }
        if let Some(seed) = seed_from_env()? {
            cfg.set("seed", &seed.to_string())?;
        }
        for o in overrides {
            let (k, v) = split_override(o)?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        match value {
            Some(p) => Ok(p.as_path()),
            None => bail!(hypogen::Error::Config(format!("missing required setting {key}"))),
        }
    }

    /// The effective configuration as a JSON object.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, v) in self.train.to_pairs() {
            m.insert(k.to_string(), typed(&v));
        }
        for (k, v) in self.pretrain.to_pairs() {
            m.insert(k.to_string(), typed(&v));
        }
        for (k, v) in self.lm.to_pairs() {
            m.insert(k.to_string(), typed(&v));
        }
        for (k, v) in self.paths.pairs() {
            let v = v.map_or(Value::Null, |p| Value::String(p.display().to_string()));
            m.insert(k.to_string(), v);
        }
        Value::Object(m)
    }
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            let seed = s.trim().parse().map_err(|_| {
                hypogen::Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))
            })?;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!(hypogen::Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

fn split_override(s: &str) -> Result<(&str, &str)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => bail!(hypogen::Error::Config(format!("expected key=value, got {s:?}"))),
    }
}

fn typed(v: &str) -> Value {
    if let Ok(b) = v.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = v.parse::<u64>() {
        return Value::from(i);
    }
    match v.parse::<f64>() {
        Ok(f) if f.is_finite() => Value::from(f),
        _ => Value::String(v.to_string()),
    }
}
