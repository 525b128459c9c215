//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HGCK" | version: u32 | count: u32
//! count x ( name_len: u32 | name: utf-8 | rank: u32 | dims: rank x u64 | data: f32 x prod(dims) )
//! ```
//!
//! Non-tensor state (configs, counters) is stored as key = value text in a
//! `meta.text` tensor holding one byte per element.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::AdamState;
use super::bundle::{ModelBundle, REFERENCE};
use super::config::{format_key_values, parse_key_values, Mode, TrainConfig};
use super::trainer::Trainer;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, ToyLm};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HGCK";
pub const VERSION: u32 = 1;
const META: &str = "meta.text";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {name:?}")));
            }
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(t.shape().len())?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?;
                n = n.checked_mul(d).ok_or_else(|| Error::Format("dimension overflow".into()))?;
                shape.push(d);
            }
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn set_meta(&mut self, pairs: &[(String, String)]) {
        let text = format_key_values(pairs);
        let data = text.bytes().map(f32::from).collect::<Vec<_>>();
        self.push(META, Tensor::vector(data));
    }

    fn meta(&self) -> Result<BTreeMap<String, String>> {
        let t = self.get(META).ok_or_else(|| Error::Format("missing meta.text".into()))?;
        let bytes = t
            .data()
            .iter()
            .map(|&x| {
                if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                    Ok(x as u8)
                } else {
                    Err(Error::Format("meta.text holds a non-byte value".into()))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format("meta.text is not utf-8".into()))?;
        let pairs = parse_key_values(&text).map_err(|e| Error::Format(e.to_string()))?;
        Ok(pairs.into_iter().collect())
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn lm_pairs(cfg: &LmConfig) -> Vec<(String, String)> {
    let mut out = vec![("vocab".to_string(), cfg.vocab.to_string())];
    out.extend(cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
    out
}

fn lm_from_meta(meta: &BTreeMap<String, String>) -> Result<LmConfig> {
    let vocab = field(meta, "vocab")?
        .parse()
        .map_err(|_| Error::Format("bad vocab size".into()))?;
    let mut cfg = LmConfig::with_vocab(vocab);
    for k in LmConfig::KEYS {
        cfg.set(k, field(meta, k)?).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(cfg)
}

fn field<'m>(meta: &'m BTreeMap<String, String>, key: &str) -> Result<&'m str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("meta.text lacks {key:?}")))
}

fn expect_kind(meta: &BTreeMap<String, String>, kind: &str) -> Result<()> {
    let found = field(meta, "kind")?;
    if found != kind {
        return Err(Error::Format(format!("expected a {kind} checkpoint, found {found}")));
    }
    Ok(())
}

/// Copies `src[prefix + name]` into every named target.
fn fill(targets: Vec<(String, &mut Tensor)>, src: &Checkpoint, prefix: &str) -> Result<()> {
    for (name, t) in targets {
        let full = format!("{prefix}{name}");
        let s = src
            .get(&full)
            .ok_or_else(|| Error::Format(format!("missing tensor {full:?}")))?;
        if s.shape() != t.shape() {
            return Err(Error::Format(format!(
                "tensor {full:?} has shape {:?}, expected {:?}",
                s.shape(),
                t.shape()
            )));
        }
        *t = s.clone();
    }
    Ok(())
}

pub fn lm_checkpoint(lm: &ToyLm) -> Checkpoint {
    let mut c = Checkpoint::default();
    let mut meta = vec![("kind".to_string(), "lm".to_string())];
    meta.extend(lm_pairs(lm.config()));
    c.set_meta(&meta);
    for (n, t) in lm.named_tensors() {
        c.push(format!("lm.{n}"), t.clone());
    }
    c
}

pub fn lm_from_checkpoint(c: &Checkpoint) -> Result<ToyLm> {
    let meta = c.meta()?;
    expect_kind(&meta, "lm")?;
    let cfg = lm_from_meta(&meta)?;
    let mut lm = ToyLm::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill(lm.named_tensors_mut(), c, "lm.")?;
    Ok(lm)
}

pub fn save_lm(lm: &ToyLm, path: impl AsRef<Path>) -> Result<()> {
    lm_checkpoint(lm).write(path)
}

pub fn load_lm(path: impl AsRef<Path>) -> Result<ToyLm> {
    lm_from_checkpoint(&Checkpoint::read(path)?)
}

impl Trainer {
    /// Models, optimizer moments, config and progress counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        let mut meta = vec![("kind".to_string(), "bundle".to_string())];
        meta.extend(lm_pairs(self.bundle.lm_config()));
        meta.extend(self.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        meta.push(("completed_epochs".into(), self.epoch.to_string()));
        meta.push(("completed_steps".into(), self.step.to_string()));
        let ts: Vec<String> = self.adam.t.iter().map(u64::to_string).collect();
        meta.push(("adam_t".into(), ts.join(",")));
        c.set_meta(&meta);
        let names = self.bundle.trainable_names();
        for (n, t) in self.bundle.named_tensors() {
            c.push(n, t.clone());
        }
        for (i, n) in names.iter().enumerate() {
            c.push(format!("adam.m.{n}"), self.adam.m[i].clone());
            c.push(format!("adam.v.{n}"), self.adam.v[i].clone());
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let meta = c.meta()?;
        expect_kind(&meta, "bundle")?;
        let lm = lm_from_meta(&meta)?;
        let mut config = TrainConfig::default();
        for k in TrainConfig::KEYS {
            config.set(k, field(&meta, k)?).map_err(|e| Error::Format(e.to_string()))?;
        }
        let mode: Mode = config.mode;
        let d_sim = c
            .get(super::bundle::SIMILARITY)
            .map_or(config.d_sim, |t| t.shape().get(1).copied().unwrap_or(config.d_sim));
        let tensors: BTreeMap<String, Tensor> = c
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam.") && n != META)
            .cloned()
            .collect();
        let bundle = ModelBundle::from_named(mode, lm, d_sim, &tensors)?;
        let mut t = Trainer::new(bundle, config).map_err(|e| Error::Format(e.to_string()))?;
        t.epoch = parse_field(&meta, "completed_epochs")?;
        t.step = parse_field(&meta, "completed_steps")?;
        let names = t.bundle.trainable_names();
        let steps: Vec<u64> = field(&meta, "adam_t")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Format("bad adam_t".into())))
            .collect::<Result<_>>()?;
        if steps.len() != names.len() {
            return Err(Error::Format("adam_t does not match the parameter list".into()));
        }
        let mut adam = AdamState {
            m: Vec::new(),
            v: Vec::new(),
            t: steps,
        };
        for n in &names {
            for (dst, key) in [(&mut adam.m, "m"), (&mut adam.v, "v")] {
                let full = format!("adam.{key}.{n}");
                let s = c
                    .get(&full)
                    .ok_or_else(|| Error::Format(format!("missing tensor {full:?}")))?;
                dst.push(s.clone());
            }
        }
        debug_assert!(names.iter().all(|n| !n.starts_with(REFERENCE)));
        for (i, (m, p)) in adam.m.iter().zip(t.bundle.named_tensors().iter().filter(|(n, _)| !n.starts_with(REFERENCE))).enumerate() {
            if m.shape() != p.1.shape() || adam.v[i].shape() != p.1.shape() {
                return Err(Error::Format(format!("optimizer state shape mismatch for {}", p.0)));
            }
        }
        t.adam = adam;
        Ok(t)
    }
}

fn parse_field<V: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<V> {
    field(meta, key)?
        .parse()
        .map_err(|_| Error::Format(format!("bad value for {key}")))
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    trainer.to_checkpoint().write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    Trainer::from_checkpoint(&Checkpoint::read(path)?)
}
