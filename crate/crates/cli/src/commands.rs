use std::path::Path;

use anyhow::{bail, Context, Result};
use hypogen::data::{
    gen_mcqa, gen_pretrain_corpus, gen_taxonomy, load_corpus, load_jsonl, save_corpus, save_jsonl, Dataset,
};
use hypogen::lm::ToyLm;
use hypogen::train::{
    ablate_zero_hypothesis, evaluate, load_checkpoint, load_lm, predict_dataset, pretrain as run_pretrain,
    save_checkpoint, save_lm, ModelBundle, Trainer,
};
use hypogen::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{seed_from_env, RunConfig};
use crate::ConfigArgs;

fn emit(v: &Value) {
    println!("{v}");
}

fn echo(cfg: &RunConfig) {
    emit(&json!({ "config": cfg.to_json() }));
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_jsonl(path).with_context(|| format!("loading {}", path.display()))
}

fn check_vocab(data: &Dataset, vocab: usize, path: &Path) -> Result<()> {
    if data.vocab.len() != vocab {
        bail!(Error::Config(format!(
            "{} has a vocabulary of {} tokens but the model expects {vocab}",
            path.display(),
            data.vocab.len()
        )));
    }
    Ok(())
}

pub fn gen_data(
    categories: usize,
    hyponyms: usize,
    seed: Option<u64>,
    dev_fraction: f64,
    repeats: usize,
    out: &Path,
) -> Result<()> {
    let seed = match seed {
        Some(s) => s,
        None => seed_from_env()?.unwrap_or(0),
    };
    emit(&json!({ "config": {
        "categories": categories,
        "hyponyms": hyponyms,
        "seed": seed,
        "dev_fraction": dev_fraction,
        "repeats": repeats,
        "out": out.display().to_string(),
    }}));
    let (tax, vocab) = gen_taxonomy(categories, hyponyms, seed)?;
    let corpus = gen_pretrain_corpus(&tax, &vocab, repeats)?;
    let (train, dev) = gen_mcqa(&tax, &vocab, dev_fraction, seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    save_jsonl(&train, &vocab, out.join("train.jsonl"))?;
    save_jsonl(&dev, &vocab, out.join("dev.jsonl"))?;
    save_corpus(&corpus, &vocab, out.join("corpus.txt"))?;
    emit(&json!({
        "train_examples": train.len(),
        "dev_examples": dev.len(),
        "corpus_sentences": corpus.len(),
        "vocab": vocab.len(),
    }));
    eprintln!("wrote train.jsonl, dev.jsonl and corpus.txt to {}", out.display());
    Ok(())
}

pub fn pretrain(args: &ConfigArgs, mut sets: Vec<String>) -> Result<()> {
    sets.splice(0..0, args.overrides.iter().cloned());
    let mut cfg = RunConfig::load(args.config.as_deref(), &sets)?;
    let data_path = cfg.require(&cfg.paths.train_data, "train_data")?.to_path_buf();
    let corpus_path = cfg.require(&cfg.paths.corpus, "corpus")?.to_path_buf();
    let out = cfg.require(&cfg.paths.pretrained, "pretrained")?.to_path_buf();
    let data = load_data(&data_path)?;
    cfg.lm.vocab = data.vocab.len();
    echo(&cfg);
    let corpus = load_corpus(&corpus_path, &data.vocab)?;
    let mut lm = ToyLm::new(cfg.lm.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.pretrain.seed))?;
    eprintln!("pretraining {} parameters on {} sentences", lm.n_params(), corpus.len());
    run_pretrain(&mut lm, &corpus, &cfg.pretrain, |epoch, loss| {
        emit(&json!({ "epoch": epoch, "loss": loss }));
    })?;
    save_lm(&lm, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

pub fn train(args: &ConfigArgs, mut sets: Vec<String>, resume: Option<&Path>, epochs: Option<usize>) -> Result<()> {
    sets.splice(0..0, args.overrides.iter().cloned());
    let mut cfg = RunConfig::load(args.config.as_deref(), &sets)?;
    let data_path = cfg.require(&cfg.paths.train_data, "train_data")?.to_path_buf();
    let data = load_data(&data_path)?;
    let dev = match &cfg.paths.dev_data {
        Some(p) => Some(load_data(p)?),
        None => None,
    };

    let mut trainer = match resume {
        Some(path) => {
            let mut t = load_checkpoint(path).with_context(|| format!("resuming from {}", path.display()))?;
            // The checkpoint's settings win; only the epoch budget may grow.
            if let Some(e) = epochs {
                t.config.epochs = e;
                t.config.validate()?;
            }
            eprintln!("resuming after epoch {} of {}", t.epoch, t.config.epochs);
            t
        }
        None => {
            let path = cfg.require(&cfg.paths.pretrained, "pretrained")?;
            let lm = load_lm(path).with_context(|| format!("loading {}", path.display()))?;
            let bundle = ModelBundle::new(cfg.train.mode, &lm, cfg.train.d_sim, cfg.train.seed)?;
            Trainer::new(bundle, cfg.train.clone())?
        }
    };
    cfg.train = trainer.config.clone();
    cfg.lm = trainer.bundle.lm_config().clone();
    check_vocab(&data, cfg.lm.vocab, &data_path)?;
    if let (Some(d), Some(p)) = (&dev, &cfg.paths.dev_data) {
        check_vocab(d, cfg.lm.vocab, p)?;
    }
    echo(&cfg);

    let out = cfg.paths.checkpoint.clone();
    trainer.fit(&data.examples, dev.as_ref().map(|d| d.examples.as_slice()), |t, rec| {
        emit(&serde_json::to_value(rec).expect("records serialize"));
        if let Some(p) = &out {
            save_checkpoint(t, p)?;
        }
        Ok(())
    })?;
    match &out {
        Some(p) => {
            save_checkpoint(&trainer, p)?;
            eprintln!("wrote {}", p.display());
        }
        None => eprintln!("no checkpoint path given; trained model discarded"),
    }
    Ok(())
}

/// Loads the checkpoint and dataset named by the config and echoes the
/// effective settings (training settings come from the checkpoint).
fn load_trained(args: &ConfigArgs, mut sets: Vec<String>) -> Result<(RunConfig, Trainer, Dataset)> {
    sets.splice(0..0, args.overrides.iter().cloned());
    let mut cfg = RunConfig::load(args.config.as_deref(), &sets)?;
    let ckpt = cfg.require(&cfg.paths.checkpoint, "checkpoint")?.to_path_buf();
    let data_path = cfg.require(&cfg.paths.dev_data, "dev_data")?.to_path_buf();
    let trainer = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data = load_data(&data_path)?;
    cfg.train = trainer.config.clone();
    cfg.lm = trainer.bundle.lm_config().clone();
    check_vocab(&data, cfg.lm.vocab, &data_path)?;
    echo(&cfg);
    Ok((cfg, trainer, data))
}

pub fn eval(args: &ConfigArgs, sets: Vec<String>) -> Result<()> {
    let (_, t, data) = load_trained(args, sets)?;
    let m = evaluate(&t.bundle, &data.examples, &t.config)?;
    emit(&serde_json::to_value(&m)?);
    Ok(())
}

pub fn ablate(args: &ConfigArgs, sets: Vec<String>) -> Result<()> {
    let (_, t, data) = load_trained(args, sets)?;
    let ab = ablate_zero_hypothesis(&t.bundle, &data.examples, &t.config)?;
    emit(&json!({
        "with_accuracy": ab.with.accuracy,
        "without_accuracy": ab.without.accuracy,
        "delta_pct": ab.delta_pct,
        "with": ab.with,
        "without": ab.without,
    }));
    Ok(())
}

pub fn inspect(args: &ConfigArgs, sets: Vec<String>, limit: usize) -> Result<()> {
    let (_, t, data) = load_trained(args, sets)?;
    if !t.bundle.mode.has_hypothesis() {
        bail!(Error::Config(format!("mode {} produces no hypotheses to inspect", t.bundle.mode)));
    }
    let n = limit.min(data.examples.len());
    if n == 0 {
        return Ok(());
    }
    let examples = &data.examples[..n];
    let (preds, _) = predict_dataset(&t.bundle, examples, &t.config, false)?;
    let words = |ids: &[usize]| data.vocab.decode(ids);
    for (i, (ex, p)) in examples.iter().zip(&preds).enumerate() {
        let hypothesis: Vec<&str> = p.hypothesis.iter().map(|&id| data.vocab.token(id).unwrap_or("?")).collect();
        emit(&json!({
            "index": i,
            "question": words(&ex.question),
            "hypothesis": hypothesis,
            "gold": words(&ex.candidates[p.gold]),
            "predicted": words(&ex.candidates[p.predicted]),
            "correct": p.correct(),
        }));
    }
    Ok(())
}
