//! Full hypernym pipeline: generate the taxonomy, pretrain the language
//! model, then train and evaluate one mode.
//!
//! ```text
//! cargo run --release -p hypogen --example hypernym -- mode=joint epochs=10
//! ```
//!
//! Arguments are `key=value` training settings plus `repeats=N`.

use std::time::Instant;

use hypogen::data::{gen_mcqa, gen_pretrain_corpus, gen_taxonomy, Taxonomy, Vocab, BOS};
use hypogen::lm::{self, LmConfig, Slot, ToyLm};
use hypogen::Graph;
use hypogen::train::{ablate_zero_hypothesis, evaluate, Mode, load_lm, pretrain, save_lm, train, PretrainConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    let mut pre = PretrainConfig::default();
    let mut repeats = 4;
    let mut cache: Option<String> = None;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "repeats" => repeats = v.parse()?,
            "cache" => cache = Some(v.to_string()),
            k if k.starts_with("pretrain_") => pre.set(k, v)?,
            _ => cfg.set(k, v)?,
        }
    }
    pre.seed = cfg.seed;
    let (tax, vocab) = gen_taxonomy(6, 600, cfg.seed)?;
    let corpus = gen_pretrain_corpus(&tax, &vocab, repeats)?;
    let (train_set, dev) = gen_mcqa(&tax, &vocab, 0.2, cfg.seed)?;

    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lm = match &cache {
        Some(path) if std::path::Path::new(path).exists() => load_lm(path)?,
        _ => {
            let mut lm = ToyLm::new(LmConfig::with_vocab(vocab.len()), &mut rng)?;
            pretrain(&mut lm, &corpus, &pre, |e, loss| {
                eprintln!("pretrain epoch {e}: loss {loss:.4} ({:.1}s)", t0.elapsed().as_secs_f32())
            })?;
            if let Some(path) = &cache {
                save_lm(&lm, path)?;
            }
            lm
        }
    };

    let hits = probe(&lm, &tax, &vocab)?;
    eprintln!("probe: {hits}/{} hyponyms map to their category", tax.n_hyponyms());
    if std::env::var("PROBE_CTX").is_ok() {
        probe_context(&lm, &tax, &vocab)?;
    }

    let t1 = Instant::now();
    let (bundle, history) = train(&lm, &train_set, Some(&dev), &cfg)?;
    for rec in &history {
        let d = rec.dev.as_ref().expect("dev metrics");
        eprintln!(
            "epoch {} [{}]: train total {:.4}, dev acc {:.3} rep {:.3} kld {:.4}",
            rec.epoch, rec.phase, rec.train.total, d.accuracy, d.repetition_rate, d.mean_kld
        );
    }
    let m = evaluate(&bundle, &dev, &cfg)?;
    let (preds, _) = hypogen::train::predict_dataset(&bundle, &dev, &cfg, false)?;
    for p in preds.iter().take(8) {
        let words: Vec<&str> = p.hypothesis.iter().map(|&t| vocab.token(t).unwrap_or("?")).collect();
        eprintln!("  hyp {:?} pred {} gold {}", words, p.predicted, p.gold);
    }
    println!("{}", serde_json::to_string(&m)?);
    if matches!(cfg.mode, Mode::SimOnly | Mode::Joint) {
        let ab = ablate_zero_hypothesis(&bundle, &dev, &cfg)?;
        eprintln!(
            "ablation: with {:.3} without {:.3} delta {:?}",
            ab.with.accuracy, ab.without.accuracy, ab.delta_pct
        );
    }
    if cfg.mode == Mode::Joint {
        let sim_view = hypogen::train::ModelBundle {
            mode: Mode::SimOnly,
            generator: bundle.generator.clone(),
            reference: None,
            classifier: None,
            head: None,
            similarity: Some(bundle.classifier.as_ref().unwrap().token_embeddings().clone()),
        };
        let sim_cfg = TrainConfig { mode: Mode::SimOnly, ..cfg.clone() };
        eprintln!("joint generator + table alone: {:.3}", evaluate(&sim_view, &dev, &sim_cfg)?.accuracy);
    }
    if cfg.mode == Mode::Supgen {
        let qs: Vec<&[usize]> = train_set.iter().map(|e| e.question.as_slice()).collect();
        let outs = hypogen::qa::supgen_decode_batch(bundle.generator.as_ref().unwrap(), &qs, cfg.hyp_len)?;
        let hits = outs
            .iter()
            .zip(&train_set)
            .filter(|(o, e)| o.first() == e.candidates[e.gold].first())
            .count();
        eprintln!("supgen first-token gold on train: {hits}/{}", train_set.len());
    }
    eprintln!("training took {:.1}s", t1.elapsed().as_secs_f32());
    Ok(())
}

/// Hyponyms whose most likely continuation of `<bos> h is a` is their category.
fn probe(lm: &ToyLm, tax: &Taxonomy, vocab: &Vocab) -> hypogen::Result<usize> {
    let mut g = Graph::<f32>::new(0);
    let vars = lm.bind(&mut g, false);
    let (is, a) = (vocab.id("is").unwrap(), vocab.id("a").unwrap());
    let seqs: Vec<Vec<Slot>> = tax
        .hyponyms
        .iter()
        .map(|h| vec![Slot::Ids(vec![BOS, vocab.id(h).unwrap(), is, a])])
        .collect();
    let z = lm::next_token_logits(&mut g, &vars, &seqs)?;
    let z = g.value(z);
    Ok((0..tax.n_hyponyms())
        .filter(|&i| {
            let row = z.row(i);
            let best = (0..row.len()).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
            Some(best) == vocab.id(&tax.categories[tax.category_of[i]])
        })
        .count())
}

fn probe_context(lm: &ToyLm, tax: &Taxonomy, vocab: &Vocab) -> hypogen::Result<()> {
    let mut g = Graph::<f32>::new(0);
    let vars = lm.bind(&mut g, false);
    let seqs: Vec<Vec<Slot>> = tax
        .hyponyms
        .iter()
        .map(|h| {
            let q = vocab.encode(&format!("what is a {h} ?")).unwrap();
            vec![Slot::Ids(hypogen::qa::generator_context(&q))]
        })
        .collect();
    let z = lm::next_token_logits(&mut g, &vars, &seqs)?;
    let p = g.softmax_last(z)?;
    let p = g.value(p);
    let cats: Vec<usize> = tax.categories.iter().map(|c| vocab.id(c).unwrap()).collect();
    let mut mass = 0.0;
    let mut hits = 0;
    let mut top: std::collections::BTreeMap<String, usize> = Default::default();
    for i in 0..tax.n_hyponyms() {
        let row = p.row(i);
        mass += cats.iter().map(|&c| row[c]).sum::<f32>();
        let best = (0..6).max_by(|&x, &y| row[cats[x]].total_cmp(&row[cats[y]])).unwrap();
        hits += usize::from(best == tax.category_of[i]);
        let arg = (0..row.len()).max_by(|&x, &y| row[x].total_cmp(&row[y])).unwrap();
        *top.entry(vocab.token(arg).unwrap().to_string()).or_default() += 1;
    }
    eprintln!(
        "context probe: category mass {:.4}, gold ranked first among categories {hits}/{}, argmax {:?}",
        mass / tax.n_hyponyms() as f32,
        tax.n_hyponyms(),
        top.iter().filter(|(_, &n)| n > 5).collect::<Vec<_>>()
    );
    Ok(())
}
