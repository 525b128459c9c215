use std::collections::HashSet;

use hypogen::data::{
    gen_mcqa, gen_pretrain_corpus, gen_taxonomy, load_corpus, load_jsonl, save_corpus, save_jsonl, McqExample, Vocab,
};
use proptest::prelude::*;

fn arb_example(vocab: usize) -> impl Strategy<Value = McqExample> {
    (
        prop::collection::vec(0..vocab, 1..6),
        prop::collection::hash_set(prop::collection::vec(0..vocab, 1..4), 2..6),
    )
        .prop_flat_map(|(question, cands)| {
            let candidates: Vec<Vec<usize>> = cands.into_iter().collect();
            let n = candidates.len();
            (Just(question), Just(candidates), 0..n)
        })
        .prop_map(|(question, candidates, gold)| McqExample {
            question,
            candidates,
            gold,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn jsonl_round_trip(examples in prop::collection::vec(arb_example(12), 100)) {
        let vocab = Vocab::with_words((0..8).map(|i| format!("w{i}"))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&examples, &vocab, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        prop_assert_eq!(back.vocab, vocab);
        prop_assert_eq!(back.examples, examples);
    }
}

#[test]
fn hypernym_benchmark_layout() {
    let (tax, vocab) = gen_taxonomy(6, 600, 0).unwrap();
    let (train, dev) = gen_mcqa(&tax, &vocab, 0.2, 0).unwrap();
    assert_eq!(train.len(), 480);
    assert_eq!(dev.len(), 120);
    let what = vocab.id("what").unwrap();
    let mut seen = HashSet::new();
    for ex in train.iter().chain(&dev) {
        assert_eq!(ex.question.len(), 5);
        assert_eq!(ex.question[0], what);
        assert_eq!(ex.candidates.len(), 6);
        let h = vocab.token(ex.question[3]).unwrap();
        let i = tax.hyponyms.iter().position(|x| x == h).unwrap();
        let cat = vocab.token(ex.candidates[ex.gold][0]).unwrap();
        assert_eq!(cat, tax.categories[tax.category_of[i]]);
        assert!(seen.insert(i), "hyponym {h} appears twice");
    }
    // Dev categories are balanced to within one example.
    let mut per_cat = vec![0; 6];
    for ex in &dev {
        per_cat[ex.gold] += 1;
    }
    assert!(per_cat.iter().max().unwrap() - per_cat.iter().min().unwrap() <= 1);
}

#[test]
fn corpus_file_round_trip() {
    let (tax, vocab) = gen_taxonomy(3, 9, 1).unwrap();
    let corpus = gen_pretrain_corpus(&tax, &vocab, 2).unwrap();
    assert_eq!(corpus.len(), 18);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    save_corpus(&corpus, &vocab, &path).unwrap();
    assert_eq!(load_corpus(&path, &vocab).unwrap(), corpus);
    let first = std::fs::read_to_string(&path).unwrap();
    assert!(first.lines().next().unwrap().starts_with("<bos> hyp"));
}

#[test]
fn bad_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"vocab\": [\"<pad>\", \"<bos>\", \"<sep>\", \"<eos>\", \"x\"]}\n{\"question\": [4], \"candidates\": [[4]], \"gold\": 0}\n").unwrap();
    assert!(load_jsonl(&path).is_err());
    std::fs::write(&path, "not json\n").unwrap();
    assert!(load_jsonl(&path).is_err());
    assert!(load_jsonl(dir.path().join("missing.jsonl")).is_err());
}
