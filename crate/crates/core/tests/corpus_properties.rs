use std::collections::BTreeSet;

use multiblade::corpus::{
    build_vocab, generate_synthetic, ingest_caml_format, tokenize, write_caml_format, Corpus, IngestOptions,
    LabelSpace, RawDocument, SyntheticSpec, PAD_TOKEN, UNK_ID, UNK_TOKEN,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn raw_docs(prefix: &'static str, labels: usize) -> impl Strategy<Value = Vec<RawDocument>> {
    prop::collection::vec(
        (
            prop::collection::vec(word(), 0..12),
            prop::collection::btree_set(0..labels, 0..3),
        ),
        0..6,
    )
    .prop_map(move |rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (tokens, labels))| RawDocument {
                doc_id: format!("{prefix}{i}"),
                tokens,
                labels,
            })
            .collect()
    })
}

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    (raw_docs("tr", 4), raw_docs("dv", 4), raw_docs("te", 4)).prop_map(|(train, dev, test)| {
        let mut freq = vec![0; 4];
        for d in &train {
            for &c in &d.labels {
                freq[c] += 1;
            }
        }
        let codes = (0..4).map(|i| format!("{}.{i}", 400 + i)).collect();
        let descs = (0..4).map(|i| format!("label number {i}")).collect();
        Corpus {
            train,
            dev,
            test,
            labels: LabelSpace::new(codes, descs, freq),
        }
    })
}

proptest! {
    #[test]
    fn tsv_round_trip(corpus in corpus_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        write_caml_format(dir.path(), &corpus).unwrap();
        let back = ingest_caml_format(dir.path(), IngestOptions::default()).unwrap();
        prop_assert_eq!(back, corpus);
    }

    #[test]
    fn tokenize_truncates_and_filters(words in prop::collection::vec("[A-Za-z0-9]{1,5}", 0..30), max_len in 0usize..20) {
        let text = words.join(" ");
        let toks = tokenize(&text, max_len);
        let expected: Vec<String> = words
            .iter()
            .map(|w| w.to_lowercase())
            .filter(|w| w.chars().any(|c| c.is_ascii_alphabetic()))
            .take(max_len)
            .collect();
        prop_assert_eq!(toks, expected);
    }
}

#[test]
fn vocabulary_matches_document_frequency_recount() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let alphabet: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
    let docs: Vec<Vec<String>> = (0..100)
        .map(|_| {
            let len = rng.gen_range(1..15);
            // skewed draw so document frequencies straddle the threshold
            (0..len)
                .map(|_| {
                    let u: f64 = rng.gen();
                    alphabet[((u * u * u * u) * alphabet.len() as f64) as usize].clone()
                })
                .collect()
        })
        .collect();
    let vocab = build_vocab(docs.iter().map(Vec::as_slice), 50_000, 3).unwrap();

    let mut expected = BTreeSet::new();
    for tok in &alphabet {
        let df = docs.iter().filter(|d| d.contains(tok)).count();
        if df >= 3 {
            expected.insert(tok.clone());
        }
    }
    assert!(
        expected.len() > 3 && expected.len() < alphabet.len(),
        "threshold not exercised"
    );
    let got: BTreeSet<String> = vocab.tokens()[2..].iter().cloned().collect();
    assert_eq!(got, expected);
    assert_eq!(vocab.tokens()[0], PAD_TOKEN);
    assert_eq!(vocab.tokens()[1], UNK_TOKEN);
    for tok in &alphabet {
        if !expected.contains(tok) {
            assert_eq!(vocab.id(tok), UNK_ID, "{tok}");
        }
    }

    // max_size keeps the most frequent by total count
    let small = build_vocab(docs.iter().map(Vec::as_slice), 3, 3).unwrap();
    let total = |t: &str| docs.iter().flatten().filter(|x| *x == t).count();
    let kept: Vec<usize> = small.tokens()[2..].iter().map(|t| total(t)).collect();
    let best_dropped = expected
        .iter()
        .filter(|t| !small.contains(t))
        .map(|t| total(t))
        .max()
        .unwrap();
    assert!(kept.iter().all(|&k| k >= best_dropped));
}

#[test]
fn ingest_truncates_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let line = |id: &str| format!("{id}\t{}\tA\n", vec!["tok"; 30].join(" "));
    for (file, id) in [("train.tsv", "a"), ("dev.tsv", "b"), ("test.tsv", "c")] {
        std::fs::write(dir.path().join(file), line(id)).unwrap();
    }
    let c = ingest_caml_format(dir.path(), IngestOptions { max_len: 7 }).unwrap();
    for split in [&c.train, &c.dev, &c.test] {
        assert_eq!(split[0].tokens.len(), 7);
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec {
        train_docs: 50,
        dev_docs: 10,
        test_docs: 10,
        ..SyntheticSpec::default()
    };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic(&SyntheticSpec {
        seed: spec.seed + 1,
        ..spec
    })
    .unwrap();
    assert_ne!(a.corpus.train, c.corpus.train);
    // every planted trigger is where the map says it is
    for r in &a.trigger_map {
        let docs = a.corpus.split(r.split);
        let d = docs.iter().find(|d| d.doc_id == r.doc_id).unwrap();
        assert_eq!(
            &d.tokens[r.start..r.start + a.trigger_len(r.label)],
            a.triggers[r.label].as_slice()
        );
        assert!(d.labels.contains(&r.label));
    }
}
