use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dialogeval::text::{
    bucket_vector, char_ngrams, fnv1a, init_embeddings, tokenize, EmbeddingSource, Vocabulary,
    NUM_SPECIALS, SPECIAL_TOKENS, SUBWORD_BUCKETS, UNK,
};

#[test]
fn zipfian_vocabulary_matches_a_frequency_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let types: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
    let weights: Vec<f64> = (1..=types.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut stream = Vec::new();
    for _ in 0..30_000 {
        let mut x = rng.gen::<f64>() * total;
        let mut k = 0;
        while x > weights[k] && k + 1 < weights.len() {
            x -= weights[k];
            k += 1;
        }
        stream.push(types[k].clone());
    }
    let mut oracle: HashMap<&str, usize> = HashMap::new();
    for w in &stream {
        *oracle.entry(w.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = oracle.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let expected: Vec<&str> = ranked.iter().take(100).map(|p| p.0).collect();

    let mut counts = BTreeMap::new();
    for w in &stream {
        *counts.entry(w.clone()).or_insert(0) += 1;
    }
    let vocab = Vocabulary::from_counts(&counts, 100).unwrap();
    assert_eq!(vocab.len(), NUM_SPECIALS + 100);
    let got: Vec<&str> = vocab.tokens()[NUM_SPECIALS..]
        .iter()
        .map(String::as_str)
        .collect();
    assert_eq!(got, expected);
}

#[test]
fn encode_decode_round_trip() {
    let vocab = Vocabulary::from_tokens(["a", "b", "c"].map(String::from), 3);
    let toks = ["c", "a", "b", "a"];
    assert_eq!(vocab.decode(&vocab.encode(&toks)), toks);
    assert_eq!(vocab.encode(&["zzz"]), vec![UNK]);
    assert_eq!(
        vocab.decode(&vocab.encode(&["zzz"])),
        vec![SPECIAL_TOKENS[UNK]]
    );
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vocab.txt");
    vocab.save(&p).unwrap();
    assert_eq!(Vocabulary::load(&p).unwrap(), vocab);
}

#[test]
fn subword_rows_sum_hashed_ngram_buckets() {
    let vocab = Vocabulary::from_tokens(["music", "musical"].map(String::from), 2);
    let table = init_embeddings(&vocab, 6, &EmbeddingSource::SubwordHash, 3).unwrap();
    for tok in ["music", "musical"] {
        let mut want = vec![0.0; 6];
        for g in char_ngrams(tok) {
            for (w, x) in
                want.iter_mut()
                    .zip(bucket_vector(fnv1a(g.as_bytes()) % SUBWORD_BUCKETS, 6, 3))
            {
                *w += x;
            }
        }
        assert_eq!(table.row(vocab.id(tok)), want.as_slice());
    }
    let again = init_embeddings(&vocab, 6, &EmbeddingSource::SubwordHash, 3).unwrap();
    assert_eq!(again, table);
}

#[test]
fn pretrained_half_coverage() {
    let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"].map(String::from), 4);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vec.txt");
    std::fs::write(&p, "a 1 2\nc 3 4\nzz 9 9\n").unwrap();
    let t = init_embeddings(&vocab, 2, &EmbeddingSource::Pretrained(p.clone()), 1).unwrap();
    let r = init_embeddings(&vocab, 2, &EmbeddingSource::Random, 1).unwrap();
    assert_eq!(t.row(vocab.id("a")), &[1.0, 2.0]);
    assert_eq!(t.row(vocab.id("c")), &[3.0, 4.0]);
    assert_eq!(t.row(vocab.id("b")), r.row(vocab.id("b")));
    std::fs::write(&p, "a 1 2 3\n").unwrap();
    assert!(init_embeddings(&vocab, 2, &EmbeddingSource::Pretrained(p), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tokenize_is_idempotent(s in "[ a-zA-Z0-9',.!?;:\\-]{0,40}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&once.join(" ")), once.clone());
        for t in &once {
            prop_assert!(!t.is_empty());
            prop_assert_eq!(t.to_lowercase(), t.clone());
        }
    }
}
