mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dialogeval::corpus::{
    corpus_stats, corpus_to_jsonl, load_corpus, parse_corpus, save_corpus, split_corpus,
    token_counts, Dialog, LoadMode, Partition, Turn, TurnAnnotation, SCHEMA_VERSION, TOPICS,
};
use dialogeval::text::tokenize;
use dialogeval::toy;

const WORDS: [&str; 12] = [
    "hello", "music", "Paris", "is", "fun", "what", "do", "you", "like", "?", ".", "really",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..9);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn synthetic(n: usize, seed: u64) -> Vec<Dialog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(1..5);
            let annotated = rng.gen_bool(0.7);
            let turns: Vec<Turn> = (0..k)
                .map(|j| {
                    let mut t = Turn::new(j, random_text(&mut rng), random_text(&mut rng));
                    if rng.gen_bool(0.5) {
                        t.topic = Some(TOPICS[rng.gen_range(0..TOPICS.len())].to_string());
                        t.dialog_act_user = Some("statement".into());
                        t.entities_user = Some(BTreeSet::from(["paris".to_string()]));
                    }
                    t
                })
                .collect();
            let annotations = annotated.then(|| {
                (0..k)
                    .map(|_| {
                        let mut a =
                            TurnAnnotation::from_bits(std::array::from_fn(|_| rng.gen_bool(0.5)));
                        a.scalar_rating = rng.gen_bool(0.5).then(|| rng.gen_range(1..=5));
                        a
                    })
                    .collect()
            });
            Dialog {
                dialog_id: format!("d{i:03}"),
                turns,
                annotations,
                conversation_rating: annotated.then(|| rng.gen_range(1..=5)),
            }
        })
        .collect()
}

#[test]
fn hundred_dialogs_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    let dialogs = synthetic(100, 1);
    save_corpus(&path, &dialogs).unwrap();
    let loaded = load_corpus(&path, SCHEMA_VERSION).unwrap();
    assert_eq!(loaded.len(), 100);
    assert_eq!(loaded, dialogs);
    let again = dir.path().join("d.jsonl");
    save_corpus(&again, &loaded).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn canonical_form_normalizes_key_order() {
    let shuffled =
        r#"{"turns":[{"system":"hi there","user":"Hello"}],"dialog_id":"x","schema_version":"1"}"#;
    let out = parse_corpus(shuffled, SCHEMA_VERSION, LoadMode::Strict).unwrap();
    let canon = corpus_to_jsonl(&out.dialogs);
    assert!(canon.starts_with(r#"{"schema_version":"1","dialog_id":"x""#));
    let reparsed = parse_corpus(&canon, SCHEMA_VERSION, LoadMode::Strict).unwrap();
    assert_eq!(corpus_to_jsonl(&reparsed.dialogs), canon);
}

#[test]
fn one_bad_line_among_ten() {
    let good = corpus_to_jsonl(&synthetic(9, 2));
    let mut lines: Vec<&str> = good.lines().collect();
    lines.insert(6, "{not json");
    let text = lines.join("\n");
    let err = parse_corpus(&text, SCHEMA_VERSION, LoadMode::Strict).unwrap_err();
    assert!(err.to_string().contains("line 7"), "{err}");
    let lenient = parse_corpus(&text, SCHEMA_VERSION, LoadMode::Lenient).unwrap();
    assert_eq!(lenient.dialogs.len(), 9);
    assert_eq!(lenient.rejected.len(), 1);
}

#[test]
fn split_sizes_for_ten() {
    let dialogs = synthetic(10, 3);
    let s = split_corpus(&dialogs, [0.8, 0.1, 0.1], 7).unwrap();
    assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
    assert_eq!(s, split_corpus(&dialogs, [0.8, 0.1, 0.1], 7).unwrap());
}

#[test]
fn splits_partition_a_thousand_dialogs_for_every_seed() {
    let dialogs = synthetic(1000, 4);
    let ids: BTreeSet<String> = dialogs.iter().map(|d| d.dialog_id.clone()).collect();
    for seed in 0..25 {
        let s = split_corpus(&dialogs, [0.8, 0.1, 0.1], seed).unwrap();
        let mut seen = BTreeMap::new();
        for part in [&s.train, &s.dev, &s.test] {
            for id in part {
                *seen.entry(id.clone()).or_insert(0) += 1;
            }
        }
        assert!(seen.values().all(|&c| c == 1));
        assert_eq!(seen.keys().cloned().collect::<BTreeSet<_>>(), ids);
        let total: usize = [Partition::Train, Partition::Dev, Partition::Test]
            .iter()
            .map(|&p| s.select(&dialogs, p).len())
            .sum();
        assert_eq!(total, 1000);
    }
}

#[test]
fn stats_match_an_independent_recount() {
    let dialogs = synthetic(50, 5);
    let stats = corpus_stats(&dialogs).unwrap();
    let mut user = Vec::new();
    let mut system = Vec::new();
    for d in &dialogs {
        for t in &d.turns {
            user.push(t.user_text.split_whitespace().count() as f64);
            system.push(t.system_text.split_whitespace().count() as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert_eq!(stats.turns, user.len());
    assert!((stats.user_mean_tokens - mean(&user)).abs() < 1e-12);
    assert!((stats.system_mean_tokens - mean(&system)).abs() < 1e-12);
}

#[test]
fn shipped_toy_corpus_is_reproducible() {
    let root = common::repo_root().join("data/toy");
    let shipped = load_corpus(root.join("corpus.jsonl"), SCHEMA_VERSION).unwrap();
    assert_eq!(
        shipped,
        toy::toy_corpus(toy::DEFAULT_DIALOGS, toy::DEFAULT_SEED)
    );
    let gaz = std::fs::read_to_string(root.join("gazetteer.txt")).unwrap();
    assert_eq!(
        gaz.lines().map(str::to_string).collect::<Vec<_>>(),
        toy::toy_gazetteer()
    );
    let counts = token_counts(&shipped);
    assert!(counts[&tokenize(toy::GENERIC_RESPONSE)[0]] > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_corpora_round_trip(n in 1usize..30, seed in any::<u64>()) {
        let dialogs = synthetic(n, seed);
        for d in &dialogs {
            if let Some(a) = &d.annotations {
                prop_assert_eq!(a.len(), d.turns.len());
            }
        }
        let text = corpus_to_jsonl(&dialogs);
        let back = parse_corpus(&text, SCHEMA_VERSION, LoadMode::Strict).unwrap().dialogs;
        prop_assert_eq!(&back, &dialogs);
        prop_assert_eq!(corpus_to_jsonl(&back), text);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(n in 3usize..200, seed in any::<u64>()) {
        let dialogs = synthetic(n, seed);
        let s = split_corpus(&dialogs, [0.8, 0.1, 0.1], seed).unwrap();
        prop_assert_eq!(s.train.len() + s.dev.len() + s.test.len(), n);
        prop_assert!(s.train.is_disjoint(&s.dev));
        prop_assert!(s.train.is_disjoint(&s.test));
        prop_assert!(s.dev.is_disjoint(&s.test));
    }
}
