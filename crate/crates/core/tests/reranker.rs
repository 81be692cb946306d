mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dialogeval::corpus::Turn;
use dialogeval::generator::{Candidate, NBestList};
use dialogeval::metrics::{bleu4_corpus, bleu4_sentence};
use dialogeval::reranker::{
    load_pairs, mine_pairs, pairs_from_scored, rerank, save_pairs, select_best, train_reranker,
    PreferencePair, Reranker, RerankerConfig, INPUT_DIM,
};
use dialogeval_tape::{Adam, Tape};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn random_features(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut f = Vec::with_capacity(INPUT_DIM);
    for _ in 0..INPUT_DIM / 2 {
        let p: f64 = rng.gen();
        f.push(1.0 - p);
        f.push(p);
    }
    f
}

#[test]
fn fifteen_distinct_candidates_give_every_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f: Vec<Vec<f64>> = (0..15).map(|_| random_features(&mut rng)).collect();
    let mut bleu: Vec<f64> = (0..15).map(|i| i as f64 * 0.03).collect();
    bleu.shuffle(&mut rng);
    let pairs = pairs_from_scored(&f, &bleu).unwrap();
    assert_eq!(pairs.len(), 15 * 14 / 2);
    assert!(pairs.iter().all(|p| p.bleu_w > p.bleu_l));
    assert!(pairs_from_scored(&f[..5], &[0.2; 5]).unwrap().is_empty());
}

#[test]
fn mined_pairs_follow_sentence_bleu() {
    let words = [
        "i", "like", "jazz", "music", "a", "lot", "no", "thanks", ".",
    ];
    let vocab = common::vocab(&words);
    let ev = common::evaluator(vocab.clone(), 6, 6, 3);
    let cands = [
        "i like jazz music a lot .",
        "i like jazz .",
        "no thanks .",
        "i like music a lot",
    ];
    let nbest = NBestList {
        candidates: cands
            .iter()
            .enumerate()
            .map(|(i, c)| Candidate {
                tokens: vocab.encode(&toks(c)),
                score: -(i as f64),
                finished: true,
            })
            .collect(),
    };
    let reference = toks("i like jazz music a lot .");
    let turn = Turn::new(1, "do you like jazz ?", "");
    let ctx = [Turn::new(0, "hello", "hi")];
    let pairs = mine_pairs(&nbest, &vocab, &reference, &ev, &turn, &ctx).unwrap();
    let bleu: Vec<f64> = cands
        .iter()
        .map(|c| bleu4_sentence(&toks(c), &reference).unwrap())
        .collect();
    let mut want = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            want += usize::from(bleu[i] != bleu[j]);
        }
    }
    assert_eq!(pairs.len(), want);
    assert!(bleu[0] > bleu[1] && bleu[0] > bleu[2] && bleu[0] > bleu[3]);
    for p in &pairs {
        assert!(p.bleu_w > p.bleu_l);
        assert_eq!(p.winner.len(), INPUT_DIM);
        let w = bleu.iter().position(|&b| b == p.bleu_w).unwrap();
        let l = bleu.iter().position(|&b| b == p.bleu_l).unwrap();
        assert!(w != l);
    }
    assert_eq!(pairs.iter().filter(|p| p.bleu_w == bleu[0]).count(), 3);
}

#[test]
fn satisfied_margins_give_zero_loss_and_no_update() {
    let config = RerankerConfig {
        margin: 1e-3,
        ..RerankerConfig::default()
    };
    let mut model = Reranker::new(config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pool: Vec<Vec<f64>> = (0..200).map(|_| random_features(&mut rng)).collect();
    let scores = model.score_all(&pool);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (top, bottom) = (order[0], order[order.len() - 1]);
    assert!(
        scores[top] - scores[bottom] > 1e-3,
        "score spread {}",
        scores[top] - scores[bottom]
    );
    let pairs = vec![PreferencePair {
        winner: pool[top].clone(),
        loser: pool[bottom].clone(),
        bleu_w: 0.5,
        bleu_l: 0.1,
    }];
    assert_eq!(model.loss(&pairs), 0.0);
    let before = model.store.to_bytes();
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let mut t = Tape::new();
    let b = t.bind(&model.store, true);
    let loss = model.hinge_loss(&mut t, &b, &refs);
    let grads = t.backward(loss);
    assert_eq!(grads.global_norm(), 0.0);
    Adam::new(1e-2).step(&mut model.store, &grads);
    assert_eq!(model.store.to_bytes(), before);
}

#[test]
fn separable_pairs_are_learned() {
    // Winners have a higher yes-probability on the second head.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pairs: Vec<PreferencePair> = (0..300)
        .map(|_| {
            let mut w = random_features(&mut rng);
            let mut l = random_features(&mut rng);
            let (hi, lo) = (rng.gen_range(0.6..1.0), rng.gen_range(0.0..0.4));
            w[3] = hi;
            w[2] = 1.0 - hi;
            l[3] = lo;
            l[2] = 1.0 - lo;
            PreferencePair {
                winner: w,
                loser: l,
                bleu_w: 0.4,
                bleu_l: 0.2,
            }
        })
        .collect();
    let config = RerankerConfig {
        learning_rate: 1e-2,
        epochs: 30,
        ..RerankerConfig::default()
    };
    let (model, log) = train_reranker(&pairs, &config, 5).unwrap();
    assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
    assert!(
        log.train_accuracy >= 0.95,
        "accuracy {}",
        log.train_accuracy
    );
    assert_eq!(model.pairwise_accuracy(&pairs), log.train_accuracy);
}

#[test]
fn selection_cases() {
    assert_eq!(select_best(&[0.2, 0.9, 0.1], &[0.0, -1.0, -2.0]), Some(1));
    assert_eq!(select_best(&[0.4], &[-3.0]), Some(0));
    assert_eq!(
        select_best(&[0.7; 6], &[0.0, -1.0, -2.0, -3.0, -4.0, -5.0]),
        Some(0)
    );
    assert_eq!(select_best(&[], &[]), None);
}

#[test]
fn oracle_reranker_never_loses_to_the_top_beam() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let words = ["a", "b", "c", "d", "e", "f", "g"];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.gen_range(3..9))
            .map(|_| words.choose(rng).unwrap().to_string())
            .collect()
    };
    let mut refs = Vec::new();
    let mut top = Vec::new();
    let mut oracle = Vec::new();
    for _ in 0..60 {
        let reference = sentence(&mut rng);
        let cands: Vec<Vec<String>> = (0..15).map(|_| sentence(&mut rng)).collect();
        let bleu: Vec<f64> = cands
            .iter()
            .map(|c| bleu4_sentence(c, &reference).unwrap())
            .collect();
        let rank: Vec<f64> = (0..15).map(|i| -(i as f64)).collect();
        let pick = select_best(&bleu, &rank).unwrap();
        assert!(bleu[pick] >= bleu[0]);
        top.push(cands[0].clone());
        oracle.push(cands[pick].clone());
        refs.push(reference);
    }
    assert!(bleu4_corpus(&oracle, &refs).unwrap() >= bleu4_corpus(&top, &refs).unwrap());
}

#[test]
fn pairs_round_trip_through_jsonl() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f: Vec<Vec<f64>> = (0..6).map(|_| random_features(&mut rng)).collect();
    let bleu = [0.1, 0.5, 0.3, 0.3, 0.0, 0.9];
    let pairs = pairs_from_scored(&f, &bleu).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    save_pairs(&path, &pairs).unwrap();
    assert_eq!(load_pairs(&path).unwrap(), pairs);
    std::fs::write(&path, "{\"winner\": [1.0]}\n").unwrap();
    assert!(load_pairs(&path).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_scores() {
    let model = Reranker::new(RerankerConfig::default(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Reranker::load(dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f: Vec<Vec<f64>> = (0..5).map(|_| random_features(&mut rng)).collect();
    assert_eq!(model.score_all(&f), back.score_all(&f));
    assert!(Reranker::load(&dir.path().join("missing")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_do_not_depend_on_list_order(seed in any::<u64>(), n in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Reranker::new(RerankerConfig::default(), seed % 97).unwrap();
        let f: Vec<Vec<f64>> = (0..n).map(|_| random_features(&mut rng)).collect();
        let scores = model.score_all(&f);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| f[i].clone()).collect();
        let again = model.score_all(&shuffled);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((again[k] - scores[i]).abs() <= 1e-12);
            prop_assert!((model.score(&f[i]) - scores[i]).abs() <= 1e-12);
        }
        let nbest = NBestList {
            candidates: (0..n).map(|i| Candidate { tokens: vec![5 + i], score: -(i as f64), finished: true }).collect(),
        };
        let pick = rerank(&nbest, &f, &model).unwrap();
        prop_assert!(scores.iter().all(|&s| s <= scores[pick]));
    }
}
