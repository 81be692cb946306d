use std::collections::HashSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dialogeval::metrics::{
    bleu4_corpus, bleu4_sentence, distinct2, mcc, pearson, rouge2, rouge2_corpus, score_system,
    ConfusionCounts, MetricReport, RougeVariant,
};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(
        proptest::sample::select(vec!["a", "b", "c", "d", "e", "f"]),
        1..12,
    )
    .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
    proptest::collection::vec((sentence(), sentence()), 1..12)
}

#[test]
fn mcc_formula_on_fixed_and_random_cases() {
    let direct = |tp: f64, fp: f64, fn_: f64, tn: f64| {
        (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt()
    };
    let c = ConfusionCounts::new(50, 10, 10, 30);
    assert!((mcc(c).unwrap() - direct(50.0, 10.0, 10.0, 30.0)).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let pred: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.6)).collect();
    let gold: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.5)).collect();
    let c = ConfusionCounts::from_pairs(&pred, &gold);
    let count = |p: bool, g: bool| {
        pred.iter()
            .zip(&gold)
            .filter(|(&a, &b)| a == p && b == g)
            .count() as f64
    };
    let (tp, fp, fn_, tn) = (
        count(true, true),
        count(true, false),
        count(false, true),
        count(false, false),
    );
    assert_eq!(c.total(), 200);
    assert!((mcc(c).unwrap() - direct(tp, fp, fn_, tn)).abs() < 1e-12);
    assert!((c.accuracy() - (tp + tn) / 200.0).abs() < 1e-15);
    assert!((c.precision() - tp / (tp + fp)).abs() < 1e-15);
    assert!((c.recall() - tp / (tp + fn_)).abs() < 1e-15);
}

#[test]
fn pearson_on_a_fixed_series() {
    let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| 3.0 * v + ((i * 7) % 5) as f64 - 2.0)
        .collect();
    let mx = x.iter().sum::<f64>() / 20.0;
    let my = y.iter().sum::<f64>() / 20.0;
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    let (r, p) = pearson(&x, &y).unwrap();
    assert!((r - cov / (sx * sy)).abs() < 1e-9);
    assert!(p < 1e-6);
    let (r, _) = pearson(&x, &x.iter().map(|v| 2.0 * v + 1.0).collect::<Vec<_>>()).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    let (r, _) = pearson(&x, &x.iter().map(|v| -v).collect::<Vec<_>>()).unwrap();
    assert!((r + 1.0).abs() < 1e-12);
}

#[test]
fn distinct_of_ten_responses() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let words = ["i", "like", "it", "you", "do", "not"];
    let responses: Vec<Vec<String>> = (0..10)
        .map(|_| {
            (0..rng.gen_range(1..8))
                .map(|_| words.choose(&mut rng).unwrap().to_string())
                .collect()
        })
        .collect();
    let mut seen = HashSet::new();
    let mut total = 0;
    for r in &responses {
        for i in 1..r.len() {
            seen.insert(format!("{} {}", r[i - 1], r[i]));
            total += 1;
        }
    }
    assert_eq!(
        distinct2(&responses).unwrap(),
        seen.len() as f64 / total as f64
    );
}

#[test]
fn distinct_scales_with_copies() {
    let one = vec![toks("a b c d b c")];
    let base = distinct2(&one).unwrap();
    for k in 2..6 {
        let many: Vec<Vec<String>> = std::iter::repeat(one[0].clone()).take(k).collect();
        assert!((distinct2(&many).unwrap() - base / k as f64).abs() < 1e-15);
    }
}

#[test]
fn deleting_a_matched_four_gram_never_helps() {
    let cases = [
        "the cat sat on the mat today",
        "i like music and i like movies too",
        "what a great day for a walk in the park",
    ];
    for c in cases {
        let r = toks(c);
        let full = bleu4_sentence(&r, &r).unwrap();
        for start in 0..=r.len() - 4 {
            let mut h = r.clone();
            h.drain(start..start + 4);
            assert!(bleu4_sentence(&h, &r).unwrap() <= full);
        }
    }
}

#[test]
fn rouge_two_of_five_bigrams() {
    let h = toks("a b c x y z");
    let r = toks("a b q c x w");
    let (overlap, hyp_bigrams, ref_bigrams) = (2.0, 5.0, 5.0);
    let p = overlap / hyp_bigrams;
    let rc = overlap / ref_bigrams;
    assert!((rouge2(&h, &r, RougeVariant::F1) - 100.0 * 2.0 * p * rc / (p + rc)).abs() < 1e-12);
    assert!((rouge2(&h, &r, RougeVariant::Recall) - 100.0 * rc).abs() < 1e-12);
}

#[test]
fn report_has_one_row_per_system() {
    let refs = vec![toks("a b c d e"), toks("x y z w")];
    let mut report = MetricReport::default();
    for (name, hyps) in [
        ("S2S", refs.clone()),
        ("S2S_RR", vec![toks("a b"), toks("q")]),
    ] {
        report.rows.push(score_system(name, &hyps, &refs).unwrap());
    }
    assert_eq!(report.row("S2S").unwrap().bleu4, 100.0);
    assert_eq!(report.row("S2S_RR").unwrap().bleu4, 0.0);
    let json = serde_json::to_value(&report).unwrap();
    let row = json["rows"][0].as_object().unwrap();
    for key in ["System", "BLEU-4", "ROUGE-2", "Distinct-2"] {
        assert!(row.contains_key(key), "{key}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn corpus_metrics_ignore_pair_order(pairs in corpus(), seed in any::<u64>()) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (hs, rs): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert!((bleu4_corpus(&h, &r).unwrap() - bleu4_corpus(&hs, &rs).unwrap()).abs() < 1e-9);
        prop_assert!((rouge2_corpus(&h, &r, RougeVariant::F1).unwrap() - rouge2_corpus(&hs, &rs, RougeVariant::F1).unwrap()).abs() < 1e-9);
        prop_assert!((distinct2(&h).unwrap() - distinct2(&hs).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metric_ranges(pairs in corpus()) {
        let (h, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = bleu4_corpus(&h, &r).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        for (x, y) in h.iter().zip(&r) {
            let s = bleu4_sentence(x, y).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
            prop_assert!((0.0..=100.0 + 1e-9).contains(&rouge2(x, y, RougeVariant::F1)));
        }
        prop_assert!((0.0..=1.0).contains(&distinct2(&h).unwrap()));
    }

    #[test]
    fn self_bleu_is_one(s in sentence()) {
        prop_assert!((bleu4_sentence(&s, &s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mcc_flip_symmetry(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let a = mcc(ConfusionCounts::new(tp, fp, fn_, tn)).unwrap();
        let b = mcc(ConfusionCounts::new(tn, fn_, fp, tp)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&a));
    }
}
