//! Metric kernels: BLEU-4 (corpus and smoothed sentence level), ROUGE-2,
//! Distinct-2, MCC and Pearson correlation.
//!
//! Everything operates on token strings, never on vocabulary ids, so an
//! out-of-vocabulary word cannot inflate overlap by matching `<unk>`.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and hypothesis n-gram total.
fn clipped_matches<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

/// Corpus BLEU-4 in percent: n-gram matches and totals are summed over the
/// corpus before the geometric mean; brevity penalty uses total lengths.
pub fn bleu4_corpus<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Empty("BLEU needs at least one pair".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped_matches(h, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_ORDER)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    Ok(100.0 * brevity_penalty(hyp_len, ref_len) * log_p.exp())
}

/// Sentence BLEU-4 in `[0, 1]` with add-one smoothing on orders 2 to 4.
pub fn bleu4_sentence<S: AsRef<str>>(hypothesis: &[S], reference: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference must be nonempty".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 1..=MAX_ORDER {
        let (m, t) = clipped_matches(hypothesis, reference, n);
        let p = if n == 1 {
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_p += p.ln();
    }
    Ok(brevity_penalty(hypothesis.len(), reference.len()) * (log_p / MAX_ORDER as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeVariant {
    #[default]
    F1,
    Recall,
}

/// ROUGE-2 for one pair, in percent. A reference or hypothesis with fewer
/// than two tokens scores 0.
pub fn rouge2<S: AsRef<str>>(hypothesis: &[S], reference: &[S], variant: RougeVariant) -> f64 {
    if reference.len() < 2 || hypothesis.len() < 2 {
        return 0.0;
    }
    let (overlap, hyp_total) = clipped_matches(hypothesis, reference, 2);
    let ref_total = reference.len() - 1;
    let recall = overlap as f64 / ref_total as f64;
    match variant {
        RougeVariant::Recall => 100.0 * recall,
        RougeVariant::F1 => {
            let precision = overlap as f64 / hyp_total as f64;
            if overlap == 0 {
                0.0
            } else {
                100.0 * 2.0 * precision * recall / (precision + recall)
            }
        }
    }
}

/// Mean ROUGE-2 over aligned pairs.
pub fn rouge2_corpus<S: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
    variant: RougeVariant,
) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let sum: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| rouge2(h, r, variant))
        .sum();
    Ok(sum / hypotheses.len() as f64)
}

/// Distinct bigrams over total bigram occurrences across all responses.
pub fn distinct2<S: AsRef<str>>(responses: &[Vec<S>]) -> Result<f64> {
    if responses.is_empty() {
        return Err(Error::Empty(
            "distinct-2 needs at least one response".into(),
        ));
    }
    let mut distinct = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for w in r.windows(2) {
            distinct.insert((w[0].as_ref(), w[1].as_ref()));
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        distinct.len() as f64 / total as f64
    })
}

/// Binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn from_pairs(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Precision on the positive class; 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f_score(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(c: ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::Empty("MCC of an empty confusion matrix".into()));
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / denom.sqrt())
}

/// Sample Pearson correlation with a two-sided p-value from Student's t on
/// `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} vs {} points",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 3 points, got {n}"
        )));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("zero variance series".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if (1.0 - r.abs()) < 1e-15 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

/// One system's automatic-metric scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(rename = "System")]
    pub system: String,
    #[serde(rename = "BLEU-4")]
    pub bleu4: f64,
    #[serde(rename = "ROUGE-2")]
    pub rouge2: f64,
    #[serde(rename = "Distinct-2")]
    pub distinct2: f64,
    /// Mean smoothed sentence BLEU, in percent.
    #[serde(rename = "Sentence-BLEU-4")]
    pub sentence_bleu4: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn row(&self, system: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.system == system)
    }
}

pub fn score_system<S: AsRef<str>>(
    system: &str,
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
) -> Result<MetricRow> {
    let bleu4 = bleu4_corpus(hypotheses, references)?;
    let rouge2 = rouge2_corpus(hypotheses, references, RougeVariant::F1)?;
    let distinct2 = distinct2(hypotheses)?;
    let mut sent = 0.0;
    for (h, r) in hypotheses.iter().zip(references) {
        sent += bleu4_sentence(h, r)?;
    }
    Ok(MetricRow {
        system: system.to_string(),
        bleu4,
        rouge2,
        distinct2,
        sentence_bleu4: 100.0 * sent / hypotheses.len() as f64,
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .rows
            .iter()
            .map(|r| r.system.len())
            .max()
            .unwrap_or(6)
            .max(6);
        writeln!(
            f,
            "{:<w$}  {:>8}  {:>8}  {:>10}  {:>15}",
            "System", "BLEU-4", "ROUGE-2", "Distinct-2", "Sentence-BLEU-4"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<w$}  {:>8.2}  {:>8.2}  {:>10.4}  {:>15.2}",
                r.system, r.bleu4, r.rouge2, r.distinct2, r.sentence_bleu4
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn corpus_bleu_extremes() {
        let h = vec![toks("a b c d e"), toks("x y z w")];
        assert!((bleu4_corpus(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        let other = vec![toks("p q r s"), toks("t u v k")];
        assert_eq!(bleu4_corpus(&h, &other).unwrap(), 0.0);
        assert!(bleu4_corpus::<String>(&[], &[]).is_err());
    }

    #[test]
    fn sentence_bleu_worked_example() {
        let v = bleu4_sentence(
            &toks("the cat sat on the mat"),
            &toks("the cat is on the mat"),
        )
        .unwrap();
        // p1 = 5/6, p2 = 4/6, p3 = 2/5, p4 = 1/4, BP = 1.
        assert!((v - (1.0f64 / 18.0).powf(0.25)).abs() < 1e-12);
        assert_eq!(bleu4_sentence(&[] as &[String], &toks("a")).unwrap(), 0.0);
        assert!((bleu4_sentence(&toks("a b c d"), &toks("a b c d")).unwrap() - 1.0).abs() < 1e-12);
        assert!((bleu4_sentence(&toks("solo"), &toks("solo")).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_cases() {
        assert!(
            (rouge2(&toks("a b c d"), &toks("a b c d"), RougeVariant::F1) - 100.0).abs() < 1e-12
        );
        assert_eq!(
            rouge2(&toks("a b c"), &toks("d e f"), RougeVariant::F1),
            0.0
        );
        assert_eq!(rouge2(&toks("a b"), &toks("a"), RougeVariant::F1), 0.0);
        // hyp bigrams: ab bc cd de ef (5), ref bigrams: ab bc xy yz (4); 2 shared.
        let f = rouge2(&toks("a b c d e f"), &toks("a b c x y z"), RougeVariant::F1);
        let (p, r) = (2.0 / 5.0, 2.0 / 5.0);
        assert!((f - 100.0 * 2.0 * p * r / (p + r)).abs() < 1e-12);
        let rec = rouge2(&toks("a b c"), &toks("a b c x y"), RougeVariant::Recall);
        assert!((rec - 50.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_cases() {
        assert_eq!(distinct2(&[toks("a b c")]).unwrap(), 1.0);
        assert!((distinct2(&[toks("a a a a")]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct2(&[toks("a"), toks("b")]).unwrap(), 0.0);
        let one = distinct2(&[toks("a b c b")]).unwrap();
        let three = distinct2(&vec![toks("a b c b"); 3]).unwrap();
        assert!((three - one / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mcc_cases() {
        assert_eq!(mcc(ConfusionCounts::new(10, 0, 0, 10)).unwrap(), 1.0);
        assert_eq!(mcc(ConfusionCounts::new(80, 20, 0, 0)).unwrap(), 0.0);
        assert!(mcc(ConfusionCounts::default()).is_err());
        let c = ConfusionCounts::new(50, 10, 10, 30);
        let expect = (50.0 * 30.0 - 10.0 * 10.0) / (60.0f64 * 60.0 * 40.0 * 40.0).sqrt();
        assert!((mcc(c).unwrap() - expect).abs() < 1e-12);
        let flipped = ConfusionCounts::new(c.tn, c.fn_, c.fp, c.tp);
        assert!((mcc(c).unwrap() - mcc(flipped).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn pearson_cases() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let (r, p) = pearson(&x, &y).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert_eq!(p, 0.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap().0 + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 10]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn pearson_p_value_reference() {
        // r = 0.5 with n = 12: t = 0.5 * sqrt(10 / 0.75) = 1.8257..., two-sided
        // p for 10 df is 0.0978546142578 (scipy.stats.t.sf).
        let x: [f64; 12] = [1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.];
        // Build y with correlation exactly 0.5 by mixing x with an orthogonal
        // centred series.
        let mx = 6.5;
        let u: Vec<f64> = x.iter().map(|v| v - mx).collect();
        let w: Vec<f64> = (0..12)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let proj = u.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            / u.iter().map(|a| a * a).sum::<f64>();
        let v: Vec<f64> = w.iter().zip(&u).map(|(b, a)| b - proj * a).collect();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let y: Vec<f64> = u
            .iter()
            .zip(&v)
            .map(|(a, b)| 0.5 * a / nu + (0.75f64).sqrt() * b / nv)
            .collect();
        let (r, p) = pearson(&x, &y).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        assert!((p - 0.097_854_614_257_8).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn report_serializes_table_columns() {
        let row = score_system("S2S", &[toks("a b c d")], &[toks("a b c d")]).unwrap();
        let json = serde_json::to_value(MetricReport { rows: vec![row] }).unwrap();
        let keys: Vec<&String> = json["rows"][0].as_object().unwrap().keys().collect();
        for k in ["BLEU-4", "ROUGE-2", "Distinct-2"] {
            assert!(keys.iter().any(|x| *x == k));
        }
    }
}
