//! Pairwise max-margin reranking of beam candidates by their evaluator
//! outputs, supervised with preference pairs mined by sentence BLEU.

use std::io::Write;
use std::path::Path;

use dialogeval_tape::{Adam, Bindings, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, RERANKER_NAMESPACE};
use crate::corpus::Turn;
use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, NUM_HEADS};
use crate::generator::NBestList;
use crate::metrics::bleu4_sentence;
use crate::nn::{Linear, Mlp};
use crate::text::Vocabulary;

pub const INPUT_DIM: usize = 2 * NUM_HEADS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankerConfig {
    pub layers: usize,
    pub hidden: usize,
    pub input_dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 16,
            input_dim: INPUT_DIM,
            margin: 1.0,
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 20,
        }
    }
}

impl RerankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != INPUT_DIM {
            return Err(Error::Config(format!(
                "reranker input_dim must be {INPUT_DIM} (two probabilities per head)"
            )));
        }
        if self.layers == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::Config("reranker sizes must be positive".into()));
        }
        if self.margin <= 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "reranker margin and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A candidate preferred over another by sentence BLEU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: Vec<f64>,
    pub loser: Vec<f64>,
    pub bleu_w: f64,
    pub bleu_l: f64,
}

/// One pair per unordered candidate pair with distinct BLEU; ties are
/// dropped.
pub fn pairs_from_scored(features: &[Vec<f64>], bleu: &[f64]) -> Result<Vec<PreferencePair>> {
    if features.is_empty() {
        return Err(Error::Empty("no candidates to mine".into()));
    }
    if features.len() != bleu.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows vs {} BLEU scores",
            features.len(),
            bleu.len()
        )));
    }
    let mut out = Vec::new();
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let (w, l) = if bleu[i] > bleu[j] {
                (i, j)
            } else if bleu[j] > bleu[i] {
                (j, i)
            } else {
                continue;
            };
            out.push(PreferencePair {
                winner: features[w].clone(),
                loser: features[l].clone(),
                bleu_w: bleu[w],
                bleu_l: bleu[l],
            });
        }
    }
    Ok(out)
}

/// Candidate responses as token strings.
pub fn candidate_tokens(nbest: &NBestList, vocab: &Vocabulary) -> Vec<Vec<String>> {
    nbest
        .candidates
        .iter()
        .map(|c| vocab.decode(&c.tokens))
        .collect()
}

/// Flattened evaluator outputs for each candidate placed as the system
/// response of `turn`.
pub fn candidate_features(
    candidates: &[Vec<String>],
    evaluator: &Evaluator,
    turn: &Turn,
    context: &[Turn],
) -> Result<Vec<Vec<f64>>> {
    let examples = candidates
        .iter()
        .map(|c| evaluator.example(&turn.with_system(c.join(" ")), context))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluator
        .predict(&examples)?
        .iter()
        .map(|o| o.flatten().to_vec())
        .collect())
}

/// Scores every candidate by smoothed sentence BLEU against `reference`
/// and emits all strict preferences.
pub fn mine_pairs(
    nbest: &NBestList,
    vocab: &Vocabulary,
    reference: &[String],
    evaluator: &Evaluator,
    turn: &Turn,
    context: &[Turn],
) -> Result<Vec<PreferencePair>> {
    if nbest.is_empty() {
        return Err(Error::Empty("empty n-best list".into()));
    }
    let cands = candidate_tokens(nbest, vocab);
    let bleu = cands
        .iter()
        .map(|c| bleu4_sentence(c, reference))
        .collect::<Result<Vec<_>>>()?;
    let feats = candidate_features(&cands, evaluator, turn, context)?;
    pairs_from_scored(&feats, &bleu)
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                line: i + 1,
                field: "pair".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Feed-forward scorer over the 8 evaluator probabilities.
#[derive(Clone, Debug)]
pub struct Reranker {
    pub config: RerankerConfig,
    pub store: ParamStore,
    trunk: Mlp,
    out: Linear,
}

impl Reranker {
    pub fn new(config: RerankerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::with_namespace(RERANKER_NAMESPACE);
        let trunk = Mlp::new(
            &mut store,
            "trunk",
            config.input_dim,
            config.hidden,
            config.layers,
            &mut rng,
        );
        let out = Linear::new(&mut store, "score", config.hidden, 1, &mut rng);
        Ok(Self {
            config,
            store,
            trunk,
            out,
        })
    }

    /// `n x 1` scores for an `n x 8` input.
    pub fn forward(&self, t: &mut Tape, b: &Bindings, x: Var) -> Var {
        let h = self.trunk.forward(t, b, x, None);
        self.out.forward(t, b, h)
    }

    pub fn score_all(&self, features: &[Vec<f64>]) -> Vec<f64> {
        if features.is_empty() {
            return Vec::new();
        }
        let mut t = Tape::new();
        let b = t.bind(&self.store, false);
        let x = t.leaf(Tensor::from_rows(features));
        let s = self.forward(&mut t, &b, x);
        t.value(s).data().to_vec()
    }

    pub fn score(&self, features: &[f64]) -> f64 {
        self.score_all(&[features.to_vec()])[0]
    }

    /// Mean hinge loss `max(0, margin - (s_w - s_l))` on the tape.
    pub fn hinge_loss(&self, t: &mut Tape, b: &Bindings, pairs: &[&PreferencePair]) -> Var {
        let w: Vec<Vec<f64>> = pairs.iter().map(|p| p.winner.clone()).collect();
        let l: Vec<Vec<f64>> = pairs.iter().map(|p| p.loser.clone()).collect();
        let wx = t.leaf(Tensor::from_rows(&w));
        let lx = t.leaf(Tensor::from_rows(&l));
        let sw = self.forward(t, b, wx);
        let sl = self.forward(t, b, lx);
        let diff = t.sub(sl, sw);
        let shifted = t.add_scalar(diff, self.config.margin);
        let hinge = t.relu(shifted);
        t.mean(hinge)
    }

    pub fn loss(&self, pairs: &[PreferencePair]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let mut t = Tape::new();
        let b = t.bind(&self.store, false);
        let l = self.hinge_loss(&mut t, &b, &refs);
        t.value(l).item()
    }

    /// Fraction of pairs whose winner scores strictly higher.
    pub fn pairwise_accuracy(&self, pairs: &[PreferencePair]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let w = self.score_all(&pairs.iter().map(|p| p.winner.clone()).collect::<Vec<_>>());
        let l = self.score_all(&pairs.iter().map(|p| p.loser.clone()).collect::<Vec<_>>());
        w.iter().zip(&l).filter(|(a, b)| a > b).count() as f64 / pairs.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::ensure_dir(dir)?;
        checkpoint::write_json(&dir.join(checkpoint::CONFIG_FILE), &self.config)?;
        checkpoint::write_params(&dir.join(checkpoint::PARAMS_FILE), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        checkpoint::require(&dir.join(checkpoint::PARAMS_FILE), "train-reranker")?;
        let config: RerankerConfig = checkpoint::read_json(&dir.join(checkpoint::CONFIG_FILE))?;
        let params = checkpoint::read_params(&dir.join(checkpoint::PARAMS_FILE))?;
        let mut r = Self::new(config, 0)?;
        r.store.load_matching(&params)?;
        Ok(r)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankerLog {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

pub fn train_reranker(
    pairs: &[PreferencePair],
    config: &RerankerConfig,
    seed: u64,
) -> Result<(Reranker, RerankerLog)> {
    if pairs.is_empty() {
        return Err(Error::Empty("no preference pairs to train on".into()));
    }
    if let Some(p) = pairs
        .iter()
        .find(|p| p.winner.len() != config.input_dim || p.loser.len() != config.input_dim)
    {
        return Err(Error::Dimension(format!(
            "pair features have {} and {} entries, expected {}",
            p.winner.len(),
            p.loser.len(),
            config.input_dim
        )));
    }
    let mut model = Reranker::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a4a);
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = RerankerLog::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let mut t = Tape::new();
            let b = t.bind(&model.store, true);
            let loss = model.hinge_loss(&mut t, &b, &batch);
            total += t.value(loss).item() * batch.len() as f64;
            let grads = t.backward(loss);
            adam.step(&mut model.store, &grads);
        }
        log.epoch_loss.push(total / pairs.len() as f64);
    }
    log.train_accuracy = model.pairwise_accuracy(pairs);
    Ok((model, log))
}

/// Index of the highest score; ties go to the higher beam score, then to
/// the earlier rank.
pub fn select_best(scores: &[f64], beam_scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..scores.len() {
        best = match best {
            None => Some(i),
            Some(j)
                if scores[i] > scores[j]
                    || (scores[i] == scores[j] && beam_scores[i] > beam_scores[j]) =>
            {
                Some(i)
            }
            keep => keep,
        };
    }
    best
}

/// Picks the candidate the reranker scores highest; ties go to the better
/// beam rank.
pub fn rerank(nbest: &NBestList, features: &[Vec<f64>], reranker: &Reranker) -> Result<usize> {
    if nbest.is_empty() {
        return Err(Error::Empty("cannot rerank an empty n-best list".into()));
    }
    let scores = reranker.score_all(features);
    // The list is best first under whatever key the beam ranked by.
    let rank: Vec<f64> = (0..nbest.len()).map(|i| -(i as f64)).collect();
    Ok(select_best(&scores, &rank).expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Candidate;

    fn feats(x: f64) -> Vec<f64> {
        vec![x; INPUT_DIM]
    }

    #[test]
    fn pair_counts() {
        let f: Vec<Vec<f64>> = (0..15).map(|i| feats(i as f64)).collect();
        let bleu: Vec<f64> = (0..15).map(|i| i as f64 / 20.0).collect();
        assert_eq!(pairs_from_scored(&f, &bleu).unwrap().len(), 105);
        assert!(pairs_from_scored(&f[..2], &[0.3, 0.3]).unwrap().is_empty());
        let p = pairs_from_scored(&f[..2], &[0.1, 0.4]).unwrap();
        assert_eq!(p[0].winner, f[1]);
        assert!(pairs_from_scored(&[], &[]).is_err());
    }

    #[test]
    fn hinge_at_equal_scores_is_margin() {
        let r = Reranker::new(RerankerConfig::default(), 1).unwrap();
        let p = PreferencePair {
            winner: feats(0.2),
            loser: feats(0.2),
            bleu_w: 0.5,
            bleu_l: 0.1,
        };
        assert!((r.loss(&[p]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tie_breaks() {
        assert_eq!(select_best(&[0.2, 0.9, 0.1], &[0.0, -1.0, -2.0]), Some(1));
        assert_eq!(select_best(&[0.5, 0.5, 0.5], &[-1.0, -2.0, -3.0]), Some(0));
        assert_eq!(select_best(&[0.5, 0.5], &[-2.0, -1.0]), Some(1));
        assert_eq!(select_best(&[0.5, 0.5], &[-1.0, -1.0]), Some(0));
        let nb = NBestList {
            candidates: vec![Candidate {
                tokens: vec![5],
                score: -1.0,
                finished: true,
            }],
        };
        let r = Reranker::new(RerankerConfig::default(), 1).unwrap();
        assert_eq!(rerank(&nb, &[feats(0.3)], &r).unwrap(), 0);
    }

    #[test]
    fn pairs_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let pairs = vec![PreferencePair {
            winner: feats(0.25),
            loser: feats(0.75),
            bleu_w: 0.5,
            bleu_l: 0.125,
        }];
        save_pairs(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"winner\":"));
        assert_eq!(load_pairs(&path).unwrap(), pairs);
    }
}
