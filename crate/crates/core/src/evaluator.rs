//! The four-head turn evaluator: an LSTM over the interleaved user/system
//! embeddings of recent turns, fused with the current turn's embeddings and
//! hand-crafted features, feeding a shared feed-forward trunk and one
//! two-way softmax per judgment.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use dialogeval_tape::{Adam, Bindings, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, EVALUATOR_NAMESPACE};
use crate::corpus::{Dialog, Turn};
use crate::encoders::{SentenceEmbedding, SentenceEncoder};
use crate::error::{Error, Result};
use crate::features::{
    DialogActInventory, FeatureExtractor, FeatureLayout, FeatureVector, Gazetteer, RuleTagger,
    CONTEXT_TURNS,
};
use crate::metrics::{mcc, pearson, ConfusionCounts};
use crate::nn::{dropout_mask, Linear, Lstm, Mlp};

pub const HEADS: [&str; 4] = ["comprehensible", "on_topic", "interesting", "continue"];
pub const NUM_HEADS: usize = 4;

const LAYOUT_FILE: &str = "layout.json";
const GAZETTEER_FILE: &str = "gazetteer.txt";
const ENCODER_DIR: &str = "encoder";

fn all_heads() -> [bool; NUM_HEADS] {
    [true; NUM_HEADS]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluatorConfig {
    pub context_turns: usize,
    pub context_hidden: usize,
    pub ffnn_layers: usize,
    pub ffnn_hidden: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without dev-loss improvement before stopping.
    pub patience: usize,
    pub threshold: f64,
    /// `false` drops the hand-crafted features (embeddings only).
    pub use_features: bool,
    pub unfreeze_encoder: bool,
    /// Heads whose loss is trained; all four for the joint model.
    #[serde(default = "all_heads")]
    pub trained_heads: [bool; NUM_HEADS],
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            context_turns: CONTEXT_TURNS,
            context_hidden: 256,
            ffnn_layers: 3,
            ffnn_hidden: 256,
            dropout: 0.3,
            batch_size: 128,
            learning_rate: 5e-5,
            max_epochs: 100,
            patience: 5,
            threshold: 0.5,
            use_features: true,
            unfreeze_encoder: false,
            trained_heads: all_heads(),
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.context_turns,
            self.context_hidden,
            self.ffnn_layers,
            self.ffnn_hidden,
            self.batch_size,
            self.max_epochs,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("evaluator sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "dropout must be in [0, 1) and learning rate > 0".into(),
            ));
        }
        if !self.trained_heads.iter().any(|&h| h) {
            return Err(Error::Config("at least one head must be trained".into()));
        }
        Ok(())
    }
}

/// `(p_no, p_yes)` for each head, in [`HEADS`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorOutput {
    pub heads: [[f64; 2]; NUM_HEADS],
}

impl EvaluatorOutput {
    pub fn yes(&self) -> [f64; NUM_HEADS] {
        self.heads.map(|h| h[1])
    }

    /// `p_no, p_yes` per head, concatenated: the reranker's input.
    pub fn flatten(&self) -> [f64; 2 * NUM_HEADS] {
        let mut out = [0.0; 2 * NUM_HEADS];
        for (i, h) in self.heads.iter().enumerate() {
            out[2 * i] = h[0];
            out[2 * i + 1] = h[1];
        }
        out
    }

    pub fn predictions(&self, threshold: f64) -> [bool; NUM_HEADS] {
        self.yes().map(|p| p >= threshold)
    }

    /// Head name to yes-probability, for reports and the command line.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = HEADS
            .iter()
            .zip(self.yes())
            .map(|(h, p)| (h.to_string(), serde_json::json!(p)))
            .collect();
        serde_json::Value::Object(map)
    }
}

/// One turn prepared for the evaluator. Embeddings are cached for frozen
/// encoders; token ids are kept for training with an unfrozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalExample {
    /// Interleaved `u, s, u, s, ...` for up to five previous turns.
    pub history: Vec<SentenceEmbedding>,
    pub user: SentenceEmbedding,
    pub system: SentenceEmbedding,
    pub history_ids: Vec<Vec<usize>>,
    pub user_ids: Vec<usize>,
    pub system_ids: Vec<usize>,
    pub features: FeatureVector,
    pub labels: Option<[bool; NUM_HEADS]>,
    pub rating: Option<u8>,
}

/// Per-example tape inputs for a batched forward pass.
#[derive(Debug, Default)]
pub struct EvalInputs {
    pub history: Vec<Vec<Var>>,
    pub user: Vec<Var>,
    pub system: Vec<Var>,
    pub features: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Evaluator {
    pub config: EvaluatorConfig,
    pub encoder: SentenceEncoder,
    pub extractor: FeatureExtractor,
    pub store: ParamStore,
    context: Lstm,
    trunk: Mlp,
    heads: Vec<Linear>,
}

impl Evaluator {
    pub fn new(
        config: EvaluatorConfig,
        encoder: SentenceEncoder,
        extractor: FeatureExtractor,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::with_namespace(EVALUATOR_NAMESPACE);
        let d = encoder.output_dim();
        let context = Lstm::new(&mut store, "context", d, config.context_hidden, &mut rng);
        let feature_dim = if config.use_features {
            extractor.dim()
        } else {
            0
        };
        let input = config.context_hidden + 2 * d + feature_dim;
        let trunk = Mlp::new(
            &mut store,
            "trunk",
            input,
            config.ffnn_hidden,
            config.ffnn_layers,
            &mut rng,
        );
        let heads = HEADS
            .iter()
            .map(|h| {
                Linear::new(
                    &mut store,
                    &format!("head.{h}"),
                    config.ffnn_hidden,
                    2,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            extractor,
            store,
            context,
            trunk,
            heads,
        })
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.extractor.layout
    }

    /// Zeroes every head's weights and bias, so all outputs are (0.5, 0.5).
    pub fn zero_output_layers(&mut self) {
        for h in &self.heads {
            let (w, b) = (h.weight, h.bias);
            self.store.get_mut(w).scale_in_place(0.0);
            self.store.get_mut(b).scale_in_place(0.0);
        }
    }

    /// Featurizes `turn` given the dialog turns before it.
    pub fn example(&self, turn: &Turn, context: &[Turn]) -> Result<EvalExample> {
        let start = context.len().saturating_sub(self.config.context_turns);
        let window = &context[start..];
        let mut history = Vec::with_capacity(2 * window.len());
        let mut history_ids = Vec::with_capacity(2 * window.len());
        for t in window {
            for tokens in [&t.user_tokens, &t.system_tokens] {
                history.push(self.encoder.encode(tokens));
                history_ids.push(self.encoder.token_ids(tokens));
            }
        }
        let user = self.encoder.encode(&turn.user_tokens);
        let system = self.encoder.encode(&turn.system_tokens);
        let features = self.extractor.build(turn, window, &user, &system)?;
        Ok(EvalExample {
            history,
            user,
            system,
            history_ids,
            user_ids: self.encoder.token_ids(&turn.user_tokens),
            system_ids: self.encoder.token_ids(&turn.system_tokens),
            features,
            labels: None,
            rating: None,
        })
    }

    /// Examples for every annotated turn, in corpus order.
    pub fn build_examples(&self, dialogs: &[&Dialog]) -> Result<Vec<EvalExample>> {
        let per_dialog: Vec<Result<Vec<EvalExample>>> = dialogs
            .par_iter()
            .map(|d| {
                let Some(annotations) = &d.annotations else {
                    return Ok(Vec::new());
                };
                d.turns
                    .iter()
                    .enumerate()
                    .map(|(i, turn)| {
                        let mut ex = self.example(turn, &d.turns[..i])?;
                        ex.labels = Some(annotations[i].bits());
                        ex.rating = annotations[i].scalar_rating;
                        Ok(ex)
                    })
                    .collect()
            })
            .collect();
        let mut out = Vec::new();
        for r in per_dialog {
            out.extend(r?);
        }
        Ok(out)
    }

    fn check_features(&self, f: &FeatureVector) -> Result<()> {
        if f.dim() != self.layout().dim {
            return Err(Error::Dimension(format!(
                "feature vector has {} entries, layout expects {}",
                f.dim(),
                self.layout().dim
            )));
        }
        Ok(())
    }

    /// Leaf inputs from cached embeddings, or encoder forward passes when
    /// `encoder` bindings are given.
    pub fn inputs(
        &self,
        t: &mut Tape,
        encoder: Option<&Bindings>,
        batch: &[&EvalExample],
    ) -> EvalInputs {
        let mut inp = EvalInputs::default();
        let embed = |t: &mut Tape, cached: &SentenceEmbedding, ids: &[usize]| match encoder {
            Some(b) => self.encoder.forward_ids(t, b, ids),
            None => t.leaf(Tensor::row_vector(cached.values.clone())),
        };
        for ex in batch {
            let hist = ex
                .history
                .iter()
                .zip(&ex.history_ids)
                .map(|(e, ids)| embed(t, e, ids))
                .collect();
            inp.history.push(hist);
            inp.user.push(embed(t, &ex.user, &ex.user_ids));
            inp.system.push(embed(t, &ex.system, &ex.system_ids));
            inp.features
                .push(Tensor::row_vector(ex.features.values.clone()));
        }
        inp
    }

    /// Runs the context LSTM over every example's history at once. Rows
    /// whose history has ended keep their state exactly.
    pub fn encode_context_vars(&self, t: &mut Tape, b: &Bindings, history: &[Vec<Var>]) -> Var {
        let n = history.len();
        let hdim = self.config.context_hidden;
        let d = self.encoder.output_dim();
        let mut h = t.leaf(Tensor::zeros(n, hdim));
        let mut c = t.leaf(Tensor::zeros(n, hdim));
        let steps = history.iter().map(Vec::len).max().unwrap_or(0);
        for k in 0..steps {
            let rows: Vec<Var> = history
                .iter()
                .map(|hist| match hist.get(k) {
                    Some(&v) => v,
                    None => t.leaf(Tensor::zeros(1, d)),
                })
                .collect();
            let x = t.concat_rows(&rows);
            let (h2, c2) = self.context.step(t, b, x, (h, c));
            if history.iter().all(|hist| hist.len() > k) {
                (h, c) = (h2, c2);
                continue;
            }
            let mut keep_new = Tensor::zeros(n, hdim);
            for (i, hist) in history.iter().enumerate() {
                if hist.len() > k {
                    keep_new.row_mut(i).fill(1.0);
                }
            }
            let keep_old = keep_new.map(|m| 1.0 - m);
            let hn = t.mul_const(h2, keep_new.clone());
            let ho = t.mul_const(h, keep_old.clone());
            h = t.add(hn, ho);
            let cn = t.mul_const(c2, keep_new);
            let co = t.mul_const(c, keep_old);
            c = t.add(cn, co);
        }
        h
    }

    /// Final LSTM state over interleaved history embeddings; zero when the
    /// history is empty.
    pub fn encode_context(&self, history: &[SentenceEmbedding]) -> Vec<f64> {
        let mut t = Tape::new();
        let b = t.bind(&self.store, false);
        let vars = history
            .iter()
            .map(|e| t.leaf(Tensor::row_vector(e.values.clone())))
            .collect();
        let h = self.encode_context_vars(&mut t, &b, &[vars]);
        t.value(h).data().to_vec()
    }

    /// `B x 2` logits per head. Dropout is applied only when `rng` is given.
    pub fn head_logits(
        &self,
        t: &mut Tape,
        b: &Bindings,
        inp: &EvalInputs,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<Var> {
        let n = inp.user.len();
        let ctx = self.encode_context_vars(t, b, &inp.history);
        let user = t.concat_rows(&inp.user);
        let system = t.concat_rows(&inp.system);
        let mut parts = vec![ctx, user, system];
        if self.config.use_features {
            let rows: Vec<Vec<f64>> = inp.features.iter().map(|f| f.data().to_vec()).collect();
            parts.push(t.leaf(Tensor::from_rows(&rows)));
        }
        let x = t.concat_cols(&parts);
        let masks = rng.map(|rng| {
            (0..self.config.ffnn_layers)
                .map(|_| dropout_mask(rng, n, self.config.ffnn_hidden, self.config.dropout))
                .collect::<Vec<_>>()
        });
        let hidden = self.trunk.forward(t, b, x, masks.as_deref());
        self.heads.iter().map(|h| h.forward(t, b, hidden)).collect()
    }

    /// Sum over trained heads of the batch-mean cross-entropy.
    fn joint_loss(&self, t: &mut Tape, logits: &[Var], batch: &[&EvalExample]) -> Var {
        let mut terms = Vec::new();
        for (h, &l) in logits.iter().enumerate() {
            if !self.config.trained_heads[h] {
                continue;
            }
            let targets: Vec<usize> = batch
                .iter()
                .map(|ex| usize::from(ex.labels.expect("labeled example")[h]))
                .collect();
            let lp = t.log_softmax_rows(l);
            let picked = t.pick_per_row(lp, &targets);
            let s = t.sum(picked);
            terms.push(t.scale(s, -1.0 / batch.len() as f64));
        }
        let mut total = terms[0];
        for &x in &terms[1..] {
            total = t.add(total, x);
        }
        total
    }

    /// Outputs for precomputed examples (inference mode).
    pub fn predict(&self, examples: &[EvalExample]) -> Result<Vec<EvaluatorOutput>> {
        for ex in examples {
            self.check_features(&ex.features)?;
        }
        let chunks: Vec<Vec<EvaluatorOutput>> = examples
            .par_chunks(self.config.batch_size.max(1))
            .map(|chunk| {
                let batch: Vec<&EvalExample> = chunk.iter().collect();
                let mut t = Tape::new();
                let b = t.bind(&self.store, false);
                let inp = self.inputs(&mut t, None, &batch);
                let logits = self.head_logits(&mut t, &b, &inp, None);
                outputs_from_logits(&t, &logits)
            })
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn evaluate_example(&self, ex: &EvalExample) -> Result<EvaluatorOutput> {
        Ok(self.predict(std::slice::from_ref(ex))?[0])
    }

    pub fn evaluate_turn(&self, turn: &Turn, context: &[Turn]) -> Result<EvaluatorOutput> {
        self.evaluate_example(&self.example(turn, context)?)
    }

    /// Mean joint loss over labeled examples, without dropout.
    pub fn loss(&self, examples: &[EvalExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let sums: Vec<f64> = examples
            .par_chunks(self.config.batch_size.max(1))
            .map(|chunk| {
                let batch: Vec<&EvalExample> = chunk.iter().collect();
                let mut t = Tape::new();
                let b = t.bind(&self.store, false);
                let inp = self.inputs(&mut t, None, &batch);
                let logits = self.head_logits(&mut t, &b, &inp, None);
                let l = self.joint_loss(&mut t, &logits, &batch);
                t.value(l).item() * batch.len() as f64
            })
            .collect();
        sums.iter().sum::<f64>() / examples.len() as f64
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::ensure_dir(dir)?;
        checkpoint::write_json(&dir.join(checkpoint::CONFIG_FILE), &self.config)?;
        checkpoint::write_json(&dir.join(LAYOUT_FILE), self.layout())?;
        checkpoint::write_params(&dir.join(checkpoint::PARAMS_FILE), &self.store)?;
        let mut names = self.extractor.gazetteer.names().join("\n");
        if !names.is_empty() {
            names.push('\n');
        }
        let path = dir.join(GAZETTEER_FILE);
        std::fs::write(&path, names).map_err(|e| Error::io(&path, e))?;
        self.encoder.save(&dir.join(ENCODER_DIR))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: EvaluatorConfig = checkpoint::read_json(&dir.join(checkpoint::CONFIG_FILE))?;
        let layout: FeatureLayout = checkpoint::read_json(&dir.join(LAYOUT_FILE))?;
        let gazetteer = Gazetteer::load(&dir.join(GAZETTEER_FILE))?;
        let inventory = DialogActInventory::new(layout.acts.clone())?;
        let extractor = FeatureExtractor::new(inventory, Arc::new(RuleTagger), gazetteer);
        if extractor.layout != layout {
            return Err(Error::Dimension(format!(
                "feature layout in {} does not match this build ({} vs {} entries)",
                dir.display(),
                layout.dim,
                extractor.layout.dim
            )));
        }
        let encoder = SentenceEncoder::load(&dir.join(ENCODER_DIR))?;
        let params = checkpoint::read_params(&dir.join(checkpoint::PARAMS_FILE))?;
        let mut ev = Self::new(config, encoder, extractor, 0)?;
        ev.store.load_matching(&params)?;
        Ok(ev)
    }
}

fn outputs_from_logits(t: &Tape, logits: &[Var]) -> Vec<EvaluatorOutput> {
    let probs: Vec<Tensor> = logits
        .iter()
        .map(|&l| dialogeval_tape::tape::softmax_rows(t.value(l)))
        .collect();
    (0..probs[0].rows())
        .map(|i| EvaluatorOutput {
            heads: std::array::from_fn(|h| [probs[h].get(i, 0), probs[h].get(i, 1)]),
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorLog {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

/// Trains the evaluator on the annotated turns of `train`, stopping early
/// on the dev loss and restoring the best parameters. With an empty dev set
/// the training loss drives early stopping.
pub fn train_evaluator(
    train: &[&Dialog],
    dev: &[&Dialog],
    encoder: SentenceEncoder,
    extractor: FeatureExtractor,
    config: &EvaluatorConfig,
    seed: u64,
) -> Result<(Evaluator, EvaluatorLog)> {
    let mut ev = Evaluator::new(config.clone(), encoder, extractor, seed)?;
    let train_ex = ev.build_examples(train)?;
    let dev_ex = ev.build_examples(dev)?;
    let log = fit_evaluator(&mut ev, &train_ex, &dev_ex, seed)?;
    Ok((ev, log))
}

/// Trains an already built evaluator on prepared examples.
pub fn fit_evaluator(
    ev: &mut Evaluator,
    train: &[EvalExample],
    dev: &[EvalExample],
    seed: u64,
) -> Result<EvaluatorLog> {
    if train.is_empty() {
        return Err(Error::Empty(
            "no annotated turns to train the evaluator".into(),
        ));
    }
    let mut log = EvaluatorLog::default();
    for (h, name) in HEADS.iter().enumerate() {
        let yes = train
            .iter()
            .filter(|e| e.labels.is_some_and(|l| l[h]))
            .count();
        if yes == 0 || yes == train.len() {
            let msg = format!("head {name} has a single class in the training data");
            log::warn!("{msg}");
            log.warnings.push(msg);
        }
    }
    let cfg = ev.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut enc_adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, ev.store.clone(), ev.encoder.store.clone());
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EvalExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut t = Tape::new();
            let b = t.bind(&ev.store, true);
            let eb = cfg
                .unfreeze_encoder
                .then(|| t.bind(&ev.encoder.store, true));
            let inp = ev.inputs(&mut t, eb.as_ref(), &batch);
            let logits = ev.head_logits(&mut t, &b, &inp, Some(&mut rng));
            let loss = ev.joint_loss(&mut t, &logits, &batch);
            total += t.value(loss).item() * batch.len() as f64;
            let grads = t.backward(loss);
            adam.step(&mut ev.store, &grads);
            if cfg.unfreeze_encoder {
                enc_adam.step(&mut ev.encoder.store, &grads);
            }
        }
        if !ev.store.all_finite() {
            return Err(Error::InvalidArgument(
                "evaluator parameters diverged".into(),
            ));
        }
        log.train_loss.push(total / train.len() as f64);
        let monitored = if dev.is_empty() {
            ev.loss(train)
        } else {
            ev.loss(dev)
        };
        log.dev_loss.push(monitored);
        if monitored < best.0 {
            best = (monitored, ev.store.clone(), ev.encoder.store.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    ev.store = best.1;
    ev.encoder.store = best.2;
    Ok(log)
}

/// Table-style classification scores for one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    #[serde(rename = "Head")]
    pub head: String,
    #[serde(rename = "Yes Class Distr.")]
    pub yes_share: f64,
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F-score")]
    pub f_score: f64,
    #[serde(rename = "MCC")]
    pub mcc: f64,
}

/// Thresholds each head's yes-probability and scores it against labels.
pub fn evaluator_metrics(
    outputs: &[EvaluatorOutput],
    labels: &[[bool; NUM_HEADS]],
    threshold: f64,
) -> Result<Vec<HeadMetrics>> {
    if outputs.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    if outputs.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    HEADS
        .iter()
        .enumerate()
        .map(|(h, name)| {
            let pred: Vec<bool> = outputs.iter().map(|o| o.yes()[h] >= threshold).collect();
            let gold: Vec<bool> = labels.iter().map(|l| l[h]).collect();
            let c = ConfusionCounts::from_pairs(&pred, &gold);
            Ok(HeadMetrics {
                head: name.to_string(),
                yes_share: (c.tp + c.fn_) as f64 / c.total() as f64,
                accuracy: c.accuracy(),
                precision: c.precision(),
                recall: c.recall(),
                f_score: c.f_score(),
                mcc: mcc(c)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorReport {
    pub system: String,
    pub heads: Vec<HeadMetrics>,
}

impl fmt::Display for EvaluatorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.system)?;
        writeln!(
            f,
            "{:<15}  {:>16}  {:>8}  {:>9}  {:>6}  {:>7}  {:>6}",
            "Head", "Yes Class Distr.", "Accuracy", "Precision", "Recall", "F-score", "MCC"
        )?;
        for h in &self.heads {
            writeln!(
                f,
                "{:<15}  {:>16.2}  {:>8.2}  {:>9.2}  {:>6.2}  {:>7.2}  {:>6.2}",
                h.head, h.yes_share, h.accuracy, h.precision, h.recall, h.f_score, h.mcc
            )?;
        }
        Ok(())
    }
}

/// Pearson correlation of each head's yes-probability with scalar ratings.
pub fn correlate_with_ratings(
    yes: &[[f64; NUM_HEADS]],
    ratings: &[u8],
) -> Result<[(f64, f64); NUM_HEADS]> {
    if yes.len() != ratings.len() {
        return Err(Error::Dimension(format!(
            "{} probability rows vs {} ratings",
            yes.len(),
            ratings.len()
        )));
    }
    if let Some(r) = ratings.iter().find(|r| !(1..=5).contains(*r)) {
        return Err(Error::InvalidArgument(format!("rating {r} outside 1..=5")));
    }
    let y: Vec<f64> = ratings.iter().map(|&r| f64::from(r)).collect();
    let mut out = [(0.0, 0.0); NUM_HEADS];
    for (h, slot) in out.iter_mut().enumerate() {
        let x: Vec<f64> = yes.iter().map(|p| p[h]).collect();
        *slot = pearson(&x, &y)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EmbeddingInit, EncoderKind, SentenceEncoderConfig};
    use crate::text::Vocabulary;
    use dialogeval_tape::tape::sigmoid;

    fn tiny() -> Evaluator {
        let mut ec = SentenceEncoderConfig::full(EncoderKind::Average);
        ec.word_dim = 6;
        ec.output_dim = 6;
        ec.embedding_init = EmbeddingInit::Random;
        let vocab = Vocabulary::from_tokens(
            ["hi", "there", "what", "music", "do", "you", "like"]
                .iter()
                .map(|s| s.to_string()),
            10,
        );
        let enc = SentenceEncoder::new(ec, vocab, 3).unwrap();
        let cfg = EvaluatorConfig {
            context_hidden: 5,
            ffnn_hidden: 7,
            batch_size: 4,
            ..EvaluatorConfig::default()
        };
        Evaluator::new(cfg, enc, FeatureExtractor::default(), 9).unwrap()
    }

    #[test]
    fn zero_heads_give_one_half() {
        let mut ev = tiny();
        ev.zero_output_layers();
        let out = ev
            .evaluate_turn(&Turn::new(0, "hi", "hi there"), &[])
            .unwrap();
        for h in out.heads {
            assert_eq!(h, [0.5, 0.5]);
        }
    }

    #[test]
    fn pairs_sum_to_one() {
        let ev = tiny();
        let ctx = [Turn::new(0, "hi", "hi there")];
        let out = ev
            .evaluate_turn(&Turn::new(1, "what music", "do you like music"), &ctx)
            .unwrap();
        for h in out.heads {
            assert!((h[0] + h[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_history_encodes_to_zero() {
        let ev = tiny();
        assert_eq!(ev.encode_context(&[]), vec![0.0; 5]);
    }

    #[test]
    fn one_turn_history_is_one_step() {
        let ev = tiny();
        let e = SentenceEmbedding::new(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4]);
        let got = ev.encode_context(std::slice::from_ref(&e));
        let l = &ev.context;
        // Zero initial state, so the hidden-to-hidden weights drop out.
        let (wi, bias) = (ev.store.get(l.w_input), ev.store.get(l.bias));
        let n = l.hidden;
        for j in 0..n {
            let pre = |g: usize| {
                bias.data()[g * n + j]
                    + (0..6)
                        .map(|k| e.values[k] * wi.get(k, g * n + j))
                        .sum::<f64>()
            };
            let c = sigmoid(pre(0)) * pre(2).tanh();
            let h = sigmoid(pre(3)) * c.tanh();
            assert!((got[j] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_context_matches_single() {
        let ev = tiny();
        let mk = |s: f64| SentenceEmbedding::new((0..6).map(|i| (i as f64 * s).sin()).collect());
        let histories = [vec![], vec![mk(1.0)], vec![mk(0.3), mk(0.7), mk(1.1)]];
        let singles: Vec<Vec<f64>> = histories.iter().map(|h| ev.encode_context(h)).collect();
        let mut t = Tape::new();
        let b = t.bind(&ev.store, false);
        let vars: Vec<Vec<Var>> = histories
            .iter()
            .map(|h| {
                h.iter()
                    .map(|e| t.leaf(Tensor::row_vector(e.values.clone())))
                    .collect()
            })
            .collect();
        let out = ev.encode_context_vars(&mut t, &b, &vars);
        for (i, s) in singles.iter().enumerate() {
            assert_eq!(t.value(out).row(i), s.as_slice());
        }
    }

    #[test]
    fn metrics_conventions() {
        let out = |p: f64| EvaluatorOutput {
            heads: [[1.0 - p, p]; 4],
        };
        let outputs: Vec<_> = (0..10).map(|_| out(0.9)).collect();
        let labels: Vec<[bool; 4]> = (0..10).map(|i| [i < 8; 4]).collect();
        let m = evaluator_metrics(&outputs, &labels, 0.5).unwrap();
        assert!((m[0].accuracy - 0.8).abs() < 1e-12);
        assert_eq!(m[0].mcc, 0.0);
        assert!(evaluator_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn ratings_correlation() {
        let ratings = [1u8, 2, 3, 4, 5];
        let yes: Vec<[f64; 4]> = ratings
            .iter()
            .map(|&r| {
                let p = f64::from(r) / 5.0;
                [p, 1.0 - p, p, p]
            })
            .collect();
        let c = correlate_with_ratings(&yes, &ratings).unwrap();
        assert!((c[0].0 - 1.0).abs() < 1e-12);
        assert!((c[1].0 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ev = tiny();
        let dir = tempfile::tempdir().unwrap();
        ev.save(dir.path()).unwrap();
        let back = Evaluator::load(dir.path()).unwrap();
        assert_eq!(back.store, ev.store);
        assert_eq!(back.encoder.store, ev.encoder.store);
        let turn = Turn::new(0, "hi", "what music");
        assert_eq!(
            back.evaluate_turn(&turn, &[]).unwrap(),
            ev.evaluate_turn(&turn, &[]).unwrap()
        );
    }
}
