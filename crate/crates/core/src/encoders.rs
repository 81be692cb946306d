//! Sentence encoders (word-vector average, one-layer transformer, BiLSTM)
//! and their Quick-Thought pretraining.
//!
//! Quick-Thought treats representation learning as classification: each
//! sentence must pick out its true successor among the successors of every
//! other sentence in the batch, scored by the inner product of the two
//! embeddings. Negatives are the other in-batch candidates.

use std::collections::BTreeMap;
use std::path::Path;

use dialogeval_tape::{Adam, Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ENCODER_NAMESPACE};
use crate::corpus::Dialog;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Linear, Lstm};
use crate::text::{build_vocabulary, init_embeddings, EmbeddingSource, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Average,
    Transformer,
    Bilstm,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Self::Average),
            "transformer" => Ok(Self::Transformer),
            "bilstm" => Ok(Self::Bilstm),
            _ => Err(Error::UnknownLabel {
                label: s.to_string(),
                inventory: "encoder kinds".into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingInit {
    Random,
    SubwordHash,
    Pretrained(std::path::PathBuf),
}

impl EmbeddingInit {
    fn source(&self) -> EmbeddingSource {
        match self {
            Self::Random => EmbeddingSource::Random,
            Self::SubwordHash => EmbeddingSource::SubwordHash,
            Self::Pretrained(p) => EmbeddingSource::Pretrained(p.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SentenceEncoderConfig {
    pub kind: EncoderKind,
    pub word_dim: usize,
    pub output_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub embedding_init: EmbeddingInit,
}

impl Default for SentenceEncoderConfig {
    fn default() -> Self {
        Self::full(EncoderKind::Transformer)
    }
}

impl SentenceEncoderConfig {
    /// Full-size settings: 300-d words; 600-d transformer and BiLSTM outputs.
    pub fn full(kind: EncoderKind) -> Self {
        Self {
            kind,
            word_dim: 300,
            output_dim: match kind {
                EncoderKind::Average => 300,
                _ => 600,
            },
            layers: 1,
            heads: 8,
            batch_size: 400,
            learning_rate: 5e-4,
            max_len: 64,
            vocab_size: 30_000,
            embedding_init: EmbeddingInit::SubwordHash,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.word_dim == 0 || self.output_dim == 0 || self.max_len == 0 || self.batch_size < 2 {
            return bad(
                "encoder dimensions, max_len and batch_size must be positive (batch >= 2)".into(),
            );
        }
        if self.layers != 1 {
            return bad(format!(
                "only 1-layer encoders are supported, got {}",
                self.layers
            ));
        }
        match self.kind {
            EncoderKind::Average if self.output_dim != self.word_dim => {
                bad("average encoder output_dim must equal word_dim".into())
            }
            EncoderKind::Bilstm if self.output_dim % 2 != 0 => {
                bad("bilstm output_dim must be even (two directions)".into())
            }
            EncoderKind::Transformer if self.output_dim % self.heads != 0 => bad(format!(
                "transformer output_dim {} not divisible by {} heads",
                self.output_dim, self.heads
            )),
            _ => Ok(()),
        }
    }
}

/// A fixed-length sentence vector with its cached L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceEmbedding {
    pub values: Vec<f64>,
    pub norm: f64,
}

impl SentenceEmbedding {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug)]
struct TransformerLayers {
    input: Linear,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm1_gain: ParamId,
    norm1_bias: ParamId,
    ff1: Linear,
    ff2: Linear,
    norm2_gain: ParamId,
    norm2_bias: ParamId,
}

#[derive(Clone, Debug)]
enum Layers {
    Average,
    Transformer(Box<TransformerLayers>),
    Bilstm { forward: Lstm, backward: Lstm },
}

/// A sentence encoder with its own vocabulary and word-embedding table.
#[derive(Clone, Debug)]
pub struct SentenceEncoder {
    pub config: SentenceEncoderConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    embedding: ParamId,
    layers: Layers,
    positions: Tensor,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl SentenceEncoder {
    /// Fresh encoder; word vectors come from `config.embedding_init`.
    pub fn new(config: SentenceEncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let table = init_embeddings(
            &vocab,
            config.word_dim,
            &config.embedding_init.source(),
            seed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut store = ParamStore::with_namespace(ENCODER_NAMESPACE);
        let embedding = store.add("embedding", table.matrix);
        let (w, d) = (config.word_dim, config.output_dim);
        let layers = match config.kind {
            EncoderKind::Average => Layers::Average,
            EncoderKind::Transformer => Layers::Transformer(Box::new(TransformerLayers {
                input: Linear::new(&mut store, "tf.input", w, d, &mut rng),
                query: Linear::new(&mut store, "tf.query", d, d, &mut rng),
                key: Linear::new(&mut store, "tf.key", d, d, &mut rng),
                value: Linear::new(&mut store, "tf.value", d, d, &mut rng),
                output: Linear::new(&mut store, "tf.output", d, d, &mut rng),
                norm1_gain: store.add("tf.norm1.gain", Tensor::filled(1, d, 1.0)),
                norm1_bias: store.add("tf.norm1.bias", Tensor::zeros(1, d)),
                ff1: Linear::new(&mut store, "tf.ff1", d, 4 * d, &mut rng),
                ff2: Linear::new(&mut store, "tf.ff2", 4 * d, d, &mut rng),
                norm2_gain: store.add("tf.norm2.gain", Tensor::filled(1, d, 1.0)),
                norm2_bias: store.add("tf.norm2.bias", Tensor::zeros(1, d)),
            })),
            EncoderKind::Bilstm => Layers::Bilstm {
                forward: Lstm::new(&mut store, "lstm.forward", w, d / 2, &mut rng),
                backward: Lstm::new(&mut store, "lstm.backward", w, d / 2, &mut rng),
            },
        };
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Self {
            config,
            vocab,
            store,
            embedding,
            layers,
            positions,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    pub fn word_dim(&self) -> usize {
        self.config.word_dim
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embedding
    }

    /// The `|V| x word_dim` word-vector table.
    pub fn embedding_table(&self) -> &Tensor {
        self.store.get(self.embedding)
    }

    /// Token ids, truncated to `max_len`.
    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let n = tokens.len().min(self.config.max_len);
        self.vocab.encode(&tokens[..n])
    }

    /// Encodes a `len x word_dim` matrix of word vectors. `len` must not
    /// exceed `max_len`; an empty sequence yields the zero vector.
    pub fn forward_embedded(&self, t: &mut Tape, b: &Bindings, words: Var, len: usize) -> Var {
        if len == 0 {
            return t.leaf(Tensor::zeros(1, self.output_dim()));
        }
        debug_assert!(len <= self.config.max_len);
        match &self.layers {
            Layers::Average => {
                let s = t.sum_rows(words);
                t.scale(s, 1.0 / len as f64)
            }
            Layers::Transformer(l) => self.transformer(t, b, l, words, len),
            Layers::Bilstm { forward, backward } => {
                let hf = forward.run(t, b, words);
                let rev: Vec<Var> = (0..len).rev().map(|r| t.row(words, r)).collect();
                let reversed = t.concat_rows(&rev);
                let hb = backward.run(t, b, reversed);
                t.concat_cols(&[hf, hb])
            }
        }
    }

    fn transformer(
        &self,
        t: &mut Tape,
        b: &Bindings,
        l: &TransformerLayers,
        words: Var,
        len: usize,
    ) -> Var {
        let d = self.output_dim();
        let heads = self.config.heads;
        let dh = d / heads;
        let x = l.input.forward(t, b, words);
        let mut pos = Tensor::zeros(len, d);
        pos.data_mut()
            .copy_from_slice(&self.positions.data()[..len * d]);
        let pos = t.leaf(pos);
        let x = t.add(x, pos);

        let q = l.query.forward(t, b, x);
        let k = l.key.forward(t, b, x);
        let v = l.value.forward(t, b, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt);
            let scores = t.scale(scores, scale);
            let attn = t.softmax_rows(scores);
            head_outputs.push(t.matmul(attn, vh));
        }
        let attn = t.concat_cols(&head_outputs);
        let attn = l.output.forward(t, b, attn);
        let x = t.add(x, attn);
        let x = t.layer_norm_rows(x, LAYER_NORM_EPS);
        let x = t.mul_row(x, b[l.norm1_gain]);
        let x = t.add_row(x, b[l.norm1_bias]);

        let ff = l.ff1.forward(t, b, x);
        let ff = t.relu(ff);
        let ff = l.ff2.forward(t, b, ff);
        let x = t.add(x, ff);
        let x = t.layer_norm_rows(x, LAYER_NORM_EPS);
        let x = t.mul_row(x, b[l.norm2_gain]);
        let x = t.add_row(x, b[l.norm2_bias]);

        let pooled = t.sum_rows(x);
        t.scale(pooled, 1.0 / len as f64)
    }

    /// Encodes token ids on an existing tape (ids already truncated).
    pub fn forward_ids(&self, t: &mut Tape, b: &Bindings, ids: &[usize]) -> Var {
        if ids.is_empty() {
            return t.leaf(Tensor::zeros(1, self.output_dim()));
        }
        let words = t.gather_rows(b[self.embedding], ids);
        self.forward_embedded(t, b, words, ids.len())
    }

    /// Inference-mode encoding.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> SentenceEmbedding {
        let ids = self.token_ids(tokens);
        let mut t = Tape::new();
        let b = t.bind(&self.store, false);
        let out = self.forward_ids(&mut t, &b, &ids);
        SentenceEmbedding::new(t.value(out).data().to_vec())
    }

    /// Encodes each sentence independently, so results do not depend on
    /// batch composition.
    pub fn encode_batch<S: AsRef<str> + Sync>(
        &self,
        sentences: &[Vec<S>],
    ) -> Vec<SentenceEmbedding> {
        use rayon::prelude::*;
        sentences.par_iter().map(|s| self.encode(s)).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::ensure_dir(dir)?;
        checkpoint::write_json(&dir.join(checkpoint::CONFIG_FILE), &self.config)?;
        self.vocab.save(dir.join(checkpoint::VOCAB_FILE))?;
        checkpoint::write_params(&dir.join(checkpoint::PARAMS_FILE), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: SentenceEncoderConfig =
            checkpoint::read_json(&dir.join(checkpoint::CONFIG_FILE))?;
        let vocab = Vocabulary::load(dir.join(checkpoint::VOCAB_FILE))?;
        let params = checkpoint::read_params(&dir.join(checkpoint::PARAMS_FILE))?;
        let mut enc = Self::new(config, vocab, 0)?;
        enc.store.load_matching(&params)?;
        Ok(enc)
    }
}

/// Sentences of each dialog in conversational order: u0, s0, u1, s1, ...
pub fn dialog_sentences(d: &Dialog) -> Vec<&[String]> {
    d.turns
        .iter()
        .flat_map(|t| [t.user_tokens.as_slice(), t.system_tokens.as_slice()])
        .collect()
}

/// Adjacent (sentence, successor) pairs across the corpus.
pub fn successor_pairs(dialogs: &[Dialog]) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let mut pairs = Vec::new();
    for d in dialogs {
        let s = dialog_sentences(d);
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "dialog {} has fewer than 2 sentences",
                d.dialog_id
            )));
        }
        for w in s.windows(2) {
            pairs.push((w[0].to_vec(), w[1].to_vec()));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("no successor pairs".into()));
    }
    Ok(pairs)
}

/// Mean cross-entropy of picking the diagonal in each row of a `B x B`
/// score matrix.
pub fn quick_thought_loss(scores: &Tensor) -> f64 {
    let b = scores.rows();
    let mut total = 0.0;
    for i in 0..b {
        let row = scores.row(i);
        total += dialogeval_tape::tape::log_sum_exp(row) - row[i];
    }
    total / b as f64
}

/// Records the in-batch score matrix and loss for one batch of pairs.
fn batch_loss(
    enc: &SentenceEncoder,
    t: &mut Tape,
    b: &Bindings,
    batch: &[&(Vec<String>, Vec<String>)],
) -> (Var, Var) {
    let anchors: Vec<Var> = batch
        .iter()
        .map(|(a, _)| enc.forward_ids(t, b, &enc.token_ids(a)))
        .collect();
    let successors: Vec<Var> = batch
        .iter()
        .map(|(_, s)| enc.forward_ids(t, b, &enc.token_ids(s)))
        .collect();
    let a = t.concat_rows(&anchors);
    let s = t.concat_rows(&successors);
    let st = t.transpose(s);
    let scores = t.matmul(a, st);
    let logp = t.log_softmax_rows(scores);
    let diag: Vec<usize> = (0..batch.len()).collect();
    let picked = t.pick_per_row(logp, &diag);
    let total = t.sum(picked);
    let loss = t.scale(total, -1.0 / batch.len() as f64);
    (loss, scores)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuickThoughtLog {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Builds a vocabulary and encoder from the corpus and pretrains it with the
/// Quick-Thought objective.
pub fn train_quick_thought(
    config: &SentenceEncoderConfig,
    dialogs: &[Dialog],
    epochs: usize,
    seed: u64,
) -> Result<(SentenceEncoder, QuickThoughtLog)> {
    let pairs = successor_pairs(dialogs)?;
    let vocab = build_vocabulary(dialogs, config.vocab_size)?;
    let mut enc = SentenceEncoder::new(config.clone(), vocab, seed)?;
    let log = continue_quick_thought(&mut enc, &pairs, epochs, seed)?;
    Ok((enc, log))
}

pub fn continue_quick_thought(
    enc: &mut SentenceEncoder,
    pairs: &[(Vec<String>, Vec<String>)],
    epochs: usize,
    seed: u64,
) -> Result<QuickThoughtLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut adam = Adam::new(enc.config.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = QuickThoughtLog::default();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(enc.config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&(Vec<String>, Vec<String>)> =
                chunk.iter().map(|&i| &pairs[i]).collect();
            let mut t = Tape::new();
            let b = t.bind(&enc.store, true);
            let (loss, _) = batch_loss(enc, &mut t, &b, &batch);
            sum += t.value(loss).item();
            batches += 1;
            let grads = t.backward(loss);
            adam.step(&mut enc.store, &grads);
        }
        if !enc.store.all_finite() {
            return Err(Error::InvalidArgument("encoder parameters diverged".into()));
        }
        log.epoch_loss.push(sum / batches.max(1) as f64);
    }
    Ok(log)
}

/// Fraction of pairs whose successor wins its row of the in-batch score
/// matrix (batches formed in the given order).
pub fn successor_accuracy(enc: &SentenceEncoder, pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut correct = 0;
    let mut total = 0;
    for chunk in pairs.chunks(enc.config.batch_size) {
        let batch: Vec<&(Vec<String>, Vec<String>)> = chunk.iter().collect();
        let mut t = Tape::new();
        let b = t.bind(&enc.store, false);
        let (_, scores) = batch_loss(enc, &mut t, &b, &batch);
        let s = t.value(scores);
        for i in 0..s.rows() {
            let row = s.row(i);
            let best = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            correct += usize::from(best == i);
            total += 1;
        }
    }
    correct as f64 / total.max(1) as f64
}

/// Picks the kind with the best mean benchmark score. Ties prefer
/// transformer, then BiLSTM, then average; no scores means transformer.
pub fn select_encoder(scores: Option<&BTreeMap<EncoderKind, Vec<f64>>>) -> EncoderKind {
    let preference = [
        EncoderKind::Transformer,
        EncoderKind::Bilstm,
        EncoderKind::Average,
    ];
    let Some(scores) = scores else {
        return EncoderKind::Transformer;
    };
    let mut best: Option<(EncoderKind, f64)> = None;
    for kind in preference {
        let Some(s) = scores.get(&kind).filter(|s| !s.is_empty()) else {
            continue;
        };
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((kind, mean));
        }
    }
    best.map_or(EncoderKind::Transformer, |(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use dialogeval_tape::tape::sigmoid;

    fn small(kind: EncoderKind) -> SentenceEncoderConfig {
        let mut c = SentenceEncoderConfig::full(kind);
        c.word_dim = 8;
        c.output_dim = match kind {
            EncoderKind::Average => 8,
            _ => 16,
        };
        c.batch_size = 4;
        c.embedding_init = EmbeddingInit::Random;
        c
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(
            ["a", "b", "c", "d", "e", "f"].iter().map(|s| s.to_string()),
            6,
        )
    }

    #[test]
    fn full_size_dims() {
        assert_eq!(
            SentenceEncoderConfig::full(EncoderKind::Average).output_dim,
            300
        );
        assert_eq!(
            SentenceEncoderConfig::full(EncoderKind::Transformer).output_dim,
            600
        );
        assert_eq!(
            SentenceEncoderConfig::full(EncoderKind::Bilstm).output_dim,
            600
        );
        for k in [
            EncoderKind::Average,
            EncoderKind::Transformer,
            EncoderKind::Bilstm,
        ] {
            SentenceEncoderConfig::full(k).validate().unwrap();
        }
    }

    #[test]
    fn average_is_mean_of_word_vectors() {
        let enc = SentenceEncoder::new(small(EncoderKind::Average), vocab(), 1).unwrap();
        let e = enc.encode(&["a", "b"]);
        let table = enc.embedding_table();
        let (u, v) = (table.row(enc.vocab.id("a")), table.row(enc.vocab.id("b")));
        for i in 0..8 {
            assert!((e.values[i] - (u[i] + v[i]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_sentence_is_zero() {
        for kind in [
            EncoderKind::Average,
            EncoderKind::Transformer,
            EncoderKind::Bilstm,
        ] {
            let enc = SentenceEncoder::new(small(kind), vocab(), 1).unwrap();
            let e = enc.encode::<&str>(&[]);
            assert_eq!(e.values, vec![0.0; enc.output_dim()]);
        }
    }

    fn lstm_last_state(store: &ParamStore, l: &Lstm, xs: &[&[f64]]) -> Vec<f64> {
        let n = l.hidden;
        let wi = store.get(l.w_input);
        let wh = store.get(l.w_hidden);
        let bias = store.get(l.bias);
        let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
        for x in xs {
            let pre: Vec<f64> = (0..4 * n)
                .map(|j| {
                    bias.data()[j]
                        + (0..x.len()).map(|k| x[k] * wi.get(k, j)).sum::<f64>()
                        + (0..n).map(|k| h[k] * wh.get(k, j)).sum::<f64>()
                })
                .collect();
            for j in 0..n {
                let i = sigmoid(pre[j]);
                let f = sigmoid(pre[n + j]);
                let g = pre[2 * n + j].tanh();
                let o = sigmoid(pre[3 * n + j]);
                c[j] = f * c[j] + i * g;
                h[j] = o * c[j].tanh();
            }
        }
        h
    }

    #[test]
    fn bilstm_matches_unrolled_recurrence() {
        let enc = SentenceEncoder::new(small(EncoderKind::Bilstm), vocab(), 4).unwrap();
        let tokens = ["a", "c", "e", "b", "f"];
        let e = enc.encode(&tokens);
        let table = enc.embedding_table();
        let rows: Vec<&[f64]> = tokens.iter().map(|t| table.row(enc.vocab.id(t))).collect();
        let rev: Vec<&[f64]> = rows.iter().rev().cloned().collect();
        let Layers::Bilstm { forward, backward } = &enc.layers else {
            unreachable!()
        };
        let mut expect = lstm_last_state(&enc.store, forward, &rows);
        expect.extend(lstm_last_state(&enc.store, backward, &rev));
        for (a, b) in e.values.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transformer_sees_word_order() {
        let enc = SentenceEncoder::new(small(EncoderKind::Transformer), vocab(), 2).unwrap();
        let a = enc.encode(&["a", "b", "c", "d", "e", "f"]);
        let b = enc.encode(&["f", "e", "d", "c", "b", "a"]);
        assert!(a
            .values
            .iter()
            .zip(&b.values)
            .any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn batch_invariance() {
        let enc = SentenceEncoder::new(small(EncoderKind::Transformer), vocab(), 2).unwrap();
        let s = vec!["a".to_string(), "b".to_string()];
        let alone = enc.encode(&s);
        let batch = enc.encode_batch(&[vec!["c".to_string()], s.clone(), vec![]]);
        assert_eq!(batch[1], alone);
    }

    #[test]
    fn uniform_scores_give_log_batch() {
        let loss = quick_thought_loss(&Tensor::filled(4, 4, 0.3));
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_encoder(None), EncoderKind::Transformer);
        let mut s = BTreeMap::new();
        s.insert(EncoderKind::Average, vec![0.5]);
        s.insert(EncoderKind::Bilstm, vec![0.9]);
        s.insert(EncoderKind::Transformer, vec![0.7]);
        assert_eq!(select_encoder(Some(&s)), EncoderKind::Bilstm);
        for v in s.values_mut() {
            *v = vec![0.6];
        }
        assert_eq!(select_encoder(Some(&s)), EncoderKind::Transformer);
    }

    #[test]
    fn short_dialogs_rejected() {
        let d = Dialog {
            dialog_id: "x".into(),
            turns: vec![],
            annotations: None,
            conversation_rating: None,
        };
        assert!(successor_pairs(&[d]).is_err());
        let ok = Dialog {
            dialog_id: "y".into(),
            turns: vec![Turn::new(0, "a", "b")],
            annotations: None,
            conversation_rating: None,
        };
        assert_eq!(successor_pairs(&[ok]).unwrap().len(), 1);
    }
}
