//! Context-aware GRU encoder-decoder with dot-product attention: maximum
//! likelihood training, greedy and beam-search decoding, and soft decoding
//! that exposes the per-step softmax for evaluator-guided fine-tuning.

use std::path::Path;

use dialogeval_tape::{Adam, Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, GENERATOR_NAMESPACE};
use crate::corpus::Dialog;
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear};
use crate::text::{
    init_embeddings, EmbeddingSource, Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, TRANSITION,
};

/// Attention logits for positions outside an example's input.
const MASKED: f64 = -1e30;

/// Sentences recorded on one tape; gradients of chunks are summed in order.
const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub embedding_dim: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_decode_len: usize,
    /// Longer inputs keep their most recent tokens.
    pub max_input_len: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Rank finished beam hypotheses by mean rather than summed log-prob.
    pub length_normalize: bool,
    pub clip_norm: Option<f64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            embedding_dim: 300,
            vocab_size: 30_000,
            batch_size: 256,
            learning_rate: 1e-4,
            max_decode_len: 40,
            max_input_len: 128,
            max_epochs: 50,
            patience: 3,
            length_normalize: false,
            clip_norm: Some(5.0),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.hidden,
            self.embedding_dim,
            self.vocab_size,
            self.batch_size,
            self.max_decode_len,
            self.max_input_len,
        ]
        .contains(&0)
        {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "generator learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Context tokens: `x_{n-1} <tr> y_{n-1} <tr> x_n`, with empty leading
/// segments omitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorInput {
    pub tokens: Vec<String>,
}

impl GeneratorInput {
    /// Segments between transition tokens.
    pub fn segments(&self) -> Vec<Vec<String>> {
        self.tokens
            .split(|t| t == SPECIAL_TOKENS[TRANSITION])
            .map(<[String]>::to_vec)
            .collect()
    }
}

pub fn build_generator_input(dialog: &Dialog, turn_index: usize) -> Result<GeneratorInput> {
    let turn = dialog.turns.get(turn_index).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "turn {turn_index} out of range for dialog {} with {} turns",
            dialog.dialog_id,
            dialog.turns.len()
        ))
    })?;
    let mut segments: Vec<&[String]> = Vec::new();
    if turn_index > 0 {
        let prev = &dialog.turns[turn_index - 1];
        segments.push(&prev.user_tokens);
        segments.push(&prev.system_tokens);
    }
    segments.push(&turn.user_tokens);
    let mut tokens = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            tokens.push(SPECIAL_TOKENS[TRANSITION].to_string());
        }
        tokens.extend(seg.iter().cloned());
    }
    Ok(GeneratorInput { tokens })
}

/// One training example as ids; `target` ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenPair {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl GenPair {
    /// Response ids without the trailing EOS.
    pub fn response(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }
}

/// Padded id matrices with a loss mask; row `b` of `mask` is 1 on the
/// target positions of example `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub inputs: Vec<Vec<usize>>,
    pub input_lengths: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
}

impl TrainingBatch {
    pub fn new(pairs: &[&GenPair]) -> Self {
        let li = pairs
            .iter()
            .map(|p| p.input.len().max(1))
            .max()
            .unwrap_or(0);
        let lt = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
        let pad = |v: &[usize], n: usize| {
            let mut v = v.to_vec();
            v.resize(n, PAD);
            v
        };
        Self {
            inputs: pairs.iter().map(|p| pad(&p.input, li)).collect(),
            input_lengths: pairs.iter().map(|p| p.input.len().max(1)).collect(),
            targets: pairs.iter().map(|p| pad(&p.target, lt)).collect(),
            mask: pairs
                .iter()
                .map(|p| {
                    (0..lt)
                        .map(|i| f64::from(u8::from(i < p.target.len())))
                        .collect()
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target_len(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn target_lengths(&self) -> Vec<usize> {
        self.mask
            .iter()
            .map(|m| m.iter().filter(|&&x| x > 0.0).count())
            .collect()
    }

    /// Appends `extra` padding positions to every input and target row.
    pub fn pad_more(&mut self, extra: usize) {
        for r in self.inputs.iter_mut().chain(self.targets.iter_mut()) {
            r.extend(std::iter::repeat_n(PAD, extra));
        }
        for m in &mut self.mask {
            m.extend(std::iter::repeat_n(0.0, extra));
        }
    }
}

/// Encoder states of a batch, stacked step-major: row `k * B + b` is
/// example `b` at position `k`.
#[derive(Debug)]
pub struct EncodedBatch {
    pub states: Var,
    pub last: Var,
    /// `B x (L * B)` additive attention mask.
    pub mask: Tensor,
}

/// Teacher-forced decoder outputs, stacked step-major like
/// [`EncodedBatch::states`].
#[derive(Debug)]
pub struct DecodedBatch {
    pub logits: Var,
    pub steps: usize,
    pub batch: usize,
}

impl DecodedBatch {
    /// Rows of example `b` for the first `len` steps.
    pub fn rows_of(&self, b: usize, len: usize) -> Vec<usize> {
        (0..len).map(|k| k * self.batch + b).collect()
    }
}

/// Per-step distributions over the generator vocabulary; row `i` is the
/// softmax at output position `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftDecodeOutput {
    pub probs: Tensor,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub embedding: ParamId,
    encoder: Gru,
    decoder: Gru,
    combine: Linear,
    output: Linear,
}

impl Generator {
    pub fn new(config: GeneratorConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let table = init_embeddings(&vocab, config.embedding_dim, &EmbeddingSource::Random, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
        let mut store = ParamStore::with_namespace(GENERATOR_NAMESPACE);
        let embedding = store.add("embedding", table.matrix);
        let (e, h) = (config.embedding_dim, config.hidden);
        let encoder = Gru::new(&mut store, "encoder", e, h, &mut rng);
        let decoder = Gru::new(&mut store, "decoder", e, h, &mut rng);
        let combine = Linear::new(&mut store, "attention.combine", 2 * h, h, &mut rng);
        let output = Linear::new(&mut store, "output", h, vocab.len(), &mut rng);
        Ok(Self {
            config,
            vocab,
            store,
            embedding,
            encoder,
            decoder,
            combine,
            output,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn output_layer(&self) -> &Linear {
        &self.output
    }

    /// Ids of `input`, keeping the last `max_input_len` tokens.
    pub fn input_ids(&self, input: &GeneratorInput) -> Vec<usize> {
        let skip = input.tokens.len().saturating_sub(self.config.max_input_len);
        self.vocab.encode(&input.tokens[skip..])
    }

    /// Target ids for a response: at most `max_decode_len - 1` tokens, then
    /// EOS.
    pub fn target_ids<S: AsRef<str>>(&self, response: &[S]) -> Vec<usize> {
        let n = response.len().min(self.config.max_decode_len - 1);
        let mut ids = self.vocab.encode(&response[..n]);
        ids.push(EOS);
        ids
    }

    /// Every turn of every dialog as a training pair.
    pub fn pairs(&self, dialogs: &[&Dialog]) -> Result<Vec<GenPair>> {
        let mut out = Vec::new();
        for d in dialogs {
            for (i, turn) in d.turns.iter().enumerate() {
                out.push(GenPair {
                    input: self.input_ids(&build_generator_input(d, i)?),
                    target: self.target_ids(&turn.system_tokens),
                });
            }
        }
        Ok(out)
    }

    /// Runs the encoder over padded inputs; states stop updating past each
    /// example's length, so `last` is each example's final state.
    pub fn encode(
        &self,
        t: &mut Tape,
        b: &Bindings,
        inputs: &[Vec<usize>],
        lengths: &[usize],
    ) -> EncodedBatch {
        let n = inputs.len();
        let steps = inputs[0].len();
        let hdim = self.config.hidden;
        let mut h = t.leaf(Tensor::zeros(n, hdim));
        let mut states = Vec::with_capacity(steps);
        let mut mask = Tensor::filled(n, steps * n, MASKED);
        for k in 0..steps {
            let ids: Vec<usize> = inputs.iter().map(|r| r[k]).collect();
            let x = t.gather_rows(b[self.embedding], &ids);
            let xp = self.encoder.project_inputs(t, b, x);
            let h2 = self.encoder.step_projected(t, b, xp, h);
            if lengths.iter().all(|&l| l > k) {
                h = h2;
            } else {
                let mut keep = Tensor::zeros(n, hdim);
                for (i, &l) in lengths.iter().enumerate() {
                    if l > k {
                        keep.row_mut(i).fill(1.0);
                    }
                }
                let keep_old = keep.map(|m| 1.0 - m);
                let hn = t.mul_const(h2, keep);
                let ho = t.mul_const(h, keep_old);
                h = t.add(hn, ho);
            }
            states.push(h2);
            for (i, &l) in lengths.iter().enumerate() {
                if l > k {
                    mask.set(i, k * n + i, 0.0);
                }
            }
        }
        let states = t.concat_rows(&states);
        EncodedBatch {
            states,
            last: h,
            mask,
        }
    }

    /// One decoder step for `W` rows. `mask`, when given, is the
    /// `W x positions` additive attention mask. Returns the new state, the
    /// attentional hidden state and the attention weights.
    pub fn decoder_step(
        &self,
        t: &mut Tape,
        b: &Bindings,
        enc_states: Var,
        mask: Option<&Tensor>,
        h: Var,
        x: Var,
    ) -> (Var, Var, Var) {
        let xp = self.decoder.project_inputs(t, b, x);
        let h = self.decoder.step_projected(t, b, xp, h);
        let enc_t = t.transpose(enc_states);
        let mut scores = t.matmul(h, enc_t);
        if let Some(m) = mask {
            let m = t.leaf(m.clone());
            scores = t.add(scores, m);
        }
        let attn = t.softmax_rows(scores);
        let ctx = t.matmul(attn, enc_states);
        let joined = t.concat_cols(&[ctx, h]);
        let combined = self.combine.forward(t, b, joined);
        let attentional = t.tanh(combined);
        (h, attentional, attn)
    }

    /// Teacher-forced decoding of a whole batch: step `i` is fed target
    /// `i - 1` (BOS at step 0).
    pub fn decode_teacher_forced(
        &self,
        t: &mut Tape,
        b: &Bindings,
        batch: &TrainingBatch,
    ) -> DecodedBatch {
        let n = batch.len();
        let steps = batch.target_len();
        let enc = self.encode(t, b, &batch.inputs, &batch.input_lengths);
        let mut h = enc.last;
        let mut outs = Vec::with_capacity(steps);
        for k in 0..steps {
            let prev: Vec<usize> = batch
                .targets
                .iter()
                .map(|r| if k == 0 { BOS } else { r[k - 1] })
                .collect();
            let x = t.gather_rows(b[self.embedding], &prev);
            let (h2, att, _) = self.decoder_step(t, b, enc.states, Some(&enc.mask), h, x);
            h = h2;
            outs.push(att);
        }
        let stacked = t.concat_rows(&outs);
        let logits = self.output.forward(t, b, stacked);
        DecodedBatch {
            logits,
            steps,
            batch: n,
        }
    }

    /// Free-running soft decoding: step `i` is fed the expected embedding
    /// under the step `i - 1` distribution instead of a target token.
    pub fn decode_free_running(
        &self,
        t: &mut Tape,
        b: &Bindings,
        batch: &TrainingBatch,
    ) -> DecodedBatch {
        let n = batch.len();
        let steps = batch.target_len();
        let enc = self.encode(t, b, &batch.inputs, &batch.input_lengths);
        let mut h = enc.last;
        let mut x = t.gather_rows(b[self.embedding], &vec![BOS; n]);
        let mut logits = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (h2, att, _) = self.decoder_step(t, b, enc.states, Some(&enc.mask), h, x);
            h = h2;
            let l = self.output.forward(t, b, att);
            let q = t.softmax_rows(l);
            x = t.matmul(q, b[self.embedding]);
            logits.push(l);
        }
        DecodedBatch {
            logits: t.concat_rows(&logits),
            steps,
            batch: n,
        }
    }

    /// Per-sentence summed token cross-entropy over masked positions, as a
    /// `B x 1` column.
    pub fn sentence_nll(&self, t: &mut Tape, dec: &DecodedBatch, batch: &TrainingBatch) -> Var {
        let lp = t.log_softmax_rows(dec.logits);
        let mut targets = Vec::with_capacity(dec.steps * dec.batch);
        let mut weights = Tensor::zeros(dec.steps * dec.batch, 1);
        for k in 0..dec.steps {
            for i in 0..dec.batch {
                targets.push(batch.targets[i][k]);
                weights.set(k * dec.batch + i, 0, batch.mask[i][k]);
            }
        }
        let picked = t.pick_per_row(lp, &targets);
        let picked = t.mul_const(picked, weights);
        // Regroup step-major rows into one row per sentence.
        let per_step: Vec<Var> = (0..dec.steps)
            .map(|k| t.slice_rows(picked, k * dec.batch, dec.batch))
            .collect();
        let cols = t.concat_cols(&per_step);
        let sums = t.sum_cols(cols);
        t.scale(sums, -1.0)
    }

    /// Mean over sentences of summed token cross-entropy.
    pub fn batch_loss(&self, t: &mut Tape, b: &Bindings, batch: &TrainingBatch) -> Var {
        let dec = self.decode_teacher_forced(t, b, batch);
        let nll = self.sentence_nll(t, &dec, batch);
        let s = t.sum(nll);
        t.scale(s, 1.0 / batch.len() as f64)
    }

    /// `(mean sentence loss, mean token loss)` over `pairs`.
    pub fn evaluate_loss(&self, pairs: &[GenPair]) -> (f64, f64) {
        if pairs.is_empty() {
            return (0.0, 0.0);
        }
        let sums: Vec<f64> = pairs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let refs: Vec<&GenPair> = chunk.iter().collect();
                let batch = TrainingBatch::new(&refs);
                let mut t = Tape::new();
                let b = t.bind(&self.store, false);
                let l = self.batch_loss(&mut t, &b, &batch);
                t.value(l).item() * batch.len() as f64
            })
            .collect();
        let total: f64 = sums.iter().sum();
        let tokens: usize = pairs.iter().map(|p| p.target.len()).sum();
        (total / pairs.len() as f64, total / tokens as f64)
    }

    /// Per-token perplexity over `pairs`.
    pub fn perplexity(&self, pairs: &[GenPair]) -> f64 {
        self.evaluate_loss(pairs).1.exp()
    }

    /// Gradient of the mean batch loss, computed over fixed chunks in
    /// parallel and summed in chunk order.
    fn batch_gradients(&self, pairs: &[&GenPair]) -> (f64, dialogeval_tape::Gradients) {
        let n = pairs.len() as f64;
        let parts: Vec<(f64, dialogeval_tape::Gradients)> = pairs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let batch = TrainingBatch::new(chunk);
                let mut t = Tape::new();
                let b = t.bind(&self.store, true);
                let l = self.batch_loss(&mut t, &b, &batch);
                let weighted = t.scale(l, chunk.len() as f64 / n);
                (t.value(weighted).item(), t.backward(weighted))
            })
            .collect();
        let mut grads = dialogeval_tape::Gradients::new();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grads.accumulate(&g);
        }
        (loss, grads)
    }

    /// Greedy decoding; ties go to the lowest token id.
    pub fn decode_greedy(&self, input: &[usize]) -> Vec<usize> {
        let stepper = self.stepper(input);
        let mut state = stepper.initial();
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..self.config.max_decode_len {
            let (next, lp) = stepper
                .advance(std::slice::from_ref(&state), &[prev])
                .remove(0);
            let tok = argmax_lowest(&lp);
            if tok == EOS {
                break;
            }
            out.push(tok);
            state = next;
            prev = tok;
        }
        out
    }

    pub fn beam_search(&self, input: &[usize], width: usize) -> NBestList {
        beam_search(
            &self.stepper(input),
            width,
            self.config.max_decode_len,
            self.config.length_normalize,
        )
    }

    /// Step model over one encoded input, for the decoding routines.
    pub fn stepper(&self, input: &[usize]) -> GeneratorStepper<'_> {
        let ids = if input.is_empty() {
            vec![PAD]
        } else {
            input.to_vec()
        };
        let mut t = Tape::new();
        let b = t.bind(&self.store, false);
        let len = ids.len();
        let enc = self.encode(&mut t, &b, &[ids], &[len]);
        GeneratorStepper {
            generator: self,
            states: t.value(enc.states).clone(),
            initial: t.value(enc.last).clone(),
        }
    }

    /// Teacher-forced per-step softmax for `target` (ids ending in EOS).
    pub fn decode_soft(
        &self,
        input: &[usize],
        target: &[usize],
        free_running: bool,
    ) -> Result<SoftDecodeOutput> {
        if target.is_empty() {
            return Err(Error::Empty("soft decoding needs a nonempty target".into()));
        }
        let pair = GenPair {
            input: input.to_vec(),
            target: target.to_vec(),
        };
        let batch = TrainingBatch::new(&[&pair]);
        let mut t = Tape::new();
        let b = t.bind(&self.store, false);
        let dec = if free_running {
            self.decode_free_running(&mut t, &b, &batch)
        } else {
            self.decode_teacher_forced(&mut t, &b, &batch)
        };
        let q = t.softmax_rows(dec.logits);
        Ok(SoftDecodeOutput {
            probs: t.value(q).clone(),
        })
    }

    /// Attention weights of each greedy decoding step (one row per step).
    pub fn attention_trace(&self, input: &[usize]) -> Vec<Vec<f64>> {
        let stepper = self.stepper(input);
        let mut h = stepper.initial.clone();
        let mut prev = BOS;
        let mut rows = Vec::new();
        for _ in 0..self.config.max_decode_len {
            let mut t = Tape::new();
            let b = t.bind(&self.store, false);
            let enc = t.leaf(stepper.states.clone());
            let hv = t.leaf(h.clone());
            let x = t.gather_rows(b[self.embedding], &[prev]);
            let (h2, att, attn) = self.decoder_step(&mut t, &b, enc, None, hv, x);
            rows.push(t.value(attn).data().to_vec());
            let l = self.output.forward(&mut t, &b, att);
            let tok = argmax_lowest(t.value(l).data());
            if tok == EOS {
                break;
            }
            h = t.value(h2).clone();
            prev = tok;
        }
        rows
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::ensure_dir(dir)?;
        checkpoint::write_json(&dir.join(checkpoint::CONFIG_FILE), &self.config)?;
        self.vocab.save(dir.join(checkpoint::VOCAB_FILE))?;
        checkpoint::write_params(&dir.join(checkpoint::PARAMS_FILE), &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        checkpoint::require(&dir.join(checkpoint::PARAMS_FILE), "train-generator")?;
        let config: GeneratorConfig = checkpoint::read_json(&dir.join(checkpoint::CONFIG_FILE))?;
        let vocab = Vocabulary::load(dir.join(checkpoint::VOCAB_FILE))?;
        let params = checkpoint::read_params(&dir.join(checkpoint::PARAMS_FILE))?;
        let mut g = Self::new(config, vocab, 0)?;
        g.store.load_matching(&params)?;
        Ok(g)
    }
}

pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A left-to-right model that scores the next token.
pub trait StepModel {
    type State: Clone;
    fn initial(&self) -> Self::State;
    /// For each `(state, previous token)`: the successor state and
    /// log-probabilities over the vocabulary.
    fn advance(&self, states: &[Self::State], prev: &[usize]) -> Vec<(Self::State, Vec<f64>)>;
    fn bos(&self) -> usize {
        BOS
    }
    fn eos(&self) -> usize {
        EOS
    }
}

/// A generator bound to one encoded input.
#[derive(Debug)]
pub struct GeneratorStepper<'a> {
    generator: &'a Generator,
    states: Tensor,
    initial: Tensor,
}

impl StepModel for GeneratorStepper<'_> {
    type State = Vec<f64>;

    fn initial(&self) -> Vec<f64> {
        self.initial.data().to_vec()
    }

    fn advance(&self, states: &[Vec<f64>], prev: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let g = self.generator;
        let mut t = Tape::new();
        let b = t.bind(&g.store, false);
        let enc = t.leaf(self.states.clone());
        let h = t.leaf(Tensor::from_rows(states));
        let x = t.gather_rows(b[g.embedding], prev);
        let (h2, att, _) = g.decoder_step(&mut t, &b, enc, None, h, x);
        let l = g.output.forward(&mut t, &b, att);
        let lp = t.log_softmax_rows(l);
        let (hv, lv) = (t.value(h2), t.value(lp));
        (0..states.len())
            .map(|i| (hv.row(i).to_vec(), lv.row(i).to_vec()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<usize>,
    /// Summed token log-probability, including EOS when `finished`.
    pub score: f64,
    pub finished: bool,
}

impl Candidate {
    pub fn normalized_score(&self) -> f64 {
        self.score / (self.tokens.len() + usize::from(self.finished)).max(1) as f64
    }
}

/// Beam candidates, best first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NBestList {
    pub candidates: Vec<Candidate>,
}

impl NBestList {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn top(&self) -> Option<&Candidate> {
        self.candidates.first()
    }
}

/// Beam search over summed log-probabilities. Each step keeps the best
/// `width` extensions of the live hypotheses; extensions ending in EOS, or
/// reaching `max_len` tokens, retire. Ties go to the earlier hypothesis,
/// then the lower token id. The result is the best `width` retired
/// hypotheses.
pub fn beam_search<M: StepModel>(
    model: &M,
    width: usize,
    max_len: usize,
    length_normalize: bool,
) -> NBestList {
    assert!(width >= 1, "beam width must be at least 1");
    let eos = model.eos();
    let mut live: Vec<(Vec<usize>, f64, M::State)> = vec![(Vec::new(), 0.0, model.initial())];
    let mut done: Vec<Candidate> = Vec::new();
    for step in 0..max_len {
        if live.is_empty() {
            break;
        }
        let states: Vec<M::State> = live.iter().map(|l| l.2.clone()).collect();
        let prev: Vec<usize> = live
            .iter()
            .map(|l| l.0.last().copied().unwrap_or(model.bos()))
            .collect();
        let advanced = model.advance(&states, &prev);
        let mut ext: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, (_, lp)) in advanced.iter().enumerate() {
            for (tok, &p) in lp.iter().enumerate() {
                ext.push((live[hi].1 + p, hi, tok));
            }
        }
        ext.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        ext.truncate(width);
        let mut next = Vec::new();
        for (score, hi, tok) in ext {
            if tok == eos {
                done.push(Candidate {
                    tokens: live[hi].0.clone(),
                    score,
                    finished: true,
                });
                continue;
            }
            let mut tokens = live[hi].0.clone();
            tokens.push(tok);
            if step + 1 == max_len {
                done.push(Candidate {
                    tokens,
                    score,
                    finished: false,
                });
            } else {
                next.push((tokens, score, advanced[hi].0.clone()));
            }
        }
        live = next;
    }
    let key = |c: &Candidate| {
        if length_normalize {
            c.normalized_score()
        } else {
            c.score
        }
    };
    // Stable sort keeps retirement order among equal scores.
    done.sort_by(|a, b| key(b).total_cmp(&key(a)));
    done.truncate(width);
    NBestList { candidates: done }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLog {
    /// Mean summed-token loss per sentence.
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    pub dev_token_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Maximum-likelihood training with early stopping on dev loss; the best
/// parameters are restored. An empty dev set monitors training loss.
pub fn train_generator(
    generator: &mut Generator,
    train: &[GenPair],
    dev: &[GenPair],
    seed: u64,
) -> Result<GeneratorLog> {
    if train.is_empty() {
        return Err(Error::Empty("no generator training pairs".into()));
    }
    let cfg = generator.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6e);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = GeneratorLog::default();
    let mut best = (f64::INFINITY, generator.store.clone());
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&GenPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = generator.batch_gradients(&batch);
            total += loss * batch.len() as f64;
            if let Some(c) = cfg.clip_norm {
                grads.clip_to_norm(c);
            }
            adam.step(&mut generator.store, &grads);
        }
        if !generator.store.all_finite() {
            return Err(Error::InvalidArgument(
                "generator parameters diverged".into(),
            ));
        }
        log.train_loss.push(total / train.len() as f64);
        let (dl, dt) = generator.evaluate_loss(if dev.is_empty() { train } else { dev });
        log.dev_loss.push(dl);
        log.dev_token_loss.push(dt);
        log::info!(
            "generator epoch {epoch}: train {:.4} dev {dl:.4}",
            log.train_loss[epoch]
        );
        if dl < best.0 {
            best = (dl, generator.store.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    generator.store = best.1;
    Ok(log)
}
