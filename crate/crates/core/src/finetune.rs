//! Evaluator-guided fine-tuning of the generator.
//!
//! The decoder's per-step softmax `q` replaces the argmax token: its rows
//! weight the evaluator's word-embedding table (a soft embedding lookup), the
//! resulting vectors go through the frozen sentence encoder as the system
//! response, and the frozen evaluator scores the turn. The composite loss is
//!
//! ```text
//! loss = CE(y | z) - lambda * (p_yes(comprehensible) + p_yes(on_topic)
//!                             + p_yes(interesting) + p_yes(continue))
//! ```
//!
//! where the evaluator term is averaged over the sentences of a batch and
//! the context and hand-crafted features come from the reference turn.

use std::path::Path;

use dialogeval_tape::{Adam, Bindings, Gradients, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, params_hash};
use crate::corpus::{Dialog, Turn};
use crate::error::{Error, Result};
use crate::evaluator::{EvalExample, EvalInputs, Evaluator, NUM_HEADS};
use crate::generator::{
    build_generator_input, GenPair, Generator, NBestList, SoftDecodeOutput, TrainingBatch,
};
use crate::reranker::{candidate_features, candidate_tokens, rerank, Reranker};
use crate::text::{Vocabulary, NUM_SPECIALS, UNK};

const CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Feed expected embeddings instead of reference tokens when building
    /// `q` (the cross-entropy term stays teacher-forced).
    pub free_running: bool,
    /// Score the dev set after every update of the first epoch.
    pub track_first_epoch: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 10,
            patience: 3,
            free_running: false,
            track_first_epoch: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite and >= 0".into()));
        }
        if self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config(
                "finetune learning rate and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Evaluator vocabulary row for every generator token id. Specials map to
/// themselves; unknown tokens map to the evaluator's UNK row.
pub fn vocab_projection(generator: &Vocabulary, evaluator: &Vocabulary) -> Vec<usize> {
    (0..generator.len())
        .map(|id| {
            if id < NUM_SPECIALS {
                id
            } else {
                let tok = generator.token(id);
                if evaluator.contains(tok) {
                    evaluator.id(tok)
                } else {
                    UNK
                }
            }
        })
        .collect()
}

/// The evaluator's embedding rows reindexed by generator token id
/// (`|V_gen| x D`).
pub fn projected_table(evaluator_table: &Tensor, projection: &[usize]) -> Tensor {
    let d = evaluator_table.cols();
    let mut out = Tensor::zeros(projection.len(), d);
    for (g, &e) in projection.iter().enumerate() {
        out.row_mut(g).copy_from_slice(evaluator_table.row(e));
    }
    out
}

/// Soft embedding lookup. `q` is `|V| x len` with one distribution per
/// column and `table` is `|V| x D`; the result is `D x len`, column `i`
/// being the probability-weighted mix of embedding rows at step `i`.
pub fn soft_embedding_lookup(q: &Tensor, table: &Tensor) -> Result<Tensor> {
    if q.rows() != table.rows() {
        return Err(Error::Dimension(format!(
            "q has {} vocabulary rows but the table has {} rows",
            q.rows(),
            table.rows()
        )));
    }
    Ok(table.transpose().matmul(q))
}

impl SoftDecodeOutput {
    /// The distributions as columns (`|V| x len`).
    pub fn columns(&self) -> Tensor {
        self.probs.transpose()
    }
}

/// A reference turn prepared for fine-tuning: the generator pair and the
/// evaluator example whose system side will be replaced.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneExample {
    pub pair: GenPair,
    pub eval: EvalExample,
}

pub fn finetune_examples(
    generator: &Generator,
    evaluator: &Evaluator,
    dialogs: &[&Dialog],
) -> Result<Vec<FinetuneExample>> {
    let per_dialog: Vec<Result<Vec<FinetuneExample>>> = dialogs
        .par_iter()
        .map(|d| {
            d.turns
                .iter()
                .enumerate()
                .map(|(i, turn)| {
                    Ok(FinetuneExample {
                        pair: GenPair {
                            input: generator.input_ids(&build_generator_input(d, i)?),
                            target: generator.target_ids(&turn.system_tokens),
                        },
                        eval: evaluator.example(turn, &d.turns[..i])?,
                    })
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeLossValue {
    pub total: f64,
    pub ce_term: f64,
    /// Batch-mean yes-probability per head.
    pub eval_term: [f64; NUM_HEADS],
    /// Batch mean of each sentence's summed yes-probabilities.
    pub eval_term_l1: f64,
}

/// Frozen pieces shared by every composite-loss evaluation.
pub struct CompositeObjective<'a> {
    pub generator: &'a Generator,
    pub evaluator: &'a Evaluator,
    pub table: Tensor,
    pub lambda: f64,
    pub free_running: bool,
}

/// Tape handles of one composite-loss evaluation.
#[derive(Debug)]
pub struct CompositeVars {
    pub total: Var,
    pub ce: Var,
    pub eval_l1: Var,
    pub yes: Vec<Var>,
}

impl<'a> CompositeObjective<'a> {
    pub fn new(
        generator: &'a Generator,
        evaluator: &'a Evaluator,
        lambda: f64,
        free_running: bool,
    ) -> Self {
        let projection = vocab_projection(&generator.vocab, &evaluator.encoder.vocab);
        let table = projected_table(evaluator.encoder.embedding_table(), &projection);
        Self {
            generator,
            evaluator,
            table,
            lambda,
            free_running,
        }
    }

    /// Records the loss for `batch`; `gen` binds the generator store, and
    /// the evaluator and its encoder are bound as constants here.
    pub fn record(
        &self,
        t: &mut Tape,
        gen: &Bindings,
        batch: &[&FinetuneExample],
    ) -> CompositeVars {
        let n = batch.len();
        let pairs: Vec<&GenPair> = batch.iter().map(|e| &e.pair).collect();
        let tb = TrainingBatch::new(&pairs);
        let dec = self.generator.decode_teacher_forced(t, gen, &tb);
        let nll = self.generator.sentence_nll(t, &dec, &tb);
        let nll_sum = t.sum(nll);
        let ce = t.scale(nll_sum, 1.0 / n as f64);

        let soft_dec = if self.free_running {
            self.generator.decode_free_running(t, gen, &tb)
        } else {
            dec
        };
        let q = t.softmax_rows(soft_dec.logits);
        let table = t.leaf(self.table.clone());
        let eb = t.bind(&self.evaluator.store, false);
        let encb = t.bind(&self.evaluator.encoder.store, false);
        let max_len = self.evaluator.encoder.config.max_len;
        let mut inputs = EvalInputs::default();
        for (i, ex) in batch.iter().enumerate() {
            let len = ex.pair.response().len().min(max_len);
            let system = if len == 0 {
                t.leaf(Tensor::zeros(1, self.evaluator.encoder.output_dim()))
            } else {
                let rows = soft_dec.rows_of(i, len);
                let qi = t.gather_rows(q, &rows);
                let words = t.matmul(qi, table);
                self.evaluator
                    .encoder
                    .forward_embedded(t, &encb, words, len)
            };
            let history = ex
                .eval
                .history
                .iter()
                .map(|e| t.leaf(Tensor::row_vector(e.values.clone())))
                .collect();
            inputs.history.push(history);
            inputs
                .user
                .push(t.leaf(Tensor::row_vector(ex.eval.user.values.clone())));
            inputs.system.push(system);
            inputs
                .features
                .push(Tensor::row_vector(ex.eval.features.values.clone()));
        }
        let logits = self.evaluator.head_logits(t, &eb, &inputs, None);
        let yes: Vec<Var> = logits
            .iter()
            .map(|&l| {
                let p = t.softmax_rows(l);
                t.slice_cols(p, 1, 1)
            })
            .collect();
        let per_sentence = t.concat_cols(&yes);
        let l1 = t.sum(per_sentence);
        let eval_l1 = t.scale(l1, 1.0 / n as f64);
        let bonus = t.scale(eval_l1, -self.lambda);
        let total = t.add(ce, bonus);
        CompositeVars {
            total,
            ce,
            eval_l1,
            yes,
        }
    }

    pub fn value(&self, batch: &[&FinetuneExample]) -> CompositeLossValue {
        let mut t = Tape::new();
        let gb = t.bind(&self.generator.store, false);
        let v = self.record(&mut t, &gb, batch);
        read_value(&t, &v)
    }

    /// Loss and generator gradients for `batch`, computed in fixed chunks
    /// and summed in order.
    pub fn gradients(&self, batch: &[&FinetuneExample]) -> (f64, Gradients) {
        let n = batch.len() as f64;
        let parts: Vec<(f64, Gradients)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut t = Tape::new();
                let gb = t.bind(&self.generator.store, true);
                let v = self.record(&mut t, &gb, chunk);
                let weighted = t.scale(v.total, chunk.len() as f64 / n);
                (t.value(weighted).item(), t.backward(weighted))
            })
            .collect();
        let mut grads = Gradients::new();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grads.accumulate(&g);
        }
        (loss, grads)
    }

    /// Example-weighted mean of the loss terms over `examples`.
    pub fn mean_value(&self, examples: &[FinetuneExample]) -> CompositeLossValue {
        let parts: Vec<(usize, CompositeLossValue)> = examples
            .par_chunks(CHUNK)
            .map(|c| (c.len(), self.value(&c.iter().collect::<Vec<_>>())))
            .collect();
        let n = examples.len().max(1) as f64;
        let mut out = CompositeLossValue {
            total: 0.0,
            ce_term: 0.0,
            eval_term: [0.0; NUM_HEADS],
            eval_term_l1: 0.0,
        };
        for (k, v) in parts {
            let w = k as f64 / n;
            out.total += w * v.total;
            out.ce_term += w * v.ce_term;
            out.eval_term_l1 += w * v.eval_term_l1;
            for h in 0..NUM_HEADS {
                out.eval_term[h] += w * v.eval_term[h];
            }
        }
        out
    }
}

fn read_value(t: &Tape, v: &CompositeVars) -> CompositeLossValue {
    let eval_term = std::array::from_fn(|h| {
        let col = t.value(v.yes[h]);
        col.sum() / col.rows() as f64
    });
    CompositeLossValue {
        total: t.value(v.total).item(),
        ce_term: t.value(v.ce).item(),
        eval_term,
        eval_term_l1: t.value(v.eval_l1).item(),
    }
}

pub fn composite_loss(
    generator: &Generator,
    evaluator: &Evaluator,
    batch: &[&FinetuneExample],
    lambda: f64,
) -> CompositeLossValue {
    CompositeObjective::new(generator, evaluator, lambda, false).value(batch)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub train_loss: Vec<f64>,
    pub dev_loss: Vec<f64>,
    /// Dev mean summed yes-probability before training and after each epoch.
    pub dev_eval_l1: Vec<f64>,
    /// Dev mean summed yes-probability after each update of the first
    /// epoch (only when tracking is on).
    pub first_epoch_dev_eval_l1: Vec<f64>,
    pub evaluator_hash: String,
    pub best_epoch: usize,
}

/// Adam on the composite loss with early stopping on the dev composite
/// loss. The evaluator is never updated; its parameter hash is checked
/// after every epoch.
pub fn finetune_generator(
    generator: &mut Generator,
    evaluator: &Evaluator,
    train: &[FinetuneExample],
    dev: &[FinetuneExample],
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneLog> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no fine-tuning examples".into()));
    }
    let hash = params_hash(&evaluator.store);
    let encoder_hash = params_hash(&evaluator.encoder.store);
    let monitor = if dev.is_empty() { train } else { dev };
    let mut log = FinetuneLog {
        evaluator_hash: hash.clone(),
        ..FinetuneLog::default()
    };
    {
        let obj = CompositeObjective::new(generator, evaluator, config.lambda, config.free_running);
        log.dev_eval_l1.push(obj.mean_value(monitor).eval_term_l1);
    }
    // Same shuffling stream as maximum-likelihood training, so lambda = 0
    // continues that trajectory exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6e);
    let mut adam = Adam::new(config.learning_rate);
    let clip = generator.config.clip_norm;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, generator.store.clone());
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FinetuneExample> = chunk.iter().map(|&i| &train[i]).collect();
            let obj =
                CompositeObjective::new(generator, evaluator, config.lambda, config.free_running);
            let (loss, mut grads) = obj.gradients(&batch);
            total += loss * batch.len() as f64;
            if let Some(c) = clip {
                grads.clip_to_norm(c);
            }
            adam.step(&mut generator.store, &grads);
            if epoch == 0 && config.track_first_epoch {
                let obj = CompositeObjective::new(
                    generator,
                    evaluator,
                    config.lambda,
                    config.free_running,
                );
                log.first_epoch_dev_eval_l1
                    .push(obj.mean_value(monitor).eval_term_l1);
            }
        }
        if !generator.store.all_finite() {
            return Err(Error::InvalidArgument(
                "generator parameters diverged during fine-tuning".into(),
            ));
        }
        if params_hash(&evaluator.store) != hash
            || params_hash(&evaluator.encoder.store) != encoder_hash
        {
            return Err(Error::InvalidArgument(
                "evaluator parameters changed during fine-tuning".into(),
            ));
        }
        log.train_loss.push(total / train.len() as f64);
        let obj = CompositeObjective::new(generator, evaluator, config.lambda, config.free_running);
        let dv = obj.mean_value(monitor);
        log.dev_loss.push(dv.total);
        log.dev_eval_l1.push(dv.eval_term_l1);
        log::info!(
            "finetune epoch {epoch}: train {:.4} dev {:.4} dev yes-sum {:.4}",
            log.train_loss[epoch],
            dv.total,
            dv.eval_term_l1
        );
        if dv.total < best.0 {
            best = (dv.total, generator.store.clone());
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    generator.store = best.1;
    Ok(log)
}

/// Beam search with the fine-tuned generator, then reranking. Returns the
/// chosen candidate's tokens and the n-best list it came from.
pub fn generate_rr_ft(
    input: &[usize],
    turn: &Turn,
    context: &[Turn],
    generator: &Generator,
    evaluator: &Evaluator,
    reranker: &Reranker,
    width: usize,
) -> Result<(Vec<String>, NBestList)> {
    let nbest = generator.beam_search(input, width);
    let chosen = rerank_nbest(&nbest, generator, evaluator, reranker, turn, context)?;
    Ok((chosen, nbest))
}

/// Reranks an n-best list in its dialog context.
pub fn rerank_nbest(
    nbest: &NBestList,
    generator: &Generator,
    evaluator: &Evaluator,
    reranker: &Reranker,
    turn: &Turn,
    context: &[Turn],
) -> Result<Vec<String>> {
    let cands = candidate_tokens(nbest, &generator.vocab);
    let feats = candidate_features(&cands, evaluator, turn, context)?;
    let i = rerank(nbest, &feats, reranker)?;
    Ok(cands[i].clone())
}

/// Writes the fine-tuning log beside a checkpoint.
pub fn save_log(dir: &Path, log: &FinetuneLog) -> Result<()> {
    checkpoint::ensure_dir(dir)?;
    checkpoint::write_json(&dir.join("finetune_log.json"), log)
}
