#![allow(dead_code)]

use std::path::PathBuf;

use dialogeval::corpus::{Dialog, Turn, TurnAnnotation};
use dialogeval::encoders::{EmbeddingInit, EncoderKind, SentenceEncoder, SentenceEncoderConfig};
use dialogeval::evaluator::{Evaluator, EvaluatorConfig};
use dialogeval::features::FeatureExtractor;
use dialogeval::generator::{Generator, GeneratorConfig};
use dialogeval::text::Vocabulary;

pub fn vocab(words: &[&str]) -> Vocabulary {
    Vocabulary::from_tokens(words.iter().map(|w| w.to_string()), words.len())
}

pub fn encoder(vocab: Vocabulary, kind: EncoderKind, dim: usize, seed: u64) -> SentenceEncoder {
    let config = SentenceEncoderConfig {
        kind,
        word_dim: dim,
        output_dim: dim,
        heads: 2,
        batch_size: 8,
        max_len: 16,
        embedding_init: EmbeddingInit::Random,
        ..SentenceEncoderConfig::default()
    };
    SentenceEncoder::new(config, vocab, seed).expect("encoder")
}

pub fn evaluator_config(hidden: usize) -> EvaluatorConfig {
    EvaluatorConfig {
        context_hidden: hidden,
        ffnn_hidden: hidden,
        dropout: 0.0,
        ..EvaluatorConfig::default()
    }
}

pub fn evaluator(vocab: Vocabulary, dim: usize, hidden: usize, seed: u64) -> Evaluator {
    let enc = encoder(vocab, EncoderKind::Average, dim, seed);
    Evaluator::new(
        evaluator_config(hidden),
        enc,
        FeatureExtractor::default(),
        seed + 1,
    )
    .expect("evaluator")
}

pub fn generator(
    vocab: Vocabulary,
    embedding: usize,
    hidden: usize,
    max_decode_len: usize,
    seed: u64,
) -> Generator {
    let config = GeneratorConfig {
        hidden,
        embedding_dim: embedding,
        max_decode_len,
        max_input_len: 32,
        batch_size: 16,
        ..GeneratorConfig::default()
    };
    Generator::new(config, vocab, seed).expect("generator")
}

pub fn dialog(id: &str, turns: &[(&str, &str)], labels: Option<&[[bool; 4]]>) -> Dialog {
    Dialog {
        dialog_id: id.to_string(),
        turns: turns
            .iter()
            .enumerate()
            .map(|(i, (u, s))| Turn::new(i, *u, *s))
            .collect(),
        annotations: labels.map(|ls| ls.iter().map(|&b| TurnAnnotation::from_bits(b)).collect()),
        conversation_rating: None,
    }
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn toy_config_path() -> PathBuf {
    repo_root().join("data/toy/pipeline.toml")
}
