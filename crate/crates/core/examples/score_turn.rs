//! Trains a small turn evaluator on the toy corpus and scores a few
//! candidate responses to the same user turn.

use std::sync::Arc;

use dialogeval::corpus::{split_corpus, Partition, Turn};
use dialogeval::encoders::{
    train_quick_thought, EmbeddingInit, EncoderKind, SentenceEncoderConfig,
};
use dialogeval::evaluator::{
    evaluator_metrics, train_evaluator, EvaluatorConfig, EvaluatorReport, HEADS,
};
use dialogeval::features::{DialogActInventory, FeatureExtractor, Gazetteer, RuleTagger};
use dialogeval::toy;

fn main() -> anyhow::Result<()> {
    let dialogs = toy::toy_corpus(toy::DEFAULT_DIALOGS, toy::DEFAULT_SEED);
    let split = split_corpus(&dialogs, [0.8, 0.1, 0.1], 3)?;
    let enc_config = SentenceEncoderConfig {
        kind: EncoderKind::Average,
        word_dim: 32,
        output_dim: 32,
        batch_size: 64,
        learning_rate: 5e-3,
        max_len: 32,
        vocab_size: 500,
        embedding_init: EmbeddingInit::Random,
        ..SentenceEncoderConfig::default()
    };
    let (encoder, _) = train_quick_thought(&enc_config, &dialogs, 3, 3)?;
    let fx = FeatureExtractor::new(
        DialogActInventory::default(),
        Arc::new(RuleTagger),
        Gazetteer::new(&toy::toy_gazetteer()),
    );
    let config = EvaluatorConfig {
        context_hidden: 32,
        ffnn_hidden: 32,
        batch_size: 32,
        learning_rate: 1e-3,
        max_epochs: 20,
        ..EvaluatorConfig::default()
    };
    let train = split.select(&dialogs, Partition::Train);
    let test = split.select(&dialogs, Partition::Test);
    let (ev, log) = train_evaluator(
        &train,
        &split.select(&dialogs, Partition::Dev),
        encoder,
        fx,
        &config,
        3,
    )?;
    println!(
        "trained {} epochs, best dev loss {:.4}",
        log.dev_loss.len(),
        log.dev_loss.iter().cloned().fold(f64::INFINITY, f64::min)
    );

    let ex = ev.build_examples(&test)?;
    let out = ev.predict(&ex)?;
    let labels: Vec<_> = ex
        .iter()
        .map(|e| e.labels.expect("toy turns are labelled"))
        .collect();
    let report = EvaluatorReport {
        system: "test split".into(),
        heads: evaluator_metrics(&out, &labels, 0.5)?,
    };
    print!("{report}");

    let context = [Turn::new(
        0,
        "hi , how are you ?",
        "i am good . what do you want to talk about ?",
    )];
    for response in [
        "i love the beatles . have you heard their early albums ?",
        "music is nice .",
        "i do not know .",
    ] {
        let yes = ev
            .evaluate_turn(&Turn::new(1, "let us talk about music", response), &context)?
            .yes();
        let cells: Vec<String> = HEADS
            .iter()
            .zip(yes)
            .map(|(h, p)| format!("{h} {p:.2}"))
            .collect();
        println!("{response:<58} {}", cells.join("  "));
    }
    Ok(())
}
