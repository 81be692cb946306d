//! Trains a sentence encoder on the toy corpus by predicting which
//! sentence comes next.

use dialogeval::encoders::{
    successor_accuracy, successor_pairs, train_quick_thought, EmbeddingInit, EncoderKind,
    SentenceEncoderConfig,
};
use dialogeval::toy;

fn main() -> anyhow::Result<()> {
    let dialogs = toy::toy_corpus(40, toy::DEFAULT_SEED);
    let pairs = successor_pairs(&dialogs)?;
    println!(
        "{} successor pairs, chance accuracy {:.3}",
        pairs.len(),
        1.0 / 32.0
    );
    for kind in [
        EncoderKind::Average,
        EncoderKind::Bilstm,
        EncoderKind::Transformer,
    ] {
        let config = SentenceEncoderConfig {
            kind,
            word_dim: 32,
            output_dim: 32,
            batch_size: 32,
            learning_rate: 5e-3,
            max_len: 32,
            vocab_size: 500,
            embedding_init: EmbeddingInit::Random,
            ..SentenceEncoderConfig::default()
        };
        let (enc, log) = train_quick_thought(&config, &dialogs, 10, 1)?;
        println!(
            "{kind:?}: loss {:.3} -> {:.3}, successor accuracy {:.3}",
            log.epoch_loss[0],
            log.epoch_loss.last().unwrap(),
            successor_accuracy(&enc, &pairs)
        );
    }
    Ok(())
}
