//! Loads a JSONL corpus, splits it and prints its statistics.
//!
//! `cargo run --example corpus_stats -- [corpus.jsonl]`

use dialogeval::corpus::{corpus_stats, load_corpus, split_corpus, SCHEMA_VERSION};

fn main() -> anyhow::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| {
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy/corpus.jsonl").to_string()
    });
    let dialogs = load_corpus(&path, SCHEMA_VERSION)?;
    println!("{}", corpus_stats(&dialogs)?);
    let split = split_corpus(&dialogs, [0.8, 0.1, 0.1], 7)?;
    println!(
        "split: {} train / {} dev / {} test dialogs",
        split.train.len(),
        split.dev.len(),
        split.test.len()
    );
    Ok(())
}
