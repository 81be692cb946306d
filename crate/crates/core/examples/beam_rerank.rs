//! Trains the toy generator, evaluator and reranker, then shows how the
//! reranker reorders a beam for a few test turns.

use std::time::Instant;

use dialogeval::corpus::Partition;
use dialogeval::generator::build_generator_input;
use dialogeval::pipeline::{Pipeline, PipelineConfig, Stage};
use dialogeval::reranker::{candidate_features, candidate_tokens, rerank};

fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("dialogeval-beam-rerank");
    let config_path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy/pipeline.toml");
    let overrides = vec![format!(
        "paths.checkpoints={}",
        toml::Value::String(root.display().to_string())
    )];
    let p = Pipeline::new(PipelineConfig::load(
        Some(config_path.as_ref()),
        &overrides,
    )?)?;
    for stage in [
        Stage::PrepareData,
        Stage::TrainEncoder,
        Stage::TrainEvaluator,
        Stage::TrainGenerator,
        Stage::MineBeams,
        Stage::TrainReranker,
    ] {
        let start = Instant::now();
        p.run_stage(stage)?;
        println!("{stage}: {:.1}s", start.elapsed().as_secs_f64());
    }

    let (dialogs, split) = p.data()?;
    let gen = p.load_generator()?;
    let ev = p.load_evaluator()?;
    let reranker = p.load_reranker()?;
    let width = 5;
    for d in split.select(&dialogs, Partition::Test).into_iter().take(3) {
        let turn = &d.turns[0];
        let list = gen.beam_search(&gen.input_ids(&build_generator_input(d, 0)?), width);
        let cands = candidate_tokens(&list, &gen.vocab);
        let feats = candidate_features(&cands, &ev, turn, &[])?;
        let scores = reranker.score_all(&feats);
        let pick = rerank(&list, &feats, &reranker)?;
        println!(
            "\nuser: {}\nreference: {}",
            turn.user_text, turn.system_text
        );
        for (i, c) in cands.iter().enumerate() {
            let mark = if i == pick { "*" } else { " " };
            println!(
                "{mark} beam {:>7.3}  reranker {:>7.3}  {}",
                list.candidates[i].score,
                scores[i],
                c.join(" ")
            );
        }
    }
    Ok(())
}
