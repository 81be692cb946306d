//! Fine-tunes the toy generator against the frozen evaluator for a few
//! values of lambda and reports cross-entropy and evaluator scores on dev.

use dialogeval::corpus::Partition;
use dialogeval::finetune::{finetune_examples, finetune_generator, FinetuneConfig};
use dialogeval::generator::build_generator_input;
use dialogeval::pipeline::{Pipeline, PipelineConfig, Stage};

fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("dialogeval-composite-finetune");
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
    ] {
        p.run_stage(stage)?;
    }
    let (dialogs, split) = p.data()?;
    let ev = p.load_evaluator()?;
    let base = p.load_generator()?;
    let train = finetune_examples(&base, &ev, &split.select(&dialogs, Partition::Train))?;
    let dev = finetune_examples(&base, &ev, &split.select(&dialogs, Partition::Dev))?;
    let probe = split.select(&dialogs, Partition::Dev)[0];
    let input = base.input_ids(&build_generator_input(probe, 0)?);
    println!("user: {}", probe.turns[0].user_text);

    for lambda in [0.0, 1.0, 10.0] {
        let mut gen = base.clone();
        let config = FinetuneConfig {
            lambda,
            learning_rate: 1e-3,
            max_epochs: 2,
            ..FinetuneConfig::default()
        };
        let log = finetune_generator(&mut gen, &ev, &train, &dev, &config, 1)?;
        println!(
            "lambda {lambda:>4}: dev yes-score {:.3} -> {:.3}, dev composite loss {:.3}  | {}",
            log.dev_eval_l1[0],
            log.dev_eval_l1.last().unwrap(),
            log.dev_loss.last().unwrap(),
            gen.vocab.decode(&gen.decode_greedy(&input)).join(" ")
        );
    }
    Ok(())
}
