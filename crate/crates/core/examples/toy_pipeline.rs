//! Runs every stage on the shipped toy corpus and prints both reports.
//!
//! `cargo run --release --example toy_pipeline -- [checkpoint dir]`

use dialogeval::pipeline::{Pipeline, PipelineConfig, Stage};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("dialogeval-toy-pipeline"));
    let config_path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/toy/pipeline.toml");
    let overrides = vec![
        format!(
            "paths.checkpoints={}",
            toml::Value::String(root.join("checkpoints").display().to_string())
        ),
        format!(
            "paths.reports={}",
            toml::Value::String(root.join("reports").display().to_string())
        ),
    ];
    let p = Pipeline::new(PipelineConfig::load(
        Some(config_path.as_ref()),
        &overrides,
    )?)?;
    p.run_all()?;
    let (generation, oracle) = p.generation_report()?;
    print!("{generation}");
    for bound in oracle {
        println!("{}", serde_json::to_string(&bound)?);
    }
    let (evaluator, _) = p.evaluator_report()?;
    print!("{evaluator}");
    println!("artifacts under {}", p.dir(Stage::Evaluate).display());
    Ok(())
}
