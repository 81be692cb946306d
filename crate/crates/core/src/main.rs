use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dialogeval::corpus::{load_corpus, save_corpus, SCHEMA_VERSION};
use dialogeval::generator::{build_generator_input, Generator};
use dialogeval::metrics::{score_system, MetricReport};
use dialogeval::pipeline::{
    Pipeline, PipelineConfig, ScoreTurnRequest, Stage, Variant, CHECKPOINT_ENV,
};
use dialogeval::reranker::candidate_tokens;
use dialogeval::text::tokenize;
use dialogeval::toy;

#[derive(Parser)]
#[command(
    name = "dialogeval",
    version,
    about = "Dialog quality evaluators and evaluator-guided response generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Configuration override, e.g. `--set generator.hidden=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint root (also read from the environment).
    #[arg(long, env = CHECKPOINT_ENV)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Variants to generate or evaluate (repeatable).
    #[arg(long = "variant", value_name = "NAME")]
    variants: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    PrepareData(Common),
    TrainEncoder(Common),
    TrainEvaluator(Common),
    TrainGenerator(Common),
    MineBeams(Common),
    TrainReranker(Common),
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda: Option<f64>,
        /// Build the soft decoder outputs from reference prefixes (default).
        #[arg(long, conflicts_with = "free_running")]
        teacher_forced: bool,
        /// Build the soft decoder outputs from the model's own expected embeddings.
        #[arg(long)]
        free_running: bool,
        /// Generator checkpoint to start from.
        #[arg(long)]
        checkpoint_in: Option<PathBuf>,
        /// Directory for the fine-tuned generator.
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    Generate(Common),
    Evaluate(Common),
    /// Scores one response in context; prints the four yes-probabilities.
    ScoreTurn {
        #[command(flatten)]
        common: Common,
        /// Context JSON, inline or as a file path.
        #[arg(long)]
        context: String,
        #[arg(long)]
        response: String,
    },
    /// Runs every stage in order.
    Run(Common),
    /// Scores aligned hypothesis and reference files (one sentence per line).
    Metrics {
        #[arg(long = "hyp", required = true)]
        hypotheses: Vec<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Decodes every turn of a JSONL corpus with a generator checkpoint.
    Decode {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Emit this many beam candidates per turn as JSON instead of one response.
        #[arg(long)]
        nbest: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Writes the synthetic corpus and gazetteer.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = toy::DEFAULT_DIALOGS)]
        dialogs: usize,
        #[arg(long, default_value_t = toy::DEFAULT_SEED)]
        seed: u64,
    },
}

fn pipeline(common: &Common, extra: &[String]) -> anyhow::Result<Pipeline> {
    let mut overrides = common.overrides.clone();
    if let Some(c) = &common.checkpoints {
        overrides.push(format!("paths.checkpoints={}", toml_string(c)));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if !common.variants.is_empty() {
        let vs: Vec<Variant> = common
            .variants
            .iter()
            .map(|v| v.parse())
            .collect::<dialogeval::Result<_>>()?;
        let list: Vec<String> = vs.iter().map(|v| format!("\"{}\"", v.name())).collect();
        overrides.push(format!("variants=[{}]", list.join(",")));
    }
    overrides.extend(extra.iter().cloned());
    let config = PipelineConfig::load(common.config.as_deref(), &overrides)?;
    dialogeval::pipeline::record_config(&config)?;
    Ok(Pipeline::new(config)?)
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn run_stage(common: &Common, stage: Stage, extra: &[String]) -> anyhow::Result<()> {
    let p = pipeline(common, extra)?;
    let log = p
        .run_stage(stage)
        .with_context(|| format!("stage {stage} failed"))?;
    println!("{}", serde_json::to_string_pretty(&log)?);
    if stage == Stage::Evaluate {
        let dir = p.dir(Stage::Evaluate);
        print!("{}", std::fs::read_to_string(dir.join("generation.txt"))?);
        if let Ok(t) = std::fs::read_to_string(dir.join("evaluator.txt")) {
            print!("{t}");
        }
    }
    Ok(())
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<Vec<String>>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(tokenize).collect())
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::PrepareData(c) => run_stage(&c, Stage::PrepareData, &[]),
        Command::TrainEncoder(c) => run_stage(&c, Stage::TrainEncoder, &[]),
        Command::TrainEvaluator(c) => run_stage(&c, Stage::TrainEvaluator, &[]),
        Command::TrainGenerator(c) => run_stage(&c, Stage::TrainGenerator, &[]),
        Command::MineBeams(c) => run_stage(&c, Stage::MineBeams, &[]),
        Command::TrainReranker(c) => run_stage(&c, Stage::TrainReranker, &[]),
        Command::Finetune {
            common,
            lambda,
            teacher_forced,
            free_running,
            checkpoint_in,
            checkpoint_out,
        } => {
            let mut extra = Vec::new();
            if let Some(l) = lambda {
                extra.push(format!("finetune.lambda={l:?}"));
            }
            if free_running || teacher_forced {
                extra.push(format!("finetune.free_running={free_running}"));
            }
            if let Some(p) = checkpoint_in {
                extra.push(format!("paths.finetune_input={}", toml_string(&p)));
            }
            if let Some(p) = checkpoint_out {
                extra.push(format!("paths.finetune_output={}", toml_string(&p)));
            }
            run_stage(&common, Stage::Finetune, &extra)
        }
        Command::Generate(c) => run_stage(&c, Stage::Generate, &[]),
        Command::Evaluate(c) => run_stage(&c, Stage::Evaluate, &[]),
        Command::ScoreTurn {
            common,
            context,
            response,
        } => {
            let json = if Path::new(&context).is_file() {
                std::fs::read_to_string(&context)?
            } else {
                context
            };
            let request = ScoreTurnRequest::parse(&json)?;
            let out = pipeline(&common, &[])?.score_turn(&request, &response)?;
            println!("{}", serde_json::to_string_pretty(&out.to_json())?);
            Ok(())
        }
        Command::Run(c) => {
            let p = pipeline(&c, &[])?;
            for log in p.run_all()? {
                println!("{}", serde_json::to_string(&log)?);
            }
            print!(
                "{}",
                std::fs::read_to_string(p.dir(Stage::Evaluate).join("generation.txt"))?
            );
            Ok(())
        }
        Command::Metrics {
            hypotheses,
            reference,
        } => {
            let refs = read_lines(&reference)?;
            let mut report = MetricReport::default();
            for h in &hypotheses {
                let hyps = read_lines(h)?;
                if hyps.len() != refs.len() {
                    bail!(
                        "{} has {} lines but the reference has {}",
                        h.display(),
                        hyps.len(),
                        refs.len()
                    );
                }
                let name = h.file_stem().map_or_else(
                    || h.display().to_string(),
                    |s| s.to_string_lossy().into_owned(),
                );
                report.rows.push(score_system(&name, &hyps, &refs)?);
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprint!("{report}");
            Ok(())
        }
        Command::Decode {
            generator,
            input,
            nbest,
            output,
        } => {
            let gen = Generator::load(&generator)?;
            let dialogs = load_corpus(&input, SCHEMA_VERSION)?;
            let mut lines = Vec::new();
            for d in &dialogs {
                for i in 0..d.turns.len() {
                    let ids = gen.input_ids(&build_generator_input(d, i)?);
                    let line = match nbest {
                        None => gen.vocab.decode(&gen.decode_greedy(&ids)).join(" "),
                        Some(w) => {
                            let list = gen.beam_search(&ids, w);
                            let cands: Vec<serde_json::Value> = candidate_tokens(&list, &gen.vocab)
                                .iter()
                                .zip(&list.candidates)
                                .map(|(t, c)| serde_json::json!({"response": t.join(" "), "score": c.score}))
                                .collect();
                            serde_json::json!({"dialog_id": d.dialog_id, "turn": i, "candidates": cands}).to_string()
                        }
                    };
                    lines.push(line);
                }
            }
            let text = lines.join("\n") + "\n";
            match output {
                Some(p) => {
                    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::ToyCorpus { out, dialogs, seed } => {
            std::fs::create_dir_all(&out)?;
            save_corpus(out.join("corpus.jsonl"), &toy::toy_corpus(dialogs, seed))?;
            std::fs::write(
                out.join("gazetteer.txt"),
                toy::toy_gazetteer().join("\n") + "\n",
            )?;
            println!("wrote {dialogs} dialogs to {}", out.display());
            Ok(())
        }
    }
}
