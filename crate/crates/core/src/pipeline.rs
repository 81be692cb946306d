//! Stage orchestration: a layered TOML configuration, one function per
//! stage, checkpoint directories under a single root, machine-readable
//! stage logs and the final reports.
//!
//! Layout under the checkpoint root:
//!
//! ```text
//! data/       canonical corpus copy, split, statistics
//! encoder/    sentence encoder
//! evaluator/  turn-quality evaluator (with its own encoder copy)
//! generator/  maximum-likelihood generator
//! beams/      mined n-best lists and preference pairs
//! reranker/   pairwise reranker
//! finetune/   evaluator-guided generator
//! outputs/    one JSONL file of responses per variant
//! logs/       one JSON log per stage
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{dir_hash, ensure_dir, read_json, require, sha256_hex, write_json};
use crate::corpus::{
    corpus_stats, load_corpus, save_corpus, split_corpus, DatasetSplit, Dialog, Partition, Turn,
};
use crate::encoders::{train_quick_thought, SentenceEncoder, SentenceEncoderConfig};
use crate::error::{Error, Result};
use crate::evaluator::{
    correlate_with_ratings, evaluator_metrics, train_evaluator, Evaluator, EvaluatorConfig,
    EvaluatorOutput, EvaluatorReport, HEADS,
};
use crate::features::{DialogActInventory, FeatureExtractor, Gazetteer, RuleTagger};
use crate::finetune::{
    finetune_examples, finetune_generator, generate_rr_ft, rerank_nbest, FinetuneConfig,
};
use crate::generator::{
    build_generator_input, train_generator, Generator, GeneratorConfig, NBestList,
};
use crate::metrics::{bleu4_corpus, bleu4_sentence, score_system, MetricReport};
use crate::reranker::{
    candidate_tokens, load_pairs, mine_pairs, save_pairs, train_reranker, Reranker, RerankerConfig,
};
use crate::text::build_vocabulary;

/// Overrides the configured checkpoint root when set.
pub const CHECKPOINT_ENV: &str = "DIALOGEVAL_CHECKPOINTS";
pub const LOG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    S2s,
    S2sRr,
    S2sFt,
    S2sRrFt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::S2s,
        Variant::S2sRr,
        Variant::S2sFt,
        Variant::S2sRrFt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::S2s => "s2s",
            Self::S2sRr => "s2s_rr",
            Self::S2sFt => "s2s_ft",
            Self::S2sRrFt => "s2s_rr_ft",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::S2s => "S2S",
            Self::S2sRr => "S2S_RR",
            Self::S2sFt => "S2S_FT",
            Self::S2sRrFt => "S2S_RR_FT",
        }
    }

    pub fn reranked(self) -> bool {
        matches!(self, Self::S2sRr | Self::S2sRrFt)
    }

    pub fn finetuned(self) -> bool {
        matches!(self, Self::S2sFt | Self::S2sRrFt)
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownLabel {
                label: s.to_string(),
                inventory: "variants (s2s, s2s_rr, s2s_ft, s2s_rr_ft)".into(),
            })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    PrepareData,
    TrainEncoder,
    TrainEvaluator,
    TrainGenerator,
    MineBeams,
    TrainReranker,
    Finetune,
    Generate,
    Evaluate,
    ScoreTurn,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::PrepareData,
        Stage::TrainEncoder,
        Stage::TrainEvaluator,
        Stage::TrainGenerator,
        Stage::MineBeams,
        Stage::TrainReranker,
        Stage::Finetune,
        Stage::Generate,
        Stage::Evaluate,
        Stage::ScoreTurn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PrepareData => "prepare-data",
            Self::TrainEncoder => "train-encoder",
            Self::TrainEvaluator => "train-evaluator",
            Self::TrainGenerator => "train-generator",
            Self::MineBeams => "mine-beams",
            Self::TrainReranker => "train-reranker",
            Self::Finetune => "finetune",
            Self::Generate => "generate",
            Self::Evaluate => "evaluate",
            Self::ScoreTurn => "score-turn",
        }
    }

    /// Checkpoint subdirectory written by the stage.
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::PrepareData => "data",
            Self::TrainEncoder => "encoder",
            Self::TrainEvaluator => "evaluator",
            Self::TrainGenerator => "generator",
            Self::MineBeams => "beams",
            Self::TrainReranker => "reranker",
            Self::Finetune => "finetune",
            Self::Generate => "outputs",
            Self::Evaluate => "reports",
            Self::ScoreTurn => "",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownLabel {
                label: s.to_string(),
                inventory: "pipeline stages".into(),
            })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub gazetteer: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    /// Generator checkpoint fine-tuning starts from (default: the
    /// train-generator output).
    pub finetune_input: Option<PathBuf>,
    /// Where the fine-tuned generator goes (default: `finetune/` under the
    /// checkpoint root).
    pub finetune_output: Option<PathBuf>,
    /// Dialogs for encoder pretraining instead of the training split.
    /// Annotations are not needed.
    pub encoder_corpus: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            gazetteer: None,
            checkpoints: PathBuf::from("checkpoints"),
            reports: PathBuf::from("reports"),
            finetune_input: None,
            finetune_output: None,
            encoder_corpus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub schema_version: String,
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            schema_version: crate::corpus::SCHEMA_VERSION.to_string(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub variants: Vec<Variant>,
    /// Quick-Thought epochs for the sentence encoder.
    pub encoder_epochs: usize,
    /// n-best size for mining, reranking and the RR variants.
    pub beam_width: usize,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub encoder: SentenceEncoderConfig,
    pub evaluator: EvaluatorConfig,
    pub generator: GeneratorConfig,
    pub reranker: RerankerConfig,
    pub finetune: FinetuneConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            variants: Variant::ALL.to_vec(),
            encoder_epochs: 5,
            beam_width: 15,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            encoder: SentenceEncoderConfig::default(),
            evaluator: EvaluatorConfig::default(),
            generator: GeneratorConfig::default(),
            reranker: RerankerConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn override_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(value.to_string())),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    table.insert(
        parts[parts.len() - 1].to_string(),
        override_value(value.trim()),
    );
    Ok(())
}

impl PipelineConfig {
    /// Defaults, then the file (if any), then the checkpoint-root
    /// environment variable, then `key=value` overrides. Relative paths
    /// from the file resolve against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Ok(root) = std::env::var(CHECKPOINT_ENV) {
            if !root.is_empty() {
                apply_override(
                    &mut table,
                    &format!("paths.checkpoints={}", toml::Value::String(root)),
                )?;
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = path.and_then(Path::parent) {
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.checkpoints);
        fix(&mut self.paths.reports);
        for p in [
            &mut self.paths.gazetteer,
            &mut self.paths.finetune_input,
            &mut self.paths.finetune_output,
            &mut self.paths.encoder_corpus,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("at least one variant is required".into()));
        }
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        let sum: f64 = self.data.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.data.split.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.data.split
            )));
        }
        self.encoder.validate()?;
        self.evaluator.validate()?;
        self.reranker.validate()?;
        self.finetune.validate()?;
        if self.generator.hidden == 0
            || self.generator.embedding_dim == 0
            || self.generator.batch_size == 0
        {
            return Err(Error::Config("generator sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Artifact hashes produced by one stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub format_version: u32,
    pub stage: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    pub details: serde_json::Value,
}

/// One generated response with the n-best list it was picked from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedTurn {
    pub dialog_id: String,
    pub turn: usize,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
}

/// n-best list mined for one dev turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedTurn {
    pub dialog_id: String,
    pub turn: usize,
    pub candidates: Vec<String>,
    pub beam_scores: Vec<f64>,
    pub bleu: Vec<f64>,
}

/// Oracle-selection check for one reranked variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBound {
    pub system: String,
    pub top_beam_bleu4: f64,
    pub oracle_bleu4: f64,
}

/// A turn to score: preceding turns, the current user utterance, and
/// optional annotations of the current turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTurnRequest {
    #[serde(default)]
    pub context: Vec<ContextTurn>,
    pub user: String,
    #[serde(default)]
    pub da_user: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub entities_user: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextTurn {
    pub user: String,
    pub system: String,
    #[serde(default)]
    pub da_user: Option<String>,
    #[serde(default)]
    pub da_system: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub entities_user: Option<Vec<String>>,
    #[serde(default)]
    pub entities_system: Option<Vec<String>>,
}

impl ScoreTurnRequest {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Malformed {
            line: e.line(),
            field: "context".into(),
            message: e.to_string(),
        })
    }

    /// The context turns and the turn being scored.
    pub fn turns(&self, response: &str) -> (Vec<Turn>, Turn) {
        let context = self
            .context
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut t = Turn::new(i, c.user.clone(), c.system.clone());
                t.dialog_act_user = c.da_user.clone();
                t.dialog_act_system = c.da_system.clone();
                t.topic = c.topic.clone();
                t.entities_user = c
                    .entities_user
                    .as_ref()
                    .map(|v| v.iter().cloned().collect());
                t.entities_system = c
                    .entities_system
                    .as_ref()
                    .map(|v| v.iter().cloned().collect());
                t
            })
            .collect::<Vec<_>>();
        let mut turn = Turn::new(context.len(), self.user.clone(), response);
        turn.dialog_act_user = self.da_user.clone();
        turn.topic = self.topic.clone();
        turn.entities_user = self
            .entities_user
            .as_ref()
            .map(|v| v.iter().cloned().collect());
        (context, turn)
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                line: i + 1,
                field: "record".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Every turn of `dialogs` as `(dialog, turn index)`.
fn turns_of<'a>(dialogs: &[&'a Dialog]) -> Vec<(&'a Dialog, usize)> {
    dialogs
        .iter()
        .flat_map(|d| (0..d.turns.len()).map(move |i| (*d, i)))
        .collect()
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn root(&self) -> &Path {
        &self.config.paths.checkpoints
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        if stage == Stage::Evaluate {
            self.config.paths.reports.clone()
        } else if let (Stage::Finetune, Some(p)) = (stage, &self.config.paths.finetune_output) {
            p.clone()
        } else {
            self.root().join(stage.dir_name())
        }
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        self.root()
            .join("logs")
            .join(format!("{}.json", stage.name()))
    }

    pub fn output_path(&self, variant: Variant) -> PathBuf {
        self.dir(Stage::Generate)
            .join(format!("{}.jsonl", variant.name()))
    }

    /// Runs every stage except score-turn in dependency order.
    pub fn run_all(&self) -> Result<Vec<StageLog>> {
        let mut stages = vec![
            Stage::PrepareData,
            Stage::TrainEncoder,
            Stage::TrainEvaluator,
            Stage::TrainGenerator,
        ];
        let vs = &self.config.variants;
        if vs.iter().any(|v| v.reranked()) {
            stages.extend([Stage::MineBeams, Stage::TrainReranker]);
        }
        if vs.iter().any(|v| v.finetuned()) {
            stages.push(Stage::Finetune);
        }
        stages.extend([Stage::Generate, Stage::Evaluate]);
        stages.into_iter().map(|s| self.run_stage(s)).collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageLog> {
        log::info!("stage {stage}");
        let (inputs, artifacts, details) = match stage {
            Stage::PrepareData => self.prepare_data()?,
            Stage::TrainEncoder => self.train_encoder()?,
            Stage::TrainEvaluator => self.train_evaluator()?,
            Stage::TrainGenerator => self.train_generator()?,
            Stage::MineBeams => self.mine_beams()?,
            Stage::TrainReranker => self.train_reranker()?,
            Stage::Finetune => self.finetune()?,
            Stage::Generate => self.generate()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::ScoreTurn => {
                return Err(Error::Config(
                    "score-turn takes a context and a response; use Pipeline::score_turn".into(),
                ))
            }
        };
        let log = StageLog {
            format_version: LOG_FORMAT_VERSION,
            stage: stage.name().to_string(),
            seed: self.config.seed,
            inputs,
            artifacts,
            details,
        };
        let path = self.log_path(stage);
        ensure_dir(path.parent().expect("log dir"))?;
        write_json(&path, &log)?;
        Ok(log)
    }

    fn need(&self, stage: Stage) -> Result<(String, String)> {
        let dir = self.dir(stage);
        require(&dir, stage.name())?;
        Ok((stage.dir_name().to_string(), dir_hash(&dir)?))
    }

    /// The canonical corpus and its split.
    pub fn data(&self) -> Result<(Vec<Dialog>, DatasetSplit)> {
        let dir = self.dir(Stage::PrepareData);
        let corpus = dir.join("corpus.jsonl");
        let split = dir.join("split.json");
        require(&corpus, Stage::PrepareData.name())?;
        require(&split, Stage::PrepareData.name())?;
        Ok((
            load_corpus(&corpus, &self.config.data.schema_version)?,
            read_json(&split)?,
        ))
    }

    fn extractor(&self) -> Result<FeatureExtractor> {
        let gazetteer = match &self.config.paths.gazetteer {
            Some(p) => Gazetteer::load(p)?,
            None => Gazetteer::default(),
        };
        Ok(FeatureExtractor::new(
            DialogActInventory::default(),
            Arc::new(RuleTagger),
            gazetteer,
        ))
    }

    pub fn load_encoder(&self) -> Result<SentenceEncoder> {
        let dir = self.dir(Stage::TrainEncoder);
        require(&dir, Stage::TrainEncoder.name())?;
        SentenceEncoder::load(&dir)
    }

    pub fn load_evaluator(&self) -> Result<Evaluator> {
        let dir = self.dir(Stage::TrainEvaluator);
        require(&dir, Stage::TrainEvaluator.name())?;
        Evaluator::load(&dir)
    }

    pub fn load_generator(&self) -> Result<Generator> {
        let dir = self.dir(Stage::TrainGenerator);
        require(&dir, Stage::TrainGenerator.name())?;
        Generator::load(&dir)
    }

    pub fn load_finetuned(&self) -> Result<Generator> {
        let dir = self.dir(Stage::Finetune);
        require(&dir, Stage::Finetune.name())?;
        Generator::load(&dir)
    }

    pub fn load_reranker(&self) -> Result<Reranker> {
        let dir = self.dir(Stage::TrainReranker);
        require(&dir, Stage::TrainReranker.name())?;
        Reranker::load(&dir)
    }

    fn prepare_data(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let src = &self.config.paths.corpus;
        if !src.exists() {
            return Err(Error::MissingArtifact {
                path: src.clone(),
                stage: "corpus file (paths.corpus)".into(),
            });
        }
        let dialogs = load_corpus(src, &self.config.data.schema_version)?;
        let split = split_corpus(&dialogs, self.config.data.split, self.config.seed)?;
        let stats = corpus_stats(&dialogs)?;
        let dir = self.dir(Stage::PrepareData);
        ensure_dir(&dir)?;
        save_corpus(dir.join("corpus.jsonl"), &dialogs)?;
        write_json(&dir.join("split.json"), &split)?;
        write_json(&dir.join("stats.json"), &stats)?;
        let inputs = BTreeMap::from([("corpus".to_string(), file_hash(src)?)]);
        let artifacts = BTreeMap::from([("data".to_string(), dir_hash(&dir)?)]);
        let details = serde_json::json!({
            "train": split.train.len(),
            "dev": split.dev.len(),
            "test": split.test.len(),
            "stats": stats,
        });
        Ok((inputs, artifacts, details))
    }

    fn train_encoder(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let mut inputs = BTreeMap::from([self.need(Stage::PrepareData)?]);
        let train: Vec<Dialog> = match &self.config.paths.encoder_corpus {
            Some(path) => {
                inputs.insert("encoder_corpus".into(), file_hash(path)?);
                load_corpus(path, &self.config.data.schema_version)?
            }
            None => {
                let (dialogs, split) = self.data()?;
                split
                    .select(&dialogs, Partition::Train)
                    .into_iter()
                    .cloned()
                    .collect()
            }
        };
        let (enc, log) = train_quick_thought(
            &self.config.encoder,
            &train,
            self.config.encoder_epochs,
            self.config.seed,
        )?;
        let dir = self.dir(Stage::TrainEncoder);
        enc.save(&dir)?;
        let artifacts = BTreeMap::from([("encoder".to_string(), dir_hash(&dir)?)]);
        Ok((inputs, artifacts, serde_json::to_value(log)?))
    }

    fn train_evaluator(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let inputs = BTreeMap::from([
            self.need(Stage::PrepareData)?,
            self.need(Stage::TrainEncoder)?,
        ]);
        let (dialogs, split) = self.data()?;
        let annotated = |p| -> Vec<&Dialog> {
            split
                .select(&dialogs, p)
                .into_iter()
                .filter(|d| d.is_annotated())
                .collect()
        };
        let encoder = self.load_encoder()?;
        let (ev, log) = train_evaluator(
            &annotated(Partition::Train),
            &annotated(Partition::Dev),
            encoder,
            self.extractor()?,
            &self.config.evaluator,
            self.config.seed,
        )?;
        let dir = self.dir(Stage::TrainEvaluator);
        ev.save(&dir)?;
        let artifacts = BTreeMap::from([("evaluator".to_string(), dir_hash(&dir)?)]);
        Ok((inputs, artifacts, serde_json::to_value(log)?))
    }

    fn train_generator(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let inputs = BTreeMap::from([self.need(Stage::PrepareData)?]);
        let (dialogs, split) = self.data()?;
        let train = split.select(&dialogs, Partition::Train);
        let dev = split.select(&dialogs, Partition::Dev);
        let owned: Vec<Dialog> = train.iter().map(|d| (*d).clone()).collect();
        let vocab = build_vocabulary(&owned, self.config.generator.vocab_size)?;
        let mut gen = Generator::new(self.config.generator.clone(), vocab, self.config.seed)?;
        let train_pairs = gen.pairs(&train)?;
        let dev_pairs = gen.pairs(&dev)?;
        let log = train_generator(&mut gen, &train_pairs, &dev_pairs, self.config.seed)?;
        let dir = self.dir(Stage::TrainGenerator);
        gen.save(&dir)?;
        let artifacts = BTreeMap::from([("generator".to_string(), dir_hash(&dir)?)]);
        Ok((inputs, artifacts, serde_json::to_value(log)?))
    }

    fn mine_beams(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let inputs = BTreeMap::from([
            self.need(Stage::PrepareData)?,
            self.need(Stage::TrainEvaluator)?,
            self.need(Stage::TrainGenerator)?,
        ]);
        let (dialogs, split) = self.data()?;
        let gen = self.load_generator()?;
        let ev = self.load_evaluator()?;
        let dev = split.select(&dialogs, Partition::Dev);
        let width = self.config.beam_width;
        let mined: Vec<(MinedTurn, Vec<crate::reranker::PreferencePair>)> = turns_of(&dev)
            .par_iter()
            .map(|&(d, i)| {
                let input = gen.input_ids(&build_generator_input(d, i)?);
                let nbest = gen.beam_search(&input, width);
                let turn = &d.turns[i];
                let reference = &turn.system_tokens;
                let pairs = mine_pairs(&nbest, &gen.vocab, reference, &ev, turn, &d.turns[..i])?;
                let cands = candidate_tokens(&nbest, &gen.vocab);
                let bleu = cands
                    .iter()
                    .map(|c| bleu4_sentence(c, reference))
                    .collect::<Result<Vec<_>>>()?;
                Ok((
                    MinedTurn {
                        dialog_id: d.dialog_id.clone(),
                        turn: i,
                        candidates: cands.iter().map(|c| c.join(" ")).collect(),
                        beam_scores: nbest.candidates.iter().map(|c| c.score).collect(),
                        bleu,
                    },
                    pairs,
                ))
            })
            .collect::<Result<_>>()?;
        let mut pairs = Vec::new();
        let mut lists = Vec::new();
        for (m, p) in mined {
            lists.push(m);
            pairs.extend(p);
        }
        if pairs.is_empty() {
            return Err(Error::Empty(
                "beam mining produced no preference pairs".into(),
            ));
        }
        let dir = self.dir(Stage::MineBeams);
        ensure_dir(&dir)?;
        save_pairs(&dir.join("pairs.jsonl"), &pairs)?;
        write_jsonl(&dir.join("nbest.jsonl"), &lists)?;
        let artifacts = BTreeMap::from([("beams".to_string(), dir_hash(&dir)?)]);
        let details = serde_json::json!({"turns": lists.len(), "pairs": pairs.len()});
        Ok((inputs, artifacts, details))
    }

    fn train_reranker(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let inputs = BTreeMap::from([self.need(Stage::MineBeams)?]);
        let pairs = load_pairs(&self.dir(Stage::MineBeams).join("pairs.jsonl"))?;
        let (rr, log) = train_reranker(&pairs, &self.config.reranker, self.config.seed)?;
        let dir = self.dir(Stage::TrainReranker);
        rr.save(&dir)?;
        let artifacts = BTreeMap::from([("reranker".to_string(), dir_hash(&dir)?)]);
        Ok((inputs, artifacts, serde_json::to_value(log)?))
    }

    fn finetune(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let generator_in = match &self.config.paths.finetune_input {
            Some(p) => {
                require(p, Stage::TrainGenerator.name())?;
                ("generator".to_string(), dir_hash(p)?)
            }
            None => self.need(Stage::TrainGenerator)?,
        };
        let inputs = BTreeMap::from([
            self.need(Stage::PrepareData)?,
            self.need(Stage::TrainEvaluator)?,
            generator_in,
        ]);
        let (dialogs, split) = self.data()?;
        let mut gen = match &self.config.paths.finetune_input {
            Some(p) => Generator::load(p)?,
            None => self.load_generator()?,
        };
        let ev = self.load_evaluator()?;
        let before = dir_hash(&self.dir(Stage::TrainEvaluator))?;
        let train = finetune_examples(&gen, &ev, &split.select(&dialogs, Partition::Train))?;
        let dev = finetune_examples(&gen, &ev, &split.select(&dialogs, Partition::Dev))?;
        let log = finetune_generator(
            &mut gen,
            &ev,
            &train,
            &dev,
            &self.config.finetune,
            self.config.seed,
        )?;
        let after = dir_hash(&self.dir(Stage::TrainEvaluator))?;
        if before != after {
            return Err(Error::InvalidArgument(
                "evaluator checkpoint changed during fine-tuning".into(),
            ));
        }
        let dir = self.dir(Stage::Finetune);
        gen.save(&dir)?;
        crate::finetune::save_log(&dir, &log)?;
        let artifacts = BTreeMap::from([("finetune".to_string(), dir_hash(&dir)?)]);
        let mut details = serde_json::to_value(&log)?;
        details["evaluator_checkpoint_hash"] = serde_json::Value::String(after);
        Ok((inputs, artifacts, details))
    }

    /// Responses of `variant` for every turn of `dialogs`.
    pub fn generate_variant(
        &self,
        variant: Variant,
        dialogs: &[&Dialog],
    ) -> Result<Vec<GeneratedTurn>> {
        let gen = if variant.finetuned() {
            self.load_finetuned()?
        } else {
            self.load_generator()?
        };
        let rr = if variant.reranked() {
            Some((self.load_reranker()?, self.load_evaluator()?))
        } else {
            None
        };
        let width = self.config.beam_width;
        turns_of(dialogs)
            .par_iter()
            .map(|&(d, i)| {
                let input = gen.input_ids(&build_generator_input(d, i)?);
                let (tokens, candidates) = match &rr {
                    None => (gen.vocab.decode(&gen.decode_greedy(&input)), Vec::new()),
                    Some((reranker, ev)) => {
                        let (chosen, nbest) = generate_rr_ft(
                            &input,
                            &d.turns[i],
                            &d.turns[..i],
                            &gen,
                            ev,
                            reranker,
                            width,
                        )?;
                        let cands = candidate_tokens(&nbest, &gen.vocab);
                        (chosen, cands.iter().map(|c| c.join(" ")).collect())
                    }
                };
                Ok(GeneratedTurn {
                    dialog_id: d.dialog_id.clone(),
                    turn: i,
                    response: tokens.join(" "),
                    candidates,
                })
            })
            .collect()
    }

    fn generate(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let mut inputs = BTreeMap::from([
            self.need(Stage::PrepareData)?,
            self.need(Stage::TrainGenerator)?,
        ]);
        for v in &self.config.variants {
            if v.reranked() {
                inputs.extend([
                    self.need(Stage::TrainReranker)?,
                    self.need(Stage::TrainEvaluator)?,
                ]);
            }
            if v.finetuned() {
                inputs.extend([self.need(Stage::Finetune)?]);
            }
        }
        let (dialogs, split) = self.data()?;
        let test = split.select(&dialogs, Partition::Test);
        let dir = self.dir(Stage::Generate);
        ensure_dir(&dir)?;
        let mut artifacts = BTreeMap::new();
        for &v in &self.config.variants {
            let rows = self.generate_variant(v, &test)?;
            let path = self.output_path(v);
            write_jsonl(&path, &rows)?;
            artifacts.insert(v.name().to_string(), file_hash(&path)?);
        }
        Ok((
            inputs,
            artifacts,
            serde_json::json!({"turns": turns_of(&test).len()}),
        ))
    }

    pub fn read_outputs(&self, variant: Variant) -> Result<Vec<GeneratedTurn>> {
        let path = self.output_path(variant);
        require(&path, Stage::Generate.name())?;
        read_jsonl(&path)
    }

    /// Metric rows for the configured variants against test references.
    pub fn generation_report(&self) -> Result<(MetricReport, Vec<OracleBound>)> {
        let (dialogs, split) = self.data()?;
        let test = split.select(&dialogs, Partition::Test);
        let by_id: BTreeMap<&str, &Dialog> =
            test.iter().map(|d| (d.dialog_id.as_str(), *d)).collect();
        let mut report = MetricReport::default();
        let mut bounds = Vec::new();
        for &v in &self.config.variants {
            let rows = self.read_outputs(v)?;
            let mut hyps = Vec::with_capacity(rows.len());
            let mut refs = Vec::with_capacity(rows.len());
            for r in &rows {
                let d = by_id.get(r.dialog_id.as_str()).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "output for unknown test dialog {}",
                        r.dialog_id
                    ))
                })?;
                let turn = d.turns.get(r.turn).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "output for missing turn {} of {}",
                        r.turn, r.dialog_id
                    ))
                })?;
                hyps.push(crate::text::tokenize(&r.response));
                refs.push(turn.system_tokens.clone());
            }
            report.rows.push(score_system(v.label(), &hyps, &refs)?);
            if v.reranked() && rows.iter().all(|r| !r.candidates.is_empty()) {
                bounds.push(oracle_bound(v.label(), &rows, &refs)?);
            }
        }
        Ok((report, bounds))
    }

    /// Classification scores of the evaluator on annotated test turns.
    pub fn evaluator_report(&self) -> Result<(EvaluatorReport, Option<serde_json::Value>)> {
        let (dialogs, split) = self.data()?;
        let test: Vec<&Dialog> = split
            .select(&dialogs, Partition::Test)
            .into_iter()
            .filter(|d| d.is_annotated())
            .collect();
        let ev = self.load_evaluator()?;
        let examples = ev.build_examples(&test)?;
        let outputs = ev.predict(&examples)?;
        let labels: Vec<[bool; 4]> = examples.iter().filter_map(|e| e.labels).collect();
        let heads = evaluator_metrics(&outputs, &labels, ev.config.threshold)?;
        let rated: Vec<(&EvaluatorOutput, u8)> = outputs
            .iter()
            .zip(&examples)
            .filter_map(|(o, e)| e.rating.map(|r| (o, r)))
            .collect();
        let correlations = if rated.len() >= 3 {
            let yes: Vec<[f64; 4]> = rated.iter().map(|(o, _)| o.yes()).collect();
            let ratings: Vec<u8> = rated.iter().map(|(_, r)| *r).collect();
            correlate_with_ratings(&yes, &ratings).ok().map(|c| {
                let mut m = serde_json::Map::new();
                for (h, (r, p)) in HEADS.iter().zip(c) {
                    m.insert(h.to_string(), serde_json::json!({"r": r, "p": p}));
                }
                serde_json::Value::Object(m)
            })
        } else {
            None
        };
        Ok((
            EvaluatorReport {
                system: "evaluator (test turns)".into(),
                heads,
            },
            correlations,
        ))
    }

    fn evaluate(
        &self,
    ) -> Result<(
        BTreeMap<String, String>,
        BTreeMap<String, String>,
        serde_json::Value,
    )> {
        let mut inputs = BTreeMap::from([self.need(Stage::PrepareData)?]);
        for &v in &self.config.variants {
            inputs.insert(
                format!("outputs/{}", v.name()),
                file_hash(&self.output_path(v))?,
            );
        }
        let (report, bounds) = self.generation_report()?;
        let dir = self.dir(Stage::Evaluate);
        ensure_dir(&dir)?;
        write_json(&dir.join("generation.json"), &report)?;
        std::fs::write(dir.join("generation.txt"), report.to_string())
            .map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("oracle.json"), &bounds)?;
        let mut artifacts = BTreeMap::from([
            (
                "generation.json".to_string(),
                file_hash(&dir.join("generation.json"))?,
            ),
            (
                "oracle.json".to_string(),
                file_hash(&dir.join("oracle.json"))?,
            ),
        ]);
        if self.dir(Stage::TrainEvaluator).exists() {
            let (ev_report, corr) = self.evaluator_report()?;
            let json = serde_json::json!({"report": ev_report, "rating_correlations": corr});
            write_json(&dir.join("evaluator.json"), &json)?;
            std::fs::write(dir.join("evaluator.txt"), ev_report.to_string())
                .map_err(|e| Error::io(&dir, e))?;
            artifacts.insert(
                "evaluator.json".into(),
                file_hash(&dir.join("evaluator.json"))?,
            );
        }
        let details = serde_json::json!({"rows": report.rows.len(), "oracle": bounds});
        Ok((inputs, artifacts, details))
    }

    /// Scores one response in context with the trained evaluator.
    pub fn score_turn(
        &self,
        request: &ScoreTurnRequest,
        response: &str,
    ) -> Result<EvaluatorOutput> {
        let ev = self.load_evaluator()?;
        let (context, turn) = request.turns(response);
        ev.evaluate_turn(&turn, &context)
    }

    /// Reranks one n-best list with the trained models.
    pub fn rerank(
        &self,
        nbest: &NBestList,
        dialog: &Dialog,
        turn: usize,
        finetuned: bool,
    ) -> Result<Vec<String>> {
        let gen = if finetuned {
            self.load_finetuned()?
        } else {
            self.load_generator()?
        };
        rerank_nbest(
            nbest,
            &gen,
            &self.load_evaluator()?,
            &self.load_reranker()?,
            &dialog.turns[turn],
            &dialog.turns[..turn],
        )
    }
}

/// Corpus BLEU of top-beam selection versus per-turn selection of the
/// candidate with the best sentence BLEU (ties keep the better beam rank).
pub fn oracle_bound(
    system: &str,
    rows: &[GeneratedTurn],
    refs: &[Vec<String>],
) -> Result<OracleBound> {
    let mut top = Vec::with_capacity(rows.len());
    let mut oracle = Vec::with_capacity(rows.len());
    for (r, reference) in rows.iter().zip(refs) {
        let cands: Vec<Vec<String>> = r
            .candidates
            .iter()
            .map(|c| crate::text::tokenize(c))
            .collect();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, c) in cands.iter().enumerate() {
            let s = bleu4_sentence(c, reference)?;
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        top.push(cands[0].clone());
        oracle.push(cands[best].clone());
    }
    Ok(OracleBound {
        system: system.to_string(),
        top_beam_bleu4: bleu4_corpus(&top, refs)?,
        oracle_bleu4: bleu4_corpus(&oracle, refs)?,
    })
}

/// Writes the config that produced a run beside its checkpoints.
pub fn record_config(config: &PipelineConfig) -> Result<()> {
    let root = &config.paths.checkpoints;
    ensure_dir(root)?;
    let text = config.to_toml()?;
    let path = root.join("pipeline.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn overrides_apply_after_file_values() {
        let mut t: toml::Table = "seed = 1\n[generator]\nhidden = 8\n".parse().unwrap();
        apply_override(&mut t, "generator.hidden=16").unwrap();
        apply_override(&mut t, "paths.corpus=data/x.jsonl").unwrap();
        let c: PipelineConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(c.generator.hidden, 16);
        assert_eq!(c.paths.corpus, PathBuf::from("data/x.jsonl"));
        assert_eq!(c.seed, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("[generator]\nhiden = 3\n").is_err());
        assert!(PipelineConfig::from_toml("beam_width = 0\n").is_err());
        let c = PipelineConfig::from_toml("variants = [\"s2s\", \"s2s_rr\"]\n").unwrap();
        assert_eq!(c.variants, vec![Variant::S2s, Variant::S2sRr]);
    }

    #[test]
    fn missing_dependency_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = PipelineConfig::default();
        c.paths.checkpoints = dir.path().join("ck");
        let p = Pipeline::new(c).unwrap();
        match p.run_stage(Stage::TrainEncoder) {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, "prepare-data"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
