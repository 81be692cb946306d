//! Annotated dialog corpora: data model, JSON-lines ingestion, splitting and
//! descriptive statistics.
//!
//! One dialog per line:
//!
//! ```text
//! {"schema_version":"1","dialog_id":"d0","rating":4,"turns":[
//!   {"user":"hi","system":"hello there","da_user":"greeting","topic":"Phatic",
//!    "entities_user":[],"labels":{"comprehensible":1,"on_topic":1,"interesting":0,"continue":1,"scalar":3}}]}
//! ```
//!
//! Optional keys are omitted when absent. Saving always writes keys in the
//! order above, so `save(load(f))` reproduces a canonical file byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

pub const SCHEMA_VERSION: &str = "1";

/// The 26-class topic inventory used by the topic feature.
pub const TOPICS: [&str; 26] = [
    "Sports",
    "Movies",
    "Music",
    "Politics",
    "News",
    "Books",
    "Technology",
    "Science",
    "Travel",
    "Food",
    "Fashion",
    "Games",
    "Celebrities",
    "Health",
    "Education",
    "Business",
    "Weather",
    "Animals",
    "Art",
    "History",
    "Religion",
    "Literature",
    "Entertainment",
    "Phatic",
    "Interactive",
    "Other",
];

pub fn topic_index(label: &str) -> Option<usize> {
    TOPICS.iter().position(|t| *t == label)
}

/// One user utterance and the system response to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Turn {
    pub turn_index: usize,
    pub user_text: String,
    pub system_text: String,
    pub user_tokens: Vec<String>,
    pub system_tokens: Vec<String>,
    pub dialog_act_user: Option<String>,
    pub dialog_act_system: Option<String>,
    pub topic: Option<String>,
    pub entities_user: Option<BTreeSet<String>>,
    pub entities_system: Option<BTreeSet<String>>,
}

impl Turn {
    pub fn new(turn_index: usize, user: impl Into<String>, system: impl Into<String>) -> Self {
        let user_text = user.into();
        let system_text = system.into();
        Self {
            turn_index,
            user_tokens: tokenize(&user_text),
            system_tokens: tokenize(&system_text),
            user_text,
            system_text,
            dialog_act_user: None,
            dialog_act_system: None,
            topic: None,
            entities_user: None,
            entities_system: None,
        }
    }

    /// Replaces the system side, retokenizing it. Corpus-supplied system
    /// act and entities described the old response, so they are dropped.
    pub fn with_system(&self, system: impl Into<String>) -> Self {
        let mut t = self.clone();
        t.system_text = system.into();
        t.system_tokens = tokenize(&t.system_text);
        t.dialog_act_system = None;
        t.entities_system = None;
        t
    }
}

/// The four binary judgments collected for a system response.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TurnAnnotation {
    pub comprehensible: bool,
    pub on_topic: bool,
    pub interesting: bool,
    pub continue_conversation: bool,
    pub scalar_rating: Option<u8>,
}

impl TurnAnnotation {
    pub fn from_bits(bits: [bool; 4]) -> Self {
        Self {
            comprehensible: bits[0],
            on_topic: bits[1],
            interesting: bits[2],
            continue_conversation: bits[3],
            scalar_rating: None,
        }
    }

    /// Labels in head order: comprehensible, on-topic, interesting, continue.
    pub fn bits(&self) -> [bool; 4] {
        [
            self.comprehensible,
            self.on_topic,
            self.interesting,
            self.continue_conversation,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialog {
    pub dialog_id: String,
    pub turns: Vec<Turn>,
    pub annotations: Option<Vec<TurnAnnotation>>,
    pub conversation_rating: Option<u8>,
}

impl Dialog {
    pub fn is_annotated(&self) -> bool {
        self.annotations.is_some()
    }

    pub fn annotation(&self, turn: usize) -> Option<&TurnAnnotation> {
        self.annotations.as_ref().and_then(|a| a.get(turn))
    }
}

/// Dialog-level train/dev/test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<String>,
    pub dev: BTreeSet<String>,
    pub test: BTreeSet<String>,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    pub fn select<'a>(&self, dialogs: &'a [Dialog], part: Partition) -> Vec<&'a Dialog> {
        let ids = match part {
            Partition::Train => &self.train,
            Partition::Dev => &self.dev,
            Partition::Test => &self.test,
        };
        dialogs
            .iter()
            .filter(|d| ids.contains(&d.dialog_id))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LoadMode {
    /// Any invalid line fails the whole load.
    #[default]
    Strict,
    /// Invalid lines are skipped and reported.
    Lenient,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub dialogs: Vec<Dialog>,
    pub rejected: Vec<Error>,
}

// Wire records. Field order here is the canonical key order.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogRecord {
    schema_version: String,
    dialog_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rating: Option<i64>,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    user: String,
    system: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    da_user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    da_system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entities_user: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entities_system: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<LabelsRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsRecord {
    comprehensible: i64,
    on_topic: i64,
    interesting: i64,
    #[serde(rename = "continue")]
    continue_: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scalar: Option<i64>,
}

fn field_error(line: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Malformed {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn binary(line: usize, field: &str, v: i64) -> Result<bool> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(field_error(
            line,
            field,
            format!("expected 0 or 1, found {v}"),
        )),
    }
}

fn rating(line: usize, field: &str, v: Option<i64>) -> Result<Option<u8>> {
    match v {
        None => Ok(None),
        Some(r @ 1..=5) => Ok(Some(r as u8)),
        Some(r) => Err(field_error(
            line,
            field,
            format!("expected 1..=5, found {r}"),
        )),
    }
}

fn record_to_dialog(rec: DialogRecord, line: usize, schema_version: &str) -> Result<Dialog> {
    if rec.schema_version != schema_version {
        return Err(Error::SchemaVersion {
            line,
            expected: schema_version.to_string(),
            found: rec.schema_version,
        });
    }
    if rec.dialog_id.is_empty() {
        return Err(field_error(line, "dialog_id", "must be nonempty"));
    }
    let conversation_rating = rating(line, "rating", rec.rating)?;
    let labeled = rec.turns.iter().filter(|t| t.labels.is_some()).count();
    if labeled != 0 && labeled != rec.turns.len() {
        return Err(field_error(
            line,
            "labels",
            format!(
                "{labeled} of {} turns labeled; annotations must cover every turn",
                rec.turns.len()
            ),
        ));
    }
    let mut turns = Vec::with_capacity(rec.turns.len());
    let mut annotations = Vec::new();
    for (i, t) in rec.turns.into_iter().enumerate() {
        if let Some(topic) = &t.topic {
            if topic_index(topic).is_none() {
                return Err(field_error(
                    line,
                    format!("turns[{i}].topic"),
                    format!("{topic:?} is not in the topic inventory"),
                ));
            }
        }
        if let Some(l) = t.labels {
            let f = |name: &str| format!("turns[{i}].labels.{name}");
            annotations.push(TurnAnnotation {
                comprehensible: binary(line, &f("comprehensible"), l.comprehensible)?,
                on_topic: binary(line, &f("on_topic"), l.on_topic)?,
                interesting: binary(line, &f("interesting"), l.interesting)?,
                continue_conversation: binary(line, &f("continue"), l.continue_)?,
                scalar_rating: rating(line, &f("scalar"), l.scalar)?,
            });
        }
        let mut turn = Turn::new(i, t.user, t.system);
        turn.dialog_act_user = t.da_user;
        turn.dialog_act_system = t.da_system;
        turn.topic = t.topic;
        turn.entities_user = t.entities_user.map(|v| v.into_iter().collect());
        turn.entities_system = t.entities_system.map(|v| v.into_iter().collect());
        turns.push(turn);
    }
    Ok(Dialog {
        dialog_id: rec.dialog_id,
        turns,
        annotations: (labeled > 0).then_some(annotations),
        conversation_rating,
    })
}

fn dialog_to_record(d: &Dialog) -> DialogRecord {
    DialogRecord {
        schema_version: SCHEMA_VERSION.to_string(),
        dialog_id: d.dialog_id.clone(),
        rating: d.conversation_rating.map(i64::from),
        turns: d
            .turns
            .iter()
            .enumerate()
            .map(|(i, t)| TurnRecord {
                user: t.user_text.clone(),
                system: t.system_text.clone(),
                da_user: t.dialog_act_user.clone(),
                da_system: t.dialog_act_system.clone(),
                topic: t.topic.clone(),
                entities_user: t
                    .entities_user
                    .as_ref()
                    .map(|s| s.iter().cloned().collect()),
                entities_system: t
                    .entities_system
                    .as_ref()
                    .map(|s| s.iter().cloned().collect()),
                labels: d.annotation(i).map(|a| LabelsRecord {
                    comprehensible: a.comprehensible as i64,
                    on_topic: a.on_topic as i64,
                    interesting: a.interesting as i64,
                    continue_: a.continue_conversation as i64,
                    scalar: a.scalar_rating.map(i64::from),
                }),
            })
            .collect(),
    }
}

/// Parses a JSON-lines corpus held in memory. Blank lines are ignored.
pub fn parse_corpus(text: &str, schema_version: &str, mode: LoadMode) -> Result<LoadOutcome> {
    let mut dialogs: Vec<Dialog> = Vec::new();
    let mut rejected = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<DialogRecord>(raw)
            .map_err(|e| field_error(line, serde_field(&e), e.to_string()))
            .and_then(|rec| record_to_dialog(rec, line, schema_version))
            .and_then(|d| {
                if seen.insert(d.dialog_id.clone()) {
                    Ok(d)
                } else {
                    Err(field_error(
                        line,
                        "dialog_id",
                        format!("duplicate id {:?}", d.dialog_id),
                    ))
                }
            });
        match (parsed, mode) {
            (Ok(d), _) => dialogs.push(d),
            (Err(e), LoadMode::Strict) => return Err(e),
            (Err(e), LoadMode::Lenient) => rejected.push(e),
        }
    }
    Ok(LoadOutcome { dialogs, rejected })
}

fn serde_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    // serde reports "missing field `x`" / "unknown field `x`".
    msg.split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "record".to_string())
}

/// Loads a corpus in strict mode.
pub fn load_corpus(path: impl AsRef<Path>, schema_version: &str) -> Result<Vec<Dialog>> {
    Ok(load_corpus_with(path, schema_version, LoadMode::Strict)?.dialogs)
}

pub fn load_corpus_with(
    path: impl AsRef<Path>,
    schema_version: &str,
    mode: LoadMode,
) -> Result<LoadOutcome> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, schema_version, mode)
}

/// Canonical JSON-lines text for `dialogs`.
pub fn corpus_to_jsonl(dialogs: &[Dialog]) -> String {
    let mut out = String::new();
    for d in dialogs {
        out.push_str(&serde_json::to_string(&dialog_to_record(d)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: impl AsRef<Path>, dialogs: &[Dialog]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus_to_jsonl(dialogs)).map_err(|e| Error::io(path, e))
}

/// Seeded dialog-level partition.
///
/// Partition sizes use largest-remainder rounding of `n * ratio`, then every
/// partition is guaranteed at least one dialog.
pub fn split_corpus(dialogs: &[Dialog], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let n = dialogs.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 dialogs to split into 3 partitions, got {n}"
        )));
    }
    let sizes = partition_sizes(n, ratios);
    let mut ids: Vec<&str> = dialogs.iter().map(|d| d.dialog_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let take = |from: usize, len: usize| -> BTreeSet<String> {
        ids[from..from + len]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    Ok(DatasetSplit {
        train: take(0, sizes[0]),
        dev: take(sizes[0], sizes[1]),
        test: take(sizes[0] + sizes[1], sizes[2]),
        ratios,
    })
}

fn partition_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: [usize; 3] = [0; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        // Guard against 8.000000000001-style float noise before flooring.
        *s = (e + 1e-9).floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = sizes.iter().sum();
    for &i in order.iter().cycle() {
        if assigned >= n {
            break;
        }
        sizes[i] += 1;
        assigned += 1;
    }
    for i in 0..3 {
        if sizes[i] == 0 {
            let donor = (0..3)
                .max_by_key(|&j| (sizes[j], std::cmp::Reverse(j)))
                .unwrap();
            sizes[donor] -= 1;
            sizes[i] += 1;
        }
    }
    sizes
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub turns: usize,
    pub user_mean_tokens: f64,
    pub user_median_tokens: f64,
    pub system_mean_tokens: f64,
    pub system_median_tokens: f64,
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "dialogs: {}", self.dialogs)?;
        writeln!(f, "turns: {}", self.turns)?;
        writeln!(
            f,
            "user tokens: mean {:.1}, median {:.1}",
            self.user_mean_tokens, self.user_median_tokens
        )?;
        write!(
            f,
            "system tokens: mean {:.1}, median {:.1}",
            self.system_mean_tokens, self.system_median_tokens
        )
    }
}

pub fn corpus_stats(dialogs: &[Dialog]) -> Result<CorpusStats> {
    let mut user = Vec::new();
    let mut system = Vec::new();
    for t in dialogs.iter().flat_map(|d| &d.turns) {
        user.push(t.user_tokens.len());
        system.push(t.system_tokens.len());
    }
    if user.is_empty() {
        return Err(Error::Empty("corpus has no turns".into()));
    }
    Ok(CorpusStats {
        dialogs: dialogs.len(),
        turns: user.len(),
        user_mean_tokens: mean(&user),
        user_median_tokens: median(&mut user),
        system_mean_tokens: mean(&system),
        system_median_tokens: median(&mut system),
    })
}

fn mean(xs: &[usize]) -> f64 {
    xs.iter().sum::<usize>() as f64 / xs.len() as f64
}

fn median(xs: &mut [usize]) -> f64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2] as f64
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) as f64 / 2.0
    }
}

/// Frequency of each token over both sides of every turn.
pub fn token_counts(dialogs: &[Dialog]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in dialogs.iter().flat_map(|d| &d.turns) {
        for tok in t.user_tokens.iter().chain(&t.system_tokens) {
            *counts.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    counts
}
