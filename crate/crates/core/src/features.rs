//! Hand-crafted turn features: dialog acts, entity-grid transitions, named
//! entity overlap, topic, response similarity and lengths, fused into one
//! fixed-layout vector.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{topic_index, Turn, TOPICS};
use crate::encoders::{SentenceEmbedding, SentenceEncoder};
use crate::error::{Error, Result};
use crate::text::tokenize;

/// Turns of history the grid and the context encoder look at.
pub const CONTEXT_TURNS: usize = 5;

pub const DEFAULT_ACTS: [&str; 8] = [
    "statement",
    "yes-no-question",
    "wh-question",
    "opinion",
    "greeting",
    "command",
    "backchannel",
    "other",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogActInventory {
    labels: Vec<String>,
}

impl Default for DialogActInventory {
    fn default() -> Self {
        Self {
            labels: DEFAULT_ACTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl DialogActInventory {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = labels.iter().collect();
        if labels.is_empty() || unique.len() != labels.len() {
            return Err(Error::InvalidArgument(
                "dialog act inventory must be nonempty with unique labels".into(),
            ));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                inventory: "dialog acts".into(),
            })
    }
}

/// Assigns a dialog act label to a tokenized utterance.
pub trait ActTagger: Send + Sync {
    fn tag(&self, tokens: &[String]) -> String;
}

/// Keyword rules over the leading tokens.
#[derive(Clone, Debug, Default)]
pub struct RuleTagger;

const WH_WORDS: &[&str] = &[
    "what", "who", "whom", "whose", "where", "when", "why", "which", "how",
];
const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "am", "do", "does", "did", "can", "could", "will", "would",
    "shall", "should", "may", "might", "must", "have", "has", "had", "isn't", "aren't", "don't",
    "doesn't", "didn't", "can't", "won't",
];
const GREETINGS: &[&str] = &[
    "hello",
    "hi",
    "hey",
    "greetings",
    "howdy",
    "good morning",
    "good evening",
    "good afternoon",
    "bye",
    "goodbye",
];
const BACKCHANNELS: &[&str] = &[
    "yeah", "yes", "ok", "okay", "uh-huh", "mm-hmm", "mhm", "right", "sure", "yep", "hmm", "no",
    "nope",
];
const IMPERATIVES: &[&str] = &[
    "tell", "let", "play", "show", "give", "stop", "talk", "say", "go", "open", "read", "sing",
    "start", "repeat", "change", "turn", "find", "search", "pick", "please",
];
const OPINION_WORDS: &[&str] = &[
    "think", "believe", "love", "like", "hate", "favorite", "prefer", "best", "worst", "awesome",
    "boring", "great", "terrible", "amazing", "feel", "opinion", "cool", "fun",
];

impl ActTagger for RuleTagger {
    fn tag(&self, tokens: &[String]) -> String {
        let words: Vec<&str> = tokens
            .iter()
            .map(String::as_str)
            .filter(|t| !t.chars().all(|c| c.is_ascii_punctuation()) || *t == "-")
            .collect();
        if words.is_empty() {
            return "other".into();
        }
        let first = words[0];
        let joined = words.concat();
        let label = if WH_WORDS.contains(&first) {
            "wh-question"
        } else if AUXILIARIES.contains(&first) {
            "yes-no-question"
        } else if GREETINGS.contains(&first)
            || (words.len() >= 2 && GREETINGS.contains(&words[..2].join(" ").as_str()))
        {
            "greeting"
        } else if words.len() <= 3 && BACKCHANNELS.contains(&joined.as_str()) {
            "backchannel"
        } else if IMPERATIVES.contains(&first) {
            "command"
        } else if words.iter().any(|w| OPINION_WORDS.contains(w)) {
            "opinion"
        } else {
            "statement"
        };
        label.into()
    }
}

pub fn tag_dialog_act(tokens: &[String]) -> String {
    RuleTagger.tag(tokens)
}

/// Known entity names, stored lowercased and tokenized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gazetteer {
    entries: Vec<Vec<String>>,
}

impl Gazetteer {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Self {
        let mut entries: Vec<Vec<String>> = names
            .iter()
            .map(|n| tokenize(n.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        entries.sort();
        entries.dedup();
        Self { entries }
    }

    /// One entity per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        Ok(Self::new(&names))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Entries joined with single spaces, in sorted order.
    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.join(" ")).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries occurring as contiguous token runs in `tokens`.
    pub fn matches(&self, tokens: &[String]) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| tokens.windows(e.len()).any(|w| w == e.as_slice()))
            .map(|e| e.join(" "))
            .collect()
    }
}

/// Capitalized-run heuristic plus gazetteer hits. A run's first word is
/// dropped when it starts a sentence, and the pronoun "I" never counts.
pub fn extract_entities(
    tokens: &[String],
    raw_text: &str,
    gazetteer: &Gazetteer,
) -> BTreeSet<String> {
    let mut found = gazetteer.matches(tokens);
    let mut run: Vec<String> = Vec::new();
    let mut sentence_start = true;
    let flush = |run: &mut Vec<String>, found: &mut BTreeSet<String>| {
        if !run.is_empty() {
            found.insert(run.join(" "));
            run.clear();
        }
    };
    for raw in raw_text.split_whitespace() {
        let word = raw.trim_matches(|c: char| !c.is_alphanumeric());
        let capitalized = word.chars().next().is_some_and(char::is_uppercase) && word != "I";
        if capitalized && !sentence_start {
            run.push(word.to_lowercase());
        } else {
            flush(&mut run, &mut found);
        }
        let ends_sentence = raw.ends_with(['.', '!', '?']);
        let breaks_run = raw.chars().last().is_some_and(|c| !c.is_alphanumeric());
        if breaks_run {
            flush(&mut run, &mut found);
        }
        sentence_start = ends_sentence || word.is_empty() && sentence_start;
    }
    flush(&mut run, &mut found);
    found
}

/// Dialog acts and entity sets resolved for one turn, with corpus-supplied
/// values taking precedence over the taggers.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnAnalysis {
    pub act_user: usize,
    pub act_system: usize,
    pub entities_user: BTreeSet<String>,
    pub entities_system: BTreeSet<String>,
}

/// Acts over entities across a window of turns.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityGrid {
    pub entities: Vec<String>,
    /// `cells[turn][entity]`: act index, or `None` when absent.
    pub cells: Vec<Vec<Option<usize>>>,
    pub num_acts: usize,
}

impl EntityGrid {
    /// A cell holds the system act when the entity occurs in the system
    /// response, else the user act when it occurs in the user utterance.
    pub fn build(window: &[TurnAnalysis], num_acts: usize) -> Self {
        let entities: Vec<String> = window
            .iter()
            .flat_map(|t| t.entities_user.iter().chain(&t.entities_system))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cells = window
            .iter()
            .map(|t| {
                entities
                    .iter()
                    .map(|e| {
                        if t.entities_system.contains(e) {
                            Some(t.act_system)
                        } else if t.entities_user.contains(e) {
                            Some(t.act_user)
                        } else {
                            None
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            entities,
            cells,
            num_acts,
        }
    }

    /// Pattern index of a length-2 transition; the absent marker is
    /// `num_acts`.
    pub fn pattern_index(&self, from: Option<usize>, to: Option<usize>) -> usize {
        let k = self.num_acts + 1;
        from.unwrap_or(self.num_acts) * k + to.unwrap_or(self.num_acts)
    }

    /// Distribution of vertical length-2 transitions over `(acts + 1)^2`
    /// patterns; all zero when there are none.
    pub fn transition_distribution(&self) -> Vec<f64> {
        let k = self.num_acts + 1;
        let mut counts = vec![0.0; k * k];
        let mut total = 0.0;
        for pair in self.cells.windows(2) {
            for (a, b) in pair[0].iter().zip(&pair[1]) {
                counts[self.pattern_index(*a, *b)] += 1.0;
                total += 1.0;
            }
        }
        if total > 0.0 {
            for c in &mut counts {
                *c /= total;
            }
        }
        counts
    }
}

pub fn entity_grid_features(window: &[TurnAnalysis], num_acts: usize) -> Vec<f64> {
    EntityGrid::build(window, num_acts).transition_distribution()
}

/// Intersection size and Jaccard index (0 when both sets are empty).
pub fn ne_overlap(user: &BTreeSet<String>, system: &BTreeSet<String>) -> (usize, f64) {
    let inter = user.intersection(system).count();
    let union = user.union(system).count();
    let jaccard = if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    };
    (inter, jaccard)
}

pub fn topic_onehot(topic: Option<&str>) -> Result<Vec<f64>> {
    let mut v = vec![0.0; TOPICS.len()];
    if let Some(label) = topic {
        let i = topic_index(label).ok_or_else(|| Error::UnknownLabel {
            label: label.to_string(),
            inventory: "topics".into(),
        })?;
        v[i] = 1.0;
    }
    Ok(v)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn response_similarity(u: &[f64], r: &[f64]) -> Result<f64> {
    if u.len() != r.len() {
        return Err(Error::Dimension(format!(
            "cosine of {}-d and {}-d vectors",
            u.len(),
            r.len()
        )));
    }
    let dot: f64 = u.iter().zip(r).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nr == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nr)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub name: String,
    pub offset: usize,
    pub length: usize,
}

/// Names, offsets and lengths of the feature blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub blocks: Vec<FeatureBlock>,
    pub dim: usize,
    pub acts: Vec<String>,
    /// Order in which each context turn feeds the context encoder.
    pub context_order: String,
}

impl FeatureLayout {
    pub fn new(inventory: &DialogActInventory) -> Self {
        let n = inventory.len();
        let sizes = [
            ("da_user", n),
            ("da_system", n),
            ("entity_grid", (n + 1) * (n + 1)),
            ("ne_overlap", 2),
            ("topic", TOPICS.len()),
            ("response_similarity", 1),
            ("lengths", 2),
        ];
        let mut offset = 0;
        let blocks = sizes
            .iter()
            .map(|&(name, length)| {
                let b = FeatureBlock {
                    name: name.into(),
                    offset,
                    length,
                };
                offset += length;
                b
            })
            .collect();
        Self {
            blocks,
            dim: offset,
            acts: inventory.labels().to_vec(),
            context_order: "user,system".into(),
        }
    }

    pub fn block(&self, name: &str) -> Option<&FeatureBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn block<'a>(&'a self, layout: &FeatureLayout, name: &str) -> Option<&'a [f64]> {
        layout
            .block(name)
            .map(|b| &self.values[b.offset..b.offset + b.length])
    }
}

/// Taggers, gazetteer and act inventory used to featurize turns.
#[derive(Clone)]
pub struct FeatureExtractor {
    pub inventory: DialogActInventory,
    pub tagger: Arc<dyn ActTagger>,
    pub gazetteer: Gazetteer,
    pub layout: FeatureLayout,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(
            DialogActInventory::default(),
            Arc::new(RuleTagger),
            Gazetteer::default(),
        )
    }
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("inventory", &self.inventory)
            .field("gazetteer", &self.gazetteer.len())
            .finish()
    }
}

impl FeatureExtractor {
    pub fn new(
        inventory: DialogActInventory,
        tagger: Arc<dyn ActTagger>,
        gazetteer: Gazetteer,
    ) -> Self {
        let layout = FeatureLayout::new(&inventory);
        Self {
            inventory,
            tagger,
            gazetteer,
            layout,
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn analyze(&self, turn: &Turn) -> Result<TurnAnalysis> {
        let act = |given: &Option<String>, tokens: &[String]| -> Result<usize> {
            match given {
                Some(label) => self.inventory.index(label),
                None => self
                    .inventory
                    .index(&self.tagger.tag(tokens))
                    .or(Ok(self.inventory.len() - 1)),
            }
        };
        let ents = |given: &Option<BTreeSet<String>>, tokens: &[String], raw: &str| match given {
            Some(e) => e.iter().map(|s| s.to_lowercase()).collect(),
            None => extract_entities(tokens, raw, &self.gazetteer),
        };
        Ok(TurnAnalysis {
            act_user: act(&turn.dialog_act_user, &turn.user_tokens)?,
            act_system: act(&turn.dialog_act_system, &turn.system_tokens)?,
            entities_user: ents(&turn.entities_user, &turn.user_tokens, &turn.user_text),
            entities_system: ents(
                &turn.entities_system,
                &turn.system_tokens,
                &turn.system_text,
            ),
        })
    }

    /// Features of `turn` given its preceding turns (only the last
    /// [`CONTEXT_TURNS`] are used) and sentence embeddings of its two sides.
    pub fn build(
        &self,
        turn: &Turn,
        context: &[Turn],
        user_emb: &SentenceEmbedding,
        system_emb: &SentenceEmbedding,
    ) -> Result<FeatureVector> {
        let start = context.len().saturating_sub(CONTEXT_TURNS);
        let mut window = context[start..]
            .iter()
            .map(|t| self.analyze(t))
            .collect::<Result<Vec<_>>>()?;
        let current = self.analyze(turn)?;
        let n = self.inventory.len();
        let mut values = Vec::with_capacity(self.dim());
        let onehot = |i: usize| (0..n).map(move |j| f64::from(u8::from(i == j)));
        values.extend(onehot(current.act_user));
        values.extend(onehot(current.act_system));
        let (count, jaccard) = ne_overlap(&current.entities_user, &current.entities_system);
        window.push(current);
        values.extend(entity_grid_features(&window, n));
        values.extend([count as f64, jaccard]);
        values.extend(topic_onehot(turn.topic.as_deref())?);
        values.push(response_similarity(&user_emb.values, &system_emb.values)?);
        values.extend([
            turn.user_tokens.len() as f64,
            turn.system_tokens.len() as f64,
        ]);
        debug_assert_eq!(values.len(), self.dim());
        Ok(FeatureVector { values })
    }

    /// Like [`FeatureExtractor::build`], encoding both sides with `encoder`.
    pub fn build_feature_vector(
        &self,
        turn: &Turn,
        context: &[Turn],
        encoder: &SentenceEncoder,
    ) -> Result<FeatureVector> {
        let u = encoder.encode(&turn.user_tokens);
        let s = encoder.encode(&turn.system_tokens);
        self.build(turn, context, &u, &s)
    }

    /// Histogram of resolved acts across a set of turns, keyed by label.
    pub fn act_histogram<'a>(
        &self,
        turns: impl IntoIterator<Item = &'a Turn>,
    ) -> Result<BTreeMap<String, usize>> {
        let mut h = BTreeMap::new();
        for t in turns {
            let a = self.analyze(t)?;
            for i in [a.act_user, a.act_system] {
                *h.entry(self.inventory.labels()[i].clone()).or_insert(0) += 1;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tagger_rules() {
        assert_eq!(tag_dialog_act(&toks("what is that")), "wh-question");
        assert_eq!(tag_dialog_act(&toks("hello")), "greeting");
        assert_eq!(
            tag_dialog_act(&toks("do you like cats?")),
            "yes-no-question"
        );
        assert_eq!(tag_dialog_act(&toks("uh-huh")), "backchannel");
        assert_eq!(tag_dialog_act(&toks("tell me a joke")), "command");
        assert_eq!(tag_dialog_act(&toks("i love pizza")), "opinion");
        assert_eq!(tag_dialog_act(&toks("the sky is blue")), "statement");
        assert_eq!(tag_dialog_act(&toks("?!")), "other");
    }

    #[test]
    fn entity_heuristics() {
        let g = Gazetteer::default();
        let t = "i saw Los Angeles yesterday";
        assert_eq!(
            extract_entities(&toks(t), t, &g),
            BTreeSet::from(["los angeles".to_string()])
        );
        let t = "Hello there";
        assert!(extract_entities(&toks(t), t, &g).is_empty());
        let t = "we met. Then Paris, London";
        let e = extract_entities(&toks(t), t, &g);
        assert_eq!(
            e,
            BTreeSet::from(["london".to_string(), "paris".to_string()])
        );
        let g = Gazetteer::new(&["star wars"]);
        let t = "have you seen star wars";
        assert_eq!(
            extract_entities(&toks(t), t, &g),
            BTreeSet::from(["star wars".to_string()])
        );
    }

    fn analysis(acts: (usize, usize), user: &[&str], system: &[&str]) -> TurnAnalysis {
        TurnAnalysis {
            act_user: acts.0,
            act_system: acts.1,
            entities_user: user.iter().map(|s| s.to_string()).collect(),
            entities_system: system.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn grid_single_transition() {
        let w = [
            analysis((1, 0), &["x"], &["x"]),
            analysis((2, 5), &["x"], &[]),
        ];
        let d = entity_grid_features(&w, 8);
        let g = EntityGrid::build(&w, 8);
        assert_eq!(d.len(), 81);
        assert_eq!(d[g.pattern_index(Some(0), Some(2))], 1.0);
        assert_eq!(d.iter().sum::<f64>(), 1.0);
        assert!(entity_grid_features(&w[..1], 8).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn overlap_and_topic() {
        let a: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let b: BTreeSet<String> = ["b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(ne_overlap(&a, &b), (1, 1.0 / 3.0));
        assert_eq!(ne_overlap(&BTreeSet::new(), &BTreeSet::new()), (0, 0.0));
        let v = topic_onehot(Some("Sports")).unwrap();
        assert_eq!(v[topic_index("Sports").unwrap()], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert!(topic_onehot(None).unwrap().iter().all(|&x| x == 0.0));
        assert!(topic_onehot(Some("Nonsense")).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((response_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(response_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(response_similarity(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert!(response_similarity(&[1.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn layout_is_128_wide() {
        let l = FeatureLayout::new(&DialogActInventory::default());
        assert_eq!(l.dim, 128);
        assert_eq!(l.block("topic").unwrap().offset, 16 + 81 + 2);
    }

    #[test]
    fn corpus_fields_override_taggers() {
        let fx = FeatureExtractor::default();
        let mut t = Turn::new(0, "what is Boston like", "hello");
        t.dialog_act_user = Some("command".into());
        t.entities_user = Some(BTreeSet::from(["Seattle".to_string()]));
        let a = fx.analyze(&t).unwrap();
        assert_eq!(a.act_user, fx.inventory.index("command").unwrap());
        assert_eq!(a.entities_user, BTreeSet::from(["seattle".to_string()]));
        assert_eq!(a.act_system, fx.inventory.index("greeting").unwrap());
        t.dialog_act_system = Some("shouting".into());
        assert!(fx.analyze(&t).is_err());
    }
}
