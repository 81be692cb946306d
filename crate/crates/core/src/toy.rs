//! Synthetic annotated corpus for offline runs and tests.
//!
//! Every dialog stays on one topic. A system response is either the bland
//! reply [`GENERIC_RESPONSE`] (comprehensible but nothing else) or an opener
//! followed by a tail naming the topic and the entity the user mentioned.
//! Openers carry different engagement labels, so the labels are a
//! deterministic function of the response. The bland reply is the single
//! most frequent response, while the specific replies share their long tail
//! with most references.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::corpus::{Dialog, Turn, TurnAnnotation};

pub const GENERIC_RESPONSE: &str = "i do not know what to say .";
pub const DEFAULT_DIALOGS: usize = 500;
pub const DEFAULT_SEED: u64 = 20180612;

/// Probability that a reference response is the bland reply.
pub const GENERIC_RATE: f64 = 0.4;

pub struct ToyTopic {
    pub label: &'static str,
    pub word: &'static str,
    pub entities: [&'static str; 3],
    pub detail: &'static str,
}

pub const TOY_TOPICS: [ToyTopic; 8] = [
    ToyTopic {
        label: "Music",
        word: "music",
        entities: ["Beatles", "Mozart", "Adele"],
        detail: "the songs are so catchy",
    },
    ToyTopic {
        label: "Movies",
        word: "movies",
        entities: ["Pixar", "Spielberg", "Hitchcock"],
        detail: "the stories are so clever",
    },
    ToyTopic {
        label: "Sports",
        word: "football",
        entities: ["Messi", "Ronaldo", "Liverpool"],
        detail: "the matches are so exciting",
    },
    ToyTopic {
        label: "Books",
        word: "books",
        entities: ["Tolkien", "Austen", "Orwell"],
        detail: "the characters are so vivid",
    },
    ToyTopic {
        label: "Food",
        word: "cooking",
        entities: ["Ramsay", "Child", "Oliver"],
        detail: "the recipes are so tasty",
    },
    ToyTopic {
        label: "Travel",
        word: "travel",
        entities: ["Paris", "Tokyo", "Rome"],
        detail: "the streets are so lively",
    },
    ToyTopic {
        label: "Games",
        word: "games",
        entities: ["Nintendo", "Zelda", "Tetris"],
        detail: "the levels are so fun",
    },
    ToyTopic {
        label: "Animals",
        word: "animals",
        entities: ["Dolphins", "Pandas", "Tigers"],
        detail: "the babies are so cute",
    },
];

/// Openers of specific replies and the labels they earn
/// (comprehensible, on_topic, interesting, continue).
pub const OPENERS: [(&str, [bool; 4]); 3] = [
    ("oh wow ,", [true, true, true, true]),
    ("sure ,", [true, true, true, false]),
    ("well ,", [true, true, false, false]),
];

const GENERIC_LABELS: [bool; 4] = [true, false, false, false];

/// User templates with their dialog act; `{w}` is the topic word and `{e}`
/// the entity.
const USER_TEMPLATES: [(&str, &str); 6] = [
    ("can we talk about {w} ?", "yes-no-question"),
    ("what do you think about {e} ?", "wh-question"),
    ("do you like {e} ?", "yes-no-question"),
    ("tell me about {e} and {w} .", "command"),
    ("i think {e} is the best .", "opinion"),
    ("i love {w} and {e} .", "statement"),
];

/// The specific reply to a turn about `entity` within `topic`.
pub fn specific_response(opener: &str, topic: &ToyTopic, entity: &str) -> String {
    format!(
        "{opener} {} is great and {entity} is my favorite because {} .",
        topic.word, topic.detail
    )
}

fn rating_of(labels: &[[bool; 4]]) -> u8 {
    let yes: usize = labels
        .iter()
        .map(|l| l.iter().filter(|&&b| b).count())
        .sum();
    let frac = yes as f64 / (4 * labels.len()) as f64;
    (1.0 + (frac * 4.0).round()).clamp(1.0, 5.0) as u8
}

/// Generates `n` annotated dialogs of 2 to 4 turns.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<Dialog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let topic = &TOY_TOPICS[rng.gen_range(0..TOY_TOPICS.len())];
            let turns_n = rng.gen_range(2..=4);
            let mut turns = Vec::with_capacity(turns_n);
            let mut annotations = Vec::with_capacity(turns_n);
            for k in 0..turns_n {
                let entity = *topic.entities.choose(&mut rng).expect("entities");
                let (template, act) = USER_TEMPLATES[rng.gen_range(0..USER_TEMPLATES.len())];
                let user = template.replace("{w}", topic.word).replace("{e}", entity);
                let mentions_entity = template.contains("{e}");
                let (system, labels, sys_act) = if rng.gen_bool(GENERIC_RATE) {
                    (GENERIC_RESPONSE.to_string(), GENERIC_LABELS, "statement")
                } else {
                    let (opener, labels) = OPENERS[rng.gen_range(0..OPENERS.len())];
                    (specific_response(opener, topic, entity), labels, "opinion")
                };
                let mut turn = Turn::new(k, user, system);
                turn.dialog_act_user = Some(act.to_string());
                turn.dialog_act_system = Some(sys_act.to_string());
                turn.topic = Some(topic.label.to_string());
                turn.entities_user = Some(if mentions_entity {
                    BTreeSet::from([entity.to_string()])
                } else {
                    BTreeSet::new()
                });
                turn.entities_system = Some(if labels[1] {
                    BTreeSet::from([entity.to_string()])
                } else {
                    BTreeSet::new()
                });
                let mut a = TurnAnnotation::from_bits(labels);
                a.scalar_rating = Some(1 + labels.iter().filter(|&&b| b).count() as u8);
                annotations.push(a);
                turns.push(turn);
            }
            let bits: Vec<[bool; 4]> = annotations.iter().map(|a| a.bits()).collect();
            Dialog {
                dialog_id: format!("toy-{i:04}"),
                turns,
                annotations: Some(annotations),
                conversation_rating: Some(rating_of(&bits)),
            }
        })
        .collect()
}

/// Every entity name, one per line, for the gazetteer file.
pub fn toy_gazetteer() -> Vec<String> {
    let mut names: Vec<String> = TOY_TOPICS
        .iter()
        .flat_map(|t| t.entities.iter().map(|e| e.to_string()))
        .collect();
    names.sort();
    names
}
