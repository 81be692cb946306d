//! Tokenization, vocabularies and word-embedding tables.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use dialogeval_tape::params::uniform;
use dialogeval_tape::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{token_counts, Dialog};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const TRANSITION: usize = 4;
pub const NUM_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>", "<tr>"];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '…' | '—' | '–' | '¿' | '¡' | '«' | '»'
        )
}

/// Lowercases, splits on whitespace and splits every punctuation character
/// into its own token. Apostrophes between two alphanumerics stay inside
/// the word (`don't`).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.chars().collect();
        let mut word = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let inner_apostrophe = c == '\''
                && i > 0
                && i + 1 < chars.len()
                && chars[i - 1].is_alphanumeric()
                && chars[i + 1].is_alphanumeric();
            if is_punct(c) && !inner_apostrophe {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_lowercase().collect());
            } else {
                word.extend(c.to_lowercase());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// Dense token ids with five reserved specials at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    max_size: usize,
}

impl Vocabulary {
    /// Builds from a frequency table: descending count, ties broken
    /// lexicographically, truncated to `max_size` regular tokens.
    pub fn from_counts(counts: &BTreeMap<String, usize>, max_size: usize) -> Result<Self> {
        if max_size < 1 {
            return Err(Error::InvalidArgument("max_size must be >= 1".into()));
        }
        let mut ranked: Vec<(&String, &usize)> = counts
            .iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size);
        Ok(Self::from_tokens(
            ranked.into_iter().map(|(t, _)| t.clone()),
            max_size,
        ))
    }

    /// Regular tokens in id order (ids start after the specials).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>, max_size: usize) -> Self {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let ids = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens: all,
            ids,
            max_size,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// One regular token per line; line `k` holds id `k + 5`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[NUM_SPECIALS..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Self {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let n = tokens.len();
        Self::from_tokens(tokens, n)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }
}

pub fn build_vocabulary(dialogs: &[Dialog], max_size: usize) -> Result<Vocabulary> {
    if dialogs.iter().all(|d| d.turns.is_empty()) {
        return Err(Error::Empty(
            "cannot build a vocabulary from an empty corpus".into(),
        ));
    }
    Vocabulary::from_counts(&token_counts(dialogs), max_size)
}

/// `|V| x D` word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }
}

#[derive(Clone, Debug)]
pub enum EmbeddingSource {
    /// Uniform in `[-0.1, 0.1]`.
    Random,
    /// `token v1 ... vD` lines; uncovered rows fall back to random.
    Pretrained(std::path::PathBuf),
    /// Sum of hashed character n-gram bucket vectors.
    SubwordHash,
}

pub const RANDOM_INIT_BOUND: f64 = 0.1;
pub const SUBWORD_BUCKETS: u32 = 50_000;
pub const SUBWORD_MIN_N: usize = 3;
pub const SUBWORD_MAX_N: usize = 6;

pub fn init_embeddings(
    vocab: &Vocabulary,
    dim: usize,
    source: &EmbeddingSource,
    seed: u64,
) -> Result<EmbeddingTable> {
    if dim < 1 {
        return Err(Error::InvalidArgument(
            "embedding dimension must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = uniform(&mut rng, vocab.len(), dim, RANDOM_INIT_BOUND);
    match source {
        EmbeddingSource::Random => {}
        EmbeddingSource::Pretrained(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (line_no, line) in text.lines().enumerate() {
                let mut parts = line.split_whitespace();
                let Some(token) = parts.next() else { continue };
                let values = parts
                    .map(str::parse::<f64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Malformed {
                        line: line_no + 1,
                        field: token.to_string(),
                        message: e.to_string(),
                    })?;
                if values.len() != dim {
                    return Err(Error::Dimension(format!(
                        "line {}: vector for {token:?} has {} values, expected {dim}",
                        line_no + 1,
                        values.len()
                    )));
                }
                if let Some(&id) = vocab.ids.get(token) {
                    matrix.row_mut(id).copy_from_slice(&values);
                }
            }
        }
        EmbeddingSource::SubwordHash => {
            for id in 0..vocab.len() {
                let row = subword_vector(vocab.token(id), dim, seed);
                matrix.row_mut(id).copy_from_slice(&row);
            }
        }
    }
    Ok(EmbeddingTable {
        matrix,
        trainable: true,
    })
}

/// 32-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x01000193);
    }
    h
}

/// Character n-grams of `<token>` for n in 3..=6.
pub fn char_ngrams(token: &str) -> Vec<String> {
    let chars: Vec<char> = format!("<{token}>").chars().collect();
    let mut out = Vec::new();
    for n in SUBWORD_MIN_N..=SUBWORD_MAX_N {
        if n > chars.len() {
            break;
        }
        for w in chars.windows(n) {
            out.push(w.iter().collect());
        }
    }
    out
}

/// Deterministic vector for one hash bucket.
pub fn bucket_vector(bucket: u32, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(bucket) << 32 | 0x5eed));
    (0..dim)
        .map(|_| rng.gen_range(-RANDOM_INIT_BOUND..=RANDOM_INIT_BOUND))
        .collect()
}

fn subword_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for g in char_ngrams(token) {
        let b = fnv1a(g.as_bytes()) % SUBWORD_BUCKETS;
        for (o, x) in v.iter_mut().zip(bucket_vector(b, dim, seed)) {
            *o += x;
        }
    }
    v
}
