//! Corpus ingestion and preprocessing: normalization, label harmonization,
//! tokenization, vocabulary construction, fixed-length encoding and
//! deterministic splitting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("line {line}: malformed record: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("line {line}: unknown label `{value}` (expected explicit, implicit or none)")]
    UnknownLabel { line: usize, value: String },
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadFractions([f64; 3]),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three-way taxonomy. Discriminants are the label indices used
/// everywhere (model outputs, metrics, checkpoints).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Explicit = 0,
    Implicit = 1,
    None = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Explicit, Label::Implicit, Label::None];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Explicit => "explicit",
            Label::Implicit => "implicit",
            Label::None => "none",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "explicit" => Ok(Label::Explicit),
            "implicit" => Ok(Label::Implicit),
            "none" => Ok(Label::None),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    /// Normalized text, never empty.
    pub text: String,
    pub label: Label,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<RawRecord>,
    pub provenance: String,
}

/// Counts of records dropped while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub read: usize,
    pub dropped_empty: usize,
    pub dropped_duplicate: usize,
}

impl Corpus {
    /// Builds a corpus from raw `(text, label)` pairs, applying the same
    /// normalization, empty-drop and dedup rules as [`load_corpus`].
    pub fn from_pairs<S: AsRef<str>>(
        pairs: impl IntoIterator<Item = (S, Label)>,
        provenance: impl Into<String>,
    ) -> (Corpus, LoadStats) {
        let mut builder = CorpusBuilder::default();
        for (text, label) in pairs {
            builder.push(text.as_ref(), label);
        }
        builder.finish(provenance.into())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label.index()).collect()
    }
}

#[derive(Default)]
struct CorpusBuilder {
    records: Vec<RawRecord>,
    seen: HashSet<String>,
    stats: LoadStats,
}

impl CorpusBuilder {
    fn push(&mut self, raw: &str, label: Label) {
        self.stats.read += 1;
        let text = normalize_text(raw);
        if text.is_empty() {
            self.stats.dropped_empty += 1;
        } else if !self.seen.insert(text.clone()) {
            self.stats.dropped_duplicate += 1;
        } else {
            self.records.push(RawRecord { text, label });
        }
    }

    fn finish(self, provenance: String) -> (Corpus, LoadStats) {
        (
            Corpus {
                records: self.records,
                provenance,
            },
            self.stats,
        )
    }
}

fn is_kept_char(c: char) -> bool {
    c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '.' | ',' | '!' | '?' | '\'')
}

/// Lowercases, strips `http://` / `https://` URLs up to the next whitespace,
/// drops every character outside `[a-z0-9.,!?']` and whitespace, collapses
/// whitespace runs and trims.
pub fn normalize_text(raw: &str) -> String {
    let lower = raw.to_lowercase();

    let mut without_urls = String::with_capacity(lower.len());
    let mut rest = lower.as_str();
    while let Some(start) = find_url_start(rest) {
        without_urls.push_str(&rest[..start]);
        let tail = &rest[start..];
        let end = tail.find(char::is_whitespace).unwrap_or(tail.len());
        rest = &tail[end..];
    }
    without_urls.push_str(rest);

    let mut out = String::with_capacity(without_urls.len());
    let mut pending_space = false;
    for c in without_urls.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if is_kept_char(c) {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
    }
    out
}

fn find_url_start(s: &str) -> Option<usize> {
    match (s.find("http://"), s.find("https://")) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Splits normalized text on whitespace and breaks `. , ! ?` out as their
/// own tokens. Apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if matches!(c, '.' | ',' | '!' | '?') {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            } else {
                word.push(c);
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose ids follow `tokens` in order, after the
    /// reserved PAD and UNK entries. Duplicates and reserved names are skipped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut vocab = Vocabulary {
            ids: HashMap::new(),
            tokens: Vec::new(),
        };
        vocab.insert(PAD_TOKEN.to_string());
        vocab.insert(UNK_TOKEN.to_string());
        for t in tokens {
            vocab.insert(t);
        }
        vocab
    }

    /// Rebuilds a vocabulary from its full id-ordered token list, as stored in
    /// a checkpoint. The list must start with the reserved entries and be
    /// duplicate-free.
    pub fn from_id_order(tokens: Vec<String>) -> Option<Self> {
        if tokens.get(PAD_ID).map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(UNK_ID).map(String::as_str) != Some(UNK_TOKEN)
        {
            return None;
        }
        let ids: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        (ids.len() == tokens.len()).then_some(Vocabulary { ids, tokens })
    }

    fn insert(&mut self, token: String) {
        if !self.ids.contains_key(&token) {
            self.ids.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Ids 2, 3, ... go to tokens with frequency >= `min_freq`, most frequent
/// first, ties broken lexicographically.
pub fn build_vocab_from_docs<D, T>(docs: D, min_freq: usize) -> Vocabulary
where
    D: IntoIterator,
    D::Item: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        for token in doc {
            let token = token.as_ref();
            if let Some(c) = counts.get_mut(token) {
                *c += 1;
            } else {
                counts.insert(token.to_string(), 1);
            }
        }
    }
    let min_freq = min_freq.max(1);
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocabulary {
    build_vocab_from_docs(corpus.records.iter().map(|r| tokenize(&r.text)), min_freq)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub label_index: Option<usize>,
}

impl EncodedExample {
    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }
}

/// Maps tokens to ids (unknown -> UNK), truncating at the tail and padding
/// with PAD up to `max_len`.
pub fn encode<T: AsRef<str>>(tokens: &[T], vocab: &Vocabulary, max_len: usize) -> EncodedExample {
    let mut ids: Vec<usize> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id_or_unk(t.as_ref()))
        .collect();
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut mask = vec![true; real];
    mask.resize(max_len, false);
    EncodedExample {
        ids,
        mask,
        label_index: None,
    }
}

pub fn encode_record(record: &RawRecord, vocab: &Vocabulary, max_len: usize) -> EncodedExample {
    let mut ex = encode(&tokenize(&record.text), vocab, max_len);
    ex.label_index = Some(record.label.index());
    ex
}

#[derive(Deserialize)]
struct LineRecord {
    text: String,
    label: String,
}

/// Reads one JSON object per line with string fields `text` and `label`.
/// Blank lines are skipped.
pub fn read_corpus(
    reader: impl BufRead,
    provenance: impl Into<String>,
) -> Result<(Corpus, LoadStats), TextError> {
    let mut builder = CorpusBuilder::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LineRecord = serde_json::from_str(&line).map_err(|e| TextError::Malformed {
            line: line_no,
            detail: e.to_string(),
        })?;
        let label = rec
            .label
            .parse::<Label>()
            .map_err(|value| TextError::UnknownLabel {
                line: line_no,
                value,
            })?;
        builder.push(&rec.text, label);
    }
    Ok(builder.finish(provenance.into()))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Corpus, LoadStats), TextError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file), path.display().to_string())
}

/// Writes records in the line-delimited format read by [`read_corpus`].
pub fn write_corpus(corpus: &Corpus, mut out: impl std::io::Write) -> std::io::Result<()> {
    for r in &corpus.records {
        let line = serde_json::json!({ "text": r.text, "label": r.label.as_str() });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    /// (train, dev, test)
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [1.0 / 3.0; 3],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn thirds(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// `(train, dev, test)` sizes for `n` records: dev and test get
    /// `floor(n * fraction)`, train takes the rest.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize), TextError> {
        let f = self.fractions;
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(TextError::BadFractions(f));
        }
        // The slack absorbs representation error, e.g. 9 * (1/3) landing just under 3.
        let part = |fr: f64| ((n as f64 * fr + 1e-9).floor() as usize).min(n);
        let dev = part(f[1]);
        let test = part(f[2]).min(n - dev);
        Ok((n - dev - test, dev, test))
    }
}

/// Shuffles with a ChaCha8 generator seeded from `spec.seed`, then cuts the
/// shuffled order into contiguous train, dev and test blocks.
pub fn split_corpus(
    corpus: &Corpus,
    spec: &SplitSpec,
) -> Result<(Corpus, Corpus, Corpus), TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let (n_train, n_dev, _) = spec.sizes(corpus.len())?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let take = |idx: &[usize], tag: &str| Corpus {
        records: idx.iter().map(|&i| corpus.records[i].clone()).collect(),
        provenance: format!("{}#{tag}", corpus.provenance),
    };
    Ok((
        take(&order[..n_train], "train"),
        take(&order[n_train..n_train + n_dev], "dev"),
        take(&order[n_train + n_dev..], "test"),
    ))
}
