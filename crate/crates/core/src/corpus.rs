//! BIO corpus ingestion and seeded sampling.
//!
//! Corpora are read from pre-tokenized `token<TAB>tag` files with blank lines
//! between sentences. IOB2 is the internal tag scheme; IOB1 files are converted
//! on load. Tags of the form `I-X` that do not continue an `X` entity open a new
//! span and are counted on [`Corpus::repairs`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed line ({reason}): {content:?}")]
    MalformedLine {
        line: usize,
        reason: &'static str,
        content: String,
    },
    #[error("line {line}: tag {tag:?} names a type outside the inventory")]
    UnknownType { line: usize, tag: String },
    #[error("insufficient data: requested {requested}, only {available} available")]
    InsufficientData { requested: usize, available: usize },
    #[error("type inventory is empty")]
    EmptyInventory,
    #[error("invalid span ({start}, {end}, {etype}) for sentence of {len} tokens")]
    InvalidSpan {
        start: usize,
        end: usize,
        etype: String,
        len: usize,
    },
    #[error("duplicate source id {0:?}")]
    DuplicateSourceId(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub index: usize,
}

/// A typed entity mention over the half-open token range `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub etype: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, etype: impl Into<String>) -> Self {
        Self {
            start,
            end,
            etype: etype.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, other: &EntitySpan) -> bool {
        self.start <= other.start && other.end <= self.end
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.start, self.end, self.etype)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<Token>,
    /// Gold spans sorted by `(start, end)`.
    pub gold: Vec<EntitySpan>,
    pub source_id: String,
}

impl LabeledExample {
    /// Builds an example from raw token strings and spans.
    ///
    /// Nested or overlapping spans are flattened to the outermost ones (longer
    /// span wins, ties go to the leftmost), and repeated `(start, end)` pairs are
    /// collapsed to their first occurrence.
    pub fn new<S: AsRef<str>>(
        source_id: impl Into<String>,
        tokens: &[S],
        spans: Vec<EntitySpan>,
    ) -> Result<Self, CorpusError> {
        let tokens: Vec<Token> = tokens
            .iter()
            .enumerate()
            .map(|(index, t)| Token {
                text: t.as_ref().to_string(),
                index,
            })
            .collect();
        for span in &spans {
            if span.start >= span.end || span.end > tokens.len() {
                return Err(CorpusError::InvalidSpan {
                    start: span.start,
                    end: span.end,
                    etype: span.etype.clone(),
                    len: tokens.len(),
                });
            }
        }
        Ok(Self {
            tokens,
            gold: flatten_to_outermost(spans),
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_entities(&self) -> bool {
        !self.gold.is_empty()
    }

    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Tokens joined with single spaces.
    pub fn detokenized(&self) -> String {
        detokenize(&self.tokens[..])
    }

    pub fn span_text(&self, span: &EntitySpan) -> String {
        detokenize(&self.tokens[span.start..span.end])
    }

    /// Gold `(phrase, type)` pairs in sentence order, keeping only the first
    /// occurrence of each phrase (compared case-insensitively).
    pub fn gold_phrases(&self) -> Vec<(String, String)> {
        let mut seen = HashSet::new();
        self.gold
            .iter()
            .filter_map(|span| {
                let phrase = self.span_text(span);
                seen.insert(phrase.to_lowercase())
                    .then(|| (phrase, span.etype.clone()))
            })
            .collect()
    }
}

pub fn detokenize(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

/// Keeps the outermost spans of a possibly nested set: longer spans first,
/// ties broken by the leftmost start. The result is sorted by position.
pub fn flatten_to_outermost(spans: Vec<EntitySpan>) -> Vec<EntitySpan> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&a, &b| {
        spans[b]
            .len()
            .cmp(&spans[a].len())
            .then(spans[a].start.cmp(&spans[b].start))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<EntitySpan> = Vec::new();
    for i in order {
        let s = &spans[i];
        if kept.iter().all(|k| !k.overlaps(s)) {
            kept.push(s.clone());
        }
    }
    kept.sort();
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    #[default]
    Iob2,
    Iob1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub type_inventory: Vec<String>,
    pub examples: Vec<LabeledExample>,
    /// Number of dangling `I-` tags that opened a new span during ingestion.
    pub repairs: usize,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        type_inventory: Vec<String>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self, CorpusError> {
        if type_inventory.is_empty() {
            return Err(CorpusError::EmptyInventory);
        }
        let inventory: HashSet<&str> = type_inventory.iter().map(String::as_str).collect();
        let mut ids = HashSet::new();
        for ex in &examples {
            if !ids.insert(ex.source_id.as_str()) {
                return Err(CorpusError::DuplicateSourceId(ex.source_id.clone()));
            }
            if let Some(span) = ex.gold.iter().find(|s| !inventory.contains(s.etype.as_str())) {
                return Err(CorpusError::UnknownType {
                    line: 0,
                    tag: span.etype.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            type_inventory,
            examples,
            repairs: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Groups examples under caller-chosen keys, e.g. an episode identifier
    /// encoded in the source id. Iteration order of the map is by key.
    pub fn group_by<K, F>(&self, key: F) -> BTreeMap<K, Vec<&LabeledExample>>
    where
        K: Ord,
        F: Fn(&LabeledExample) -> K,
    {
        let mut groups: BTreeMap<K, Vec<&LabeledExample>> = BTreeMap::new();
        for ex in &self.examples {
            groups.entry(key(ex)).or_default().push(ex);
        }
        groups
    }

    /// A copy of this corpus with the given source ids removed.
    pub fn without(&self, exclude: &[LabeledExample]) -> Corpus {
        let ids: HashSet<&str> = exclude.iter().map(|e| e.source_id.as_str()).collect();
        Corpus {
            name: self.name.clone(),
            type_inventory: self.type_inventory.clone(),
            examples: self
                .examples
                .iter()
                .filter(|e| !ids.contains(e.source_id.as_str()))
                .cloned()
                .collect(),
            repairs: self.repairs,
        }
    }
}

/// Parses an IOB2 document. Source ids are `s<n>` for the n-th sentence.
pub fn parse_bio(text: &str, type_inventory: &[String]) -> Result<Corpus, CorpusError> {
    parse_bio_with(text, type_inventory, TagScheme::Iob2, "s")
}

/// Parses a BIO document in the given scheme; sentence ids are `<prefix><n>`.
pub fn parse_bio_with(
    text: &str,
    type_inventory: &[String],
    scheme: TagScheme,
    id_prefix: &str,
) -> Result<Corpus, CorpusError> {
    if type_inventory.is_empty() {
        return Err(CorpusError::EmptyInventory);
    }
    let inventory: HashSet<&str> = type_inventory.iter().map(String::as_str).collect();
    let mut examples = Vec::new();
    let mut repairs = 0;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<Tag> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>, repairs: &mut usize| {
        if tokens.is_empty() {
            return;
        }
        if scheme == TagScheme::Iob1 {
            iob1_to_iob2(tags);
        }
        let (spans, fixed) = tags_to_spans(tags);
        *repairs += fixed;
        let id = format!("{id_prefix}{}", examples.len());
        let ex = LabeledExample {
            tokens: tokens
                .drain(..)
                .enumerate()
                .map(|(index, text)| Token { text, index })
                .collect(),
            gold: spans,
            source_id: id,
        };
        tags.clear();
        examples.push(ex);
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            flush(&mut tokens, &mut tags, &mut repairs);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut tags, &mut repairs);
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                reason: "expected `token tag`",
                content: raw.to_string(),
            });
        }
        let tag = Tag::parse(fields[1]).ok_or_else(|| CorpusError::MalformedLine {
            line: line_no,
            reason: "tag must be O, B-X or I-X",
            content: raw.to_string(),
        })?;
        if let Some(t) = tag.etype() {
            if !inventory.contains(t) {
                return Err(CorpusError::UnknownType {
                    line: line_no,
                    tag: fields[1].to_string(),
                });
            }
        }
        tokens.push(fields[0].to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags, &mut repairs);

    Ok(Corpus {
        name: String::new(),
        type_inventory: type_inventory.to_vec(),
        examples,
        repairs,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tag {
    Outside,
    Begin(String),
    Inside(String),
}

impl Tag {
    fn parse(s: &str) -> Option<Tag> {
        if s == "O" {
            return Some(Tag::Outside);
        }
        let (prefix, etype) = s.split_once('-')?;
        if etype.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Tag::Begin(etype.to_string())),
            "I" => Some(Tag::Inside(etype.to_string())),
            _ => None,
        }
    }

    fn etype(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

fn iob1_to_iob2(tags: &mut [Tag]) {
    let mut prev: Option<String> = None;
    for tag in tags.iter_mut() {
        if let Tag::Inside(t) = tag {
            if prev.as_deref() != Some(t.as_str()) {
                *tag = Tag::Begin(t.clone());
            }
        }
        prev = tag.etype().map(str::to_string);
    }
}

/// Merges IOB2 runs into spans; returns the spans and the number of repaired
/// `I-` openings.
fn tags_to_spans(tags: &[Tag]) -> (Vec<EntitySpan>, usize) {
    let mut spans = Vec::new();
    let mut repairs = 0;
    let mut open: Option<(usize, String)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Tag::Outside => {
                if let Some((start, t)) = open.take() {
                    spans.push(EntitySpan::new(start, i, t));
                }
            }
            Tag::Begin(t) => {
                if let Some((start, prev)) = open.take() {
                    spans.push(EntitySpan::new(start, i, prev));
                }
                open = Some((i, t.clone()));
            }
            Tag::Inside(t) => match &open {
                Some((_, cur)) if cur == t => {}
                _ => {
                    if let Some((start, prev)) = open.take() {
                        spans.push(EntitySpan::new(start, i, prev));
                    }
                    repairs += 1;
                    open = Some((i, t.clone()));
                }
            },
        }
    }
    if let Some((start, t)) = open {
        spans.push(EntitySpan::new(start, tags.len(), t));
    }
    (spans, repairs)
}

/// Renders an example back to a BIO document fragment (one `token\ttag` line
/// per token, no trailing blank line).
pub fn to_bio_lines(tokens: &[Token], tags: &[String]) -> String {
    let mut out = String::new();
    for (t, tag) in tokens.iter().zip(tags) {
        out.push_str(&t.text);
        out.push('\t');
        out.push_str(tag);
        out.push('\n');
    }
    out
}

/// Dataset manifest: a TOML file naming the corpus, its type inventory, and
/// the BIO files (relative to the manifest) that make it up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub types: Vec<String>,
    pub files: Vec<PathBuf>,
    #[serde(default)]
    pub scheme: TagScheme,
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Loads every file listed in a manifest into one corpus. Source ids take the
/// form `<file stem>:<sentence index>`.
pub fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let manifest = Manifest::from_path(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut examples = Vec::new();
    let mut repairs = 0;
    for file in &manifest.files {
        let full = base.join(file);
        let text = std::fs::read_to_string(&full).map_err(|source| CorpusError::Io {
            path: full.clone(),
            source,
        })?;
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let part = parse_bio_with(&text, &manifest.types, manifest.scheme, &format!("{stem}:"))?;
        repairs += part.repairs;
        examples.extend(part.examples);
    }
    let mut corpus = Corpus::new(manifest.name, manifest.types, examples)?;
    corpus.repairs = repairs;
    Ok(corpus)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `k` distinct exemplars. Entity-bearing sentences are drawn first (in
/// shuffled order); sentences without entities only fill the remainder.
pub fn sample_exemplars(
    corpus: &Corpus,
    k: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>, CorpusError> {
    if k == 0 || k > corpus.len() {
        return Err(CorpusError::InsufficientData {
            requested: k,
            available: corpus.len(),
        });
    }
    let mut rng = rng(seed);
    let (mut with, mut without): (Vec<&LabeledExample>, Vec<&LabeledExample>) =
        corpus.examples.iter().partition(|e| e.has_entities());
    with.shuffle(&mut rng);
    without.shuffle(&mut rng);
    Ok(with.into_iter().chain(without).take(k).cloned().collect())
}

/// Draws `n` distinct evaluation examples in random order, none of which share
/// a source id with `exclude`.
pub fn sample_eval(
    corpus: &Corpus,
    n: usize,
    seed: u64,
    exclude: &[LabeledExample],
) -> Result<Vec<LabeledExample>, CorpusError> {
    let excluded: BTreeSet<&str> = exclude.iter().map(|e| e.source_id.as_str()).collect();
    let pool: Vec<&LabeledExample> = corpus
        .examples
        .iter()
        .filter(|e| !excluded.contains(e.source_id.as_str()))
        .collect();
    if n == 0 || n > pool.len() {
        return Err(CorpusError::InsufficientData {
            requested: n,
            available: pool.len(),
        });
    }
    let mut rng = rng(seed);
    Ok(index::sample(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}
