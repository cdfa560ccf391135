//! Prompt assembly.
//!
//! A prompt is laid out as `DEFINITION? INSTRUCTION EXEMPLAR* QUERY`. Every
//! section is contiguous and the sections tile the whole text, so switching a
//! component off removes exactly its own byte range.
//!
//! Answers follow a one-candidate-per-line grammar:
//!
//! ```text
//! <n>. <phrase> | <True|False> | <explanation> (<TYPE or "not an entity">)
//! ```

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntitySpan, LabeledExample};

/// Type slot used on lines whose decision is `False`.
pub const NOT_AN_ENTITY: &str = "not an entity";

/// Marker line carrying the raw query token list as a JSON array.
pub const QUERY_TOKENS_MARKER: &str = "Query tokens: ";

const FALSE_CANDIDATE_CAP: usize = 3;
const FALSE_CANDIDATE_MAX_TOKENS: usize = 3;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("definition file: {0}")]
    Definition(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DefinitionDoc {
    pub body: String,
    pub type_glossary: Vec<(String, String)>,
}

impl DefinitionDoc {
    /// Parses a definition file. An optional front-matter block delimited by
    /// `---` lines holds one `LABEL: description` entry per line; everything
    /// after it is the definition body.
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut glossary = Vec::new();
        let mut rest = text;
        let trimmed = text.trim_start_matches('\u{feff}');
        if let Some(after) = trimmed
            .strip_prefix("---\n")
            .or_else(|| trimmed.strip_prefix("---\r\n"))
        {
            let mut consumed = 0;
            let mut closed = false;
            for line in after.split_inclusive('\n') {
                consumed += line.len();
                let l = line.trim();
                if l == "---" {
                    closed = true;
                    break;
                }
                if l.is_empty() || l.starts_with('#') {
                    continue;
                }
                let (label, desc) = l.split_once(':').ok_or_else(|| {
                    PromptError::Definition(format!("glossary line without `:`: {l:?}"))
                })?;
                let label = label.trim();
                if label.is_empty() {
                    return Err(PromptError::Definition(format!("empty label in {l:?}")));
                }
                glossary.push((label.to_string(), desc.trim().to_string()));
            }
            if !closed {
                return Err(PromptError::Definition("unterminated front matter".into()));
            }
            rest = &after[consumed..];
        }
        Ok(Self {
            body: rest.trim().to_string(),
            type_glossary: glossary,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Definition(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.type_glossary.iter().map(|(l, _)| l.as_str()).collect()
    }

    pub fn description(&self, label: &str) -> Option<&str> {
        self.type_glossary
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, d)| d.as_str())
    }

    /// Glossary labels missing from `inventory`.
    pub fn unknown_labels<'a>(&'a self, inventory: &[String]) -> Vec<&'a str> {
        self.labels()
            .into_iter()
            .filter(|l| !inventory.iter().any(|t| t == l))
            .collect()
    }
}

/// The four ablation switches plus exemplar count and answer-length cap.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptConfig {
    pub def_on: bool,
    pub fs_on: bool,
    pub cot_on: bool,
    pub cand_on: bool,
    pub k: usize,
    pub max_candidates: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            def_on: true,
            fs_on: true,
            cot_on: true,
            cand_on: true,
            k: 5,
            max_candidates: 20,
        }
    }
}

impl PromptConfig {
    pub fn with_flags(mut self, flags: Flags) -> Self {
        self.def_on = flags.def;
        self.fs_on = flags.fs;
        self.cot_on = flags.cot;
        self.cand_on = flags.cand;
        self
    }

    pub fn flags(&self) -> Flags {
        Flags {
            def: self.def_on,
            fs: self.fs_on,
            cot: self.cot_on,
            cand: self.cand_on,
        }
    }

    /// Number of exemplars actually rendered.
    pub fn effective_k(&self) -> usize {
        if self.fs_on {
            self.k
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flags {
    pub def: bool,
    pub fs: bool,
    pub cot: bool,
    pub cand: bool,
}

impl Flags {
    pub const ALL_ON: Flags = Flags {
        def: true,
        fs: true,
        cot: true,
        cand: true,
    };

    /// All 16 flag combinations.
    pub fn all() -> impl Iterator<Item = Flags> {
        (0u8..16).map(|b| Flags {
            def: b & 8 != 0,
            fs: b & 4 != 0,
            cot: b & 2 != 0,
            cand: b & 1 != 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SectionTag {
    Definition,
    Instruction,
    Exemplar,
    Query,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub tag: SectionTag,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub sections: Vec<Section>,
}

impl RenderedPrompt {
    pub fn tags(&self) -> Vec<SectionTag> {
        self.sections.iter().map(|s| s.tag).collect()
    }

    pub fn section_text(&self, i: usize) -> &str {
        &self.text[self.sections[i].range.clone()]
    }

    /// Text of the prompt with every section carrying one of `tags` removed.
    pub fn text_without(&self, tags: &[SectionTag]) -> String {
        self.sections
            .iter()
            .filter(|s| !tags.contains(&s.tag))
            .map(|s| &self.text[s.range.clone()])
            .collect()
    }
}

struct Builder {
    text: String,
    sections: Vec<Section>,
}

impl Builder {
    fn push(&mut self, tag: SectionTag, body: &str) {
        let start = self.text.len();
        self.text.push_str(body);
        self.sections.push(Section {
            tag,
            range: start..self.text.len(),
        });
    }
}

/// One answer line, before numbering.
#[derive(Debug, Clone)]
struct AnswerItem {
    start: usize,
    phrase: String,
    etype: Option<String>,
}

fn is_punct_only(s: &str) -> bool {
    !s.chars().any(char::is_alphanumeric)
}

fn starts_upper(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

const STOPWORDS: &[&str] = &[
    "about", "after", "again", "also", "because", "been", "before", "being", "between", "both",
    "could", "does", "doing", "down", "during", "each", "from", "further", "have", "having",
    "here", "into", "just", "more", "most", "once", "only", "other", "over", "said", "same",
    "says", "should", "some", "such", "than", "that", "their", "them", "then", "there", "these",
    "they", "this", "those", "through", "under", "until", "very", "were", "what", "when",
    "where", "which", "while", "will", "with", "would", "your",
];

/// Non-entity candidate phrases for an exemplar: capitalized runs outside the
/// gold spans first, then noun-like content words, then any remaining word.
fn false_candidates(ex: &LabeledExample, cap: usize) -> Vec<AnswerItem> {
    let mut inside = vec![false; ex.len()];
    for span in &ex.gold {
        inside[span.start..span.end].iter_mut().for_each(|b| *b = true);
    }
    let mut taken: HashSet<String> = ex
        .gold
        .iter()
        .map(|s| ex.span_text(s).to_lowercase())
        .collect();
    let mut used = vec![false; ex.len()];
    let mut out: Vec<AnswerItem> = Vec::new();

    let mut accept = |start: usize, end: usize, out: &mut Vec<AnswerItem>, used: &mut [bool]| {
        if out.len() >= cap || used[start..end].iter().any(|&u| u) {
            return;
        }
        let phrase = ex.span_text(&EntitySpan::new(start, end, ""));
        if phrase.contains('|') || !taken.insert(phrase.to_lowercase()) {
            return;
        }
        used[start..end].iter_mut().for_each(|u| *u = true);
        out.push(AnswerItem {
            start,
            phrase,
            etype: None,
        });
    };

    let texts = ex.token_texts();
    let free = |i: usize| !inside[i] && !is_punct_only(texts[i]);

    // capitalized runs of at most three tokens; the sentence-initial token is
    // capitalized by convention and never starts a run
    let capital = |i: usize| i > 0 && free(i) && starts_upper(texts[i]);
    let mut i = 0;
    while i < texts.len() {
        if capital(i) {
            let mut j = i + 1;
            while j < texts.len() && j - i < FALSE_CANDIDATE_MAX_TOKENS && capital(j) {
                j += 1;
            }
            accept(i, j, &mut out, &mut used);
            i = j;
        } else {
            i += 1;
        }
    }
    // noun-like content words
    for (i, t) in texts.iter().enumerate() {
        let lower = t.to_lowercase();
        if free(i)
            && t.chars().count() >= 4
            && t.chars().all(char::is_alphabetic)
            && !STOPWORDS.contains(&lower.as_str())
        {
            accept(i, i + 1, &mut out, &mut used);
        }
    }
    // last resort, so that entity-free sentences still get a candidate
    if out.is_empty() {
        for i in 0..texts.len() {
            if free(i) {
                accept(i, i + 1, &mut out, &mut used);
            }
        }
    }
    out
}

fn sanitize_explanation(s: &str) -> String {
    s.replace(['|', '\n', '\r'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn article(noun: &str) -> &'static str {
    match noun.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn entity_explanation(etype: &str, def_doc: &DefinitionDoc) -> String {
    let noun = match def_doc.description(etype) {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("{etype} entity"),
    };
    sanitize_explanation(&format!("is {} {noun}", article(&noun)))
}

const NON_ENTITY_EXPLANATION: &str = "does not fit any entity type in the definition";

/// Renders the demonstration answer for one exemplar.
///
/// Every distinct gold phrase (compared case-insensitively) gets one `True`
/// line; with `cand_on`, up to three non-entity phrases get `False` lines.
/// Lines follow sentence order.
pub fn render_exemplar_answer(
    ex: &LabeledExample,
    cfg: &PromptConfig,
    def_doc: &DefinitionDoc,
) -> String {
    let mut seen = HashSet::new();
    let mut items: Vec<AnswerItem> = ex
        .gold
        .iter()
        .filter_map(|span| {
            let phrase = ex.span_text(span);
            seen.insert(phrase.to_lowercase()).then(|| AnswerItem {
                start: span.start,
                phrase,
                etype: Some(span.etype.clone()),
            })
        })
        .collect();
    if cfg.cand_on {
        let room = cfg.max_candidates.saturating_sub(items.len());
        items.extend(false_candidates(ex, room.min(FALSE_CANDIDATE_CAP)));
    }
    items.sort_by_key(|it| it.start);

    let mut out = String::new();
    for (n, it) in items.iter().enumerate() {
        let (decision, slot, why) = match &it.etype {
            Some(t) => ("True", t.as_str(), entity_explanation(t, def_doc)),
            None => ("False", NOT_AN_ENTITY, NON_ENTITY_EXPLANATION.to_string()),
        };
        let why = if cfg.cot_on { format!("{why} ") } else { String::new() };
        out.push_str(&format!(
            "{}. {} | {} | {}({})\n",
            n + 1,
            it.phrase,
            decision,
            why,
            slot
        ));
    }
    out
}

fn instruction_text(cfg: &PromptConfig, def_doc: &DefinitionDoc) -> String {
    let mut s = String::from(
        "Task: read the sentence and list its candidate entities, one per line, in this format:\n",
    );
    s.push_str("<n>. <phrase> | <True or False> | <explanation> (<TYPE or \"not an entity\">)\n");
    let labels = def_doc.labels();
    if !labels.is_empty() {
        s.push_str(&format!("Allowed types: {}.\n", labels.join(", ")));
    }
    if cfg.cot_on {
        s.push_str("Explain each decision briefly before the type.\n");
    } else {
        s.push_str("Leave the explanation empty.\n");
    }
    if cfg.cand_on {
        s.push_str(
            "Also list phrases that could be mistaken for entities and mark them False.\n",
        );
    } else {
        s.push_str("List only phrases that are entities.\n");
    }
    s.push_str(&format!(
        "List at most {} candidates.\n\n",
        cfg.max_candidates
    ));
    s
}

/// Assembles the full prompt for `query`.
pub fn render_prompt(
    cfg: &PromptConfig,
    def_doc: &DefinitionDoc,
    exemplars: &[LabeledExample],
    query: &LabeledExample,
) -> Result<RenderedPrompt, PromptError> {
    if cfg.def_on && def_doc.body.trim().is_empty() {
        return Err(PromptError::ConfigMismatch(
            "definitions are on but the definition body is empty".into(),
        ));
    }
    if cfg.fs_on && exemplars.is_empty() {
        return Err(PromptError::ConfigMismatch(
            "few-shot examples are on but no exemplars were supplied".into(),
        ));
    }
    if query.is_empty() {
        return Err(PromptError::ConfigMismatch("query sentence has no tokens".into()));
    }
    if cfg.max_candidates == 0 {
        return Err(PromptError::ConfigMismatch("max_candidates must be positive".into()));
    }

    let mut b = Builder {
        text: String::new(),
        sections: Vec::new(),
    };
    if cfg.def_on {
        let mut s = format!("Definition:\n{}\n", def_doc.body.trim());
        if !def_doc.type_glossary.is_empty() {
            s.push_str("\nEntity types:\n");
            for (label, desc) in &def_doc.type_glossary {
                s.push_str(&format!("- {label}: {desc}\n"));
            }
        }
        s.push('\n');
        b.push(SectionTag::Definition, &s);
    }
    b.push(SectionTag::Instruction, &instruction_text(cfg, def_doc));
    if cfg.fs_on {
        for (i, ex) in exemplars.iter().enumerate() {
            let s = format!(
                "Example {}:\nSentence: {}\nAnswer:\n{}\n",
                i + 1,
                ex.detokenized(),
                render_exemplar_answer(ex, cfg, def_doc)
            );
            b.push(SectionTag::Exemplar, &s);
        }
    }
    let tokens_json =
        serde_json::to_string(&query.token_texts()).expect("token list serializes");
    let s = format!(
        "Sentence: {}\n{QUERY_TOKENS_MARKER}{tokens_json}\nAnswer:\n",
        query.detokenized()
    );
    b.push(SectionTag::Query, &s);
    Ok(RenderedPrompt {
        text: b.text,
        sections: b.sections,
    })
}

/// Recovers the query token list embedded in a rendered prompt.
pub fn query_tokens(prompt: &str) -> Option<Vec<String>> {
    let line = prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix(QUERY_TOKENS_MARKER))?;
    serde_json::from_str(line).ok()
}
