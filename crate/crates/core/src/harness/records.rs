//! Persisted run artifacts: one JSONL file per run (a header line followed by
//! one line per evaluated sentence) and a JSON summary per experiment.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::align::GroundingReport;
use crate::backend::CacheKey;
use crate::corpus::EntitySpan;
use crate::eval::{
    self, AggregateReport, Counts, Disagreement, EvalReport, PhraseSets,
};
use crate::parse::{Extraction, ParseReport};
use crate::promptgen::PromptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    pub skipped_lines: usize,
    pub repaired_lines: usize,
    pub unmatched: usize,
    pub empty_parses: usize,
    pub dropped_types: usize,
    pub demoted: usize,
}

impl Counters {
    pub fn add(&mut self, o: &Counters) {
        self.skipped_lines += o.skipped_lines;
        self.repaired_lines += o.repaired_lines;
        self.unmatched += o.unmatched;
        self.empty_parses += o.empty_parses;
        self.dropped_types += o.dropped_types;
        self.demoted += o.demoted;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_fingerprint: String,
    pub dataset: String,
    pub run: usize,
    pub seed: u64,
    pub prompt: PromptConfig,
    pub model_id: String,
    pub exemplar_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub source_id: String,
    pub tokens: Vec<String>,
    pub gold: Vec<EntitySpan>,
    pub prompt_sha256: String,
    pub cache_key: CacheKey,
    pub completion: String,
    pub cache_hit: bool,
    /// Absent when the completion could not be parsed at all.
    pub parse: Option<ParseReport>,
    pub empty_parse: bool,
    pub extraction: Extraction,
    pub grounding: GroundingReport,
    pub counts: Counts,
}

impl ExampleRecord {
    pub fn counters(&self) -> Counters {
        Counters {
            skipped_lines: self.parse.as_ref().map_or(0, |p| p.skipped_lines),
            repaired_lines: self.parse.as_ref().map_or(0, |p| p.repaired_lines),
            unmatched: self.grounding.unmatched.len(),
            empty_parses: usize::from(self.empty_parse),
            dropped_types: self.extraction.dropped_types,
            demoted: self.extraction.demoted,
        }
    }

    pub fn predicted_spans(&self) -> Vec<EntitySpan> {
        self.grounding.spans()
    }

    pub fn sentence(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn gold_phrases(&self) -> Vec<String> {
        self.gold
            .iter()
            .map(|s| self.tokens[s.start..s.end].join(" "))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum RunLine {
    Header(RunHeader),
    Example(Box<ExampleRecord>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub header: RunHeader,
    pub examples: Vec<ExampleRecord>,
}

impl RunFile {
    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let mut out = Vec::new();
        let mut line = |v: &RunLine| -> Result<(), HarnessError> {
            serde_json::to_writer(&mut out, v).map_err(|e| HarnessError::Json(e.to_string()))?;
            out.push(b'\n');
            Ok(())
        };
        line(&RunLine::Header(self.header.clone()))?;
        for ex in &self.examples {
            line(&RunLine::Example(Box::new(ex.clone())))?;
        }
        write_file(path, &out)
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
        let mut header = None;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| HarnessError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RunLine = serde_json::from_str(&line).map_err(|e| {
                HarnessError::Json(format!("{} line {}: {e}", path.display(), i + 1))
            })?;
            match parsed {
                RunLine::Header(h) if header.is_none() => header = Some(h),
                RunLine::Header(_) => {
                    return Err(HarnessError::Json(format!(
                        "{}: more than one header",
                        path.display()
                    )))
                }
                RunLine::Example(e) => examples.push(*e),
            }
        }
        let header = header.ok_or_else(|| {
            HarnessError::Json(format!("{}: missing header line", path.display()))
        })?;
        Ok(Self { header, examples })
    }

    /// Recomputes the strict micro-F1 report from the stored spans.
    pub fn rescore(&self) -> EvalReport {
        let pred: Vec<Vec<EntitySpan>> = self.examples.iter().map(|e| e.predicted_spans()).collect();
        let gold: Vec<Vec<EntitySpan>> = self.examples.iter().map(|e| e.gold.clone()).collect();
        eval::micro_f1(&pred, &gold).expect("lists built from the same records")
    }

    pub fn counters(&self) -> Counters {
        let mut c = Counters::default();
        for e in &self.examples {
            c.add(&e.counters());
        }
        c
    }

    /// Sentences whose predicted and gold phrase sets differ.
    pub fn disagreements(&self) -> Vec<Disagreement> {
        let sentences: Vec<String> = self.examples.iter().map(|e| e.sentence()).collect();
        let items: Vec<PhraseSets<'_>> = self
            .examples
            .iter()
            .zip(&sentences)
            .map(|(e, s)| PhraseSets {
                sentence_id: &e.source_id,
                sentence: s,
                predicted: e.extraction.predictions.iter().map(|(p, _)| p.clone()).collect(),
                gold: e.gold_phrases(),
            })
            .collect();
        eval::entity_set_diff(&items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub run_file: String,
    pub report: EvalReport,
    pub counters: Counters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_fingerprint: String,
    pub dataset: String,
    pub model_id: String,
    pub prompt: PromptConfig,
    pub n_eval: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    /// Aggregate of per-run F1 on a 0-100 scale.
    pub aggregate: AggregateReport,
    pub f1: String,
    pub counters: Counters,
}

impl ExperimentSummary {
    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        let mut bytes =
            serde_json::to_vec_pretty(self).map_err(|e| HarnessError::Json(e.to_string()))?;
        bytes.push(b'\n');
        write_file(path, &bytes)
    }

    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Json(e.to_string()))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(bytes).map_err(|e| HarnessError::io(path, e))
}

pub fn run_file_name(dataset: &str, fingerprint: &str, run: usize) -> String {
    format!("{}-{fingerprint}-run{run}.jsonl", slug(dataset))
}

pub fn summary_file_name(dataset: &str, fingerprint: &str) -> String {
    format!("{}-{fingerprint}-summary.json", slug(dataset))
}

pub(crate) fn slug(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() {
        "dataset".into()
    } else {
        out
    }
}

/// Summary path that sits next to a run file, if the name follows the
/// `<dataset>-<fingerprint>-run<n>.jsonl` pattern.
pub fn summary_path_for_run(run_file: &Path) -> Option<PathBuf> {
    let name = run_file.file_name()?.to_str()?;
    let stem = name.strip_suffix(".jsonl")?;
    let (prefix, _) = stem.rsplit_once("-run")?;
    Some(run_file.with_file_name(format!("{prefix}-summary.json")))
}
