//! Completion parsing.
//!
//! Each line is tried against the strict answer grammar first and then against
//! a relaxed reading that tolerates the usual deviations: a missing or
//! different list marker, yes/no decisions, any letter case, the type placed
//! before the explanation, or no explanation slot at all. Lines that only the
//! relaxed reading accepts are counted as repaired.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::promptgen::NOT_AN_ENTITY;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntity {
    pub phrase: String,
    pub is_entity: bool,
    pub explanation: String,
    pub claimed_type: Option<String>,
    /// Zero-based index of the source line.
    pub line_no: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParseReport {
    pub candidates: Vec<CandidateEntity>,
    pub skipped_lines: usize,
    pub repaired_lines: usize,
    pub blank_lines: usize,
    pub total_lines: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no candidate could be parsed from {total_lines} lines ({skipped_lines} skipped)")]
    EmptyParse {
        skipped_lines: usize,
        total_lines: usize,
    },
}

static STRICT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\d+\. (\S.*?) \| (True|False) \| (?:(.*?\S) )?\(([^()]*[^()\s][^()]*)\)$")
        .unwrap()
});
static LIST_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:\d+\s*[.):]\s*|\(\d+\)\s*|[-*•+]\s+)").unwrap());
static DECISION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^(true|false|yes|no)\b\s*(.*)$").unwrap());
static TRAILING_TYPE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(.*?)\s*\(([^()]*)\)\s*\.?$").unwrap());
static LEADING_TYPE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(([^()]*)\)\s*(.*)$").unwrap());
static TYPE_FIELD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\btype\s*[:=]\s*([A-Za-z][\w\-]*)").unwrap());
static BARE_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Za-z][\w\-./]*$").unwrap());
static UPPER_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[A-Z][A-Z0-9_\-]*$").unwrap());

fn type_slot(raw: &str) -> Option<String> {
    let t = raw.trim();
    let lower = t.to_lowercase();
    if t.is_empty() || lower == NOT_AN_ENTITY || lower == "none" || lower == "n/a" {
        None
    } else {
        Some(t.to_string())
    }
}

fn clean_phrase(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c| c == '*' || c == '"' || c == '`' || c == '\u{201c}' || c == '\u{201d}')
        .trim()
        .to_string()
}

fn strict_line(line: &str, line_no: usize) -> Option<CandidateEntity> {
    let caps = STRICT.captures(line)?;
    Some(CandidateEntity {
        phrase: caps[1].to_string(),
        is_entity: &caps[2] == "True",
        explanation: caps.get(3).map_or("", |m| m.as_str()).to_string(),
        claimed_type: type_slot(&caps[4]),
        line_no,
    })
}

fn relaxed_line(line: &str, line_no: usize) -> Option<CandidateEntity> {
    let body = LIST_MARKER.replace(line.trim(), "");
    let parts: Vec<&str> = body.split('|').map(str::trim).collect();
    if parts.len() < 2 {
        return None;
    }
    let (idx, caps) = parts
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, p)| DECISION.captures(p).map(|c| (i, c)))?;
    let phrase = clean_phrase(&parts[..idx].join(" | "));
    if phrase.is_empty() {
        return None;
    }
    let is_entity = matches!(caps[1].to_lowercase().as_str(), "true" | "yes");

    let mut pieces: Vec<&str> = Vec::new();
    let tail = caps.get(2).map_or("", |m| m.as_str()).trim();
    if !tail.is_empty() {
        pieces.push(tail);
    }
    pieces.extend(parts[idx + 1..].iter().copied().filter(|p| !p.is_empty()));
    let rest = pieces.join(" | ");

    let (claimed_type, explanation) = if let Some(c) = TRAILING_TYPE.captures(&rest) {
        (type_slot(&c[2]), c[1].trim_end_matches('|').trim().to_string())
    } else if let Some(c) = LEADING_TYPE.captures(&rest) {
        (type_slot(&c[1]), c[2].trim_start_matches('|').trim().to_string())
    } else if let Some(c) = TYPE_FIELD.captures(&rest) {
        let m = c.get(0).unwrap();
        let expl = format!("{}{}", &rest[..m.start()], &rest[m.end()..]);
        (
            type_slot(&c[1]),
            expl.trim().trim_matches(|ch: char| ch == '|' || ch == ',').trim().to_string(),
        )
    } else if pieces.len() >= 2 && BARE_LABEL.is_match(pieces[0]) {
        (type_slot(pieces[0]), pieces[1..].join(" | "))
    } else if pieces.len() == 1 && UPPER_LABEL.is_match(pieces[0]) {
        (type_slot(pieces[0]), String::new())
    } else {
        (None, rest.clone())
    };

    Some(CandidateEntity {
        phrase,
        is_entity,
        explanation,
        claimed_type,
        line_no,
    })
}

/// Parses a raw completion into candidate records.
///
/// Duplicate phrases (case-insensitive) keep their first occurrence; later
/// ones count as skipped. Returns [`ParseError::EmptyParse`] when the text has
/// non-blank lines but none of them yields a candidate.
pub fn parse_completion(text: &str) -> Result<ParseReport, ParseError> {
    let mut report = ParseReport::default();
    let mut seen = HashSet::new();
    for (line_no, raw) in text.lines().enumerate() {
        report.total_lines += 1;
        let line = raw.trim_end();
        if line.trim().is_empty() {
            report.blank_lines += 1;
            continue;
        }
        let (cand, repaired) = match strict_line(line, line_no) {
            Some(c) => (c, false),
            None => match relaxed_line(line, line_no) {
                Some(c) => (c, true),
                None => {
                    report.skipped_lines += 1;
                    continue;
                }
            },
        };
        if !seen.insert(cand.phrase.to_lowercase()) {
            report.skipped_lines += 1;
            continue;
        }
        if repaired {
            report.repaired_lines += 1;
        }
        report.candidates.push(cand);
    }
    if report.candidates.is_empty() && report.skipped_lines > 0 {
        return Err(ParseError::EmptyParse {
            skipped_lines: report.skipped_lines,
            total_lines: report.total_lines,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Extraction {
    /// `(phrase, canonical type)` in source order, without duplicates.
    pub predictions: Vec<(String, String)>,
    /// Entity decisions whose type could not be mapped onto the inventory.
    pub dropped_types: usize,
    /// Entity decisions without any type; treated as non-entities.
    pub demoted: usize,
}

/// Maps a claimed type onto the inventory: exact match, then case-insensitive
/// match, then a claimed prefix that identifies exactly one label.
pub fn canonicalize_type<'a>(claimed: &str, inventory: &'a [String]) -> Option<&'a str> {
    let claimed = claimed.trim();
    if let Some(t) = inventory.iter().find(|t| *t == claimed) {
        return Some(t);
    }
    let lower = claimed.to_lowercase();
    if let Some(t) = inventory.iter().find(|t| t.to_lowercase() == lower) {
        return Some(t);
    }
    if lower.is_empty() {
        return None;
    }
    let mut prefixed = inventory.iter().filter(|t| t.to_lowercase().starts_with(&lower));
    match (prefixed.next(), prefixed.next()) {
        (Some(t), None) => Some(t),
        _ => None,
    }
}

pub fn extract_predictions(report: &ParseReport, inventory: &[String]) -> Extraction {
    let mut out = Extraction::default();
    let mut seen = HashSet::new();
    for c in report.candidates.iter().filter(|c| c.is_entity) {
        let Some(claimed) = &c.claimed_type else {
            out.demoted += 1;
            continue;
        };
        let Some(etype) = canonicalize_type(claimed, inventory) else {
            out.dropped_types += 1;
            continue;
        };
        let pair = (c.phrase.clone(), etype.to_string());
        if seen.insert(pair.clone()) {
            out.predictions.push(pair);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inv(types: &[&str]) -> Vec<String> {
        types.iter().map(|s| s.to_string()).collect()
    }

    fn cand(phrase: &str, is_entity: bool, t: Option<&str>) -> CandidateEntity {
        CandidateEntity {
            phrase: phrase.into(),
            is_entity,
            explanation: String::new(),
            claimed_type: t.map(str::to_string),
            line_no: 0,
        }
    }

    #[test]
    fn strict_line_parses() {
        let r = parse_completion("1. New York | True | is a city (LOC)").unwrap();
        assert_eq!(
            r.candidates,
            vec![CandidateEntity {
                phrase: "New York".into(),
                is_entity: true,
                explanation: "is a city".into(),
                claimed_type: Some("LOC".into()),
                line_no: 0,
            }]
        );
        assert_eq!((r.repaired_lines, r.skipped_lines), (0, 0));
    }

    #[test]
    fn explanation_may_contain_parentheses() {
        let r = parse_completion("2. Acme | True | is a firm (a company) (ORG)").unwrap();
        assert_eq!(r.candidates[0].explanation, "is a firm (a company)");
        assert_eq!(r.candidates[0].claimed_type.as_deref(), Some("ORG"));
    }

    #[test]
    fn false_line_has_no_type() {
        let r = parse_completion("1. Monday | False | (not an entity)").unwrap();
        assert!(!r.candidates[0].is_entity);
        assert_eq!(r.candidates[0].claimed_type, None);
        assert_eq!(r.candidates[0].explanation, "");
    }

    #[test]
    fn relaxed_bullet_yes() {
        let r = parse_completion("- Paris | yes (LOC)").unwrap();
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.candidates[0].phrase, "Paris");
        assert!(r.candidates[0].is_entity);
        assert_eq!(r.candidates[0].claimed_type.as_deref(), Some("LOC"));
        assert_eq!(r.repaired_lines, 1);
    }

    #[test]
    fn no_candidates_is_empty_parse() {
        assert_eq!(
            parse_completion("I cannot find any entities."),
            Err(ParseError::EmptyParse {
                skipped_lines: 1,
                total_lines: 1
            })
        );
        assert_eq!(parse_completion("").unwrap().total_lines, 0);
        assert_eq!(parse_completion("\n \n").unwrap().blank_lines, 2);
    }

    #[test]
    fn duplicates_keep_first() {
        let r = parse_completion(
            "1. Paris | True | (LOC)\n2. paris | True | (ORG)\n\n3. Rome | False | (not an entity)",
        )
        .unwrap();
        assert_eq!(r.candidates.len(), 2);
        assert_eq!(r.candidates[0].claimed_type.as_deref(), Some("LOC"));
        assert_eq!(r.candidates[1].line_no, 3);
        assert_eq!((r.skipped_lines, r.blank_lines, r.total_lines), (1, 1, 4));
    }

    #[test]
    fn phrase_with_pipe() {
        let r = parse_completion("1. A | B | True | (ORG)").unwrap();
        assert_eq!(r.candidates[0].phrase, "A | B");
    }

    #[test]
    fn canonicalization_cascade() {
        let i = inv(&["LOC", "PER"]);
        let report = ParseReport {
            candidates: vec![cand("Paris", true, Some("loc"))],
            ..Default::default()
        };
        assert_eq!(
            extract_predictions(&report, &i).predictions,
            vec![("Paris".to_string(), "LOC".to_string())]
        );
        let report = ParseReport {
            candidates: vec![cand("Paris", false, Some("LOC"))],
            ..Default::default()
        };
        assert!(extract_predictions(&report, &i).predictions.is_empty());
        assert_eq!(canonicalize_type("Pe", &inv(&["person", "location"])), Some("person"));
    }

    #[test]
    fn unmappable_type_dropped() {
        let report = ParseReport {
            candidates: vec![cand("X", true, Some("LOCATION-ish"))],
            ..Default::default()
        };
        let e = extract_predictions(&report, &inv(&["LOC", "LANGUAGE"]));
        assert!(e.predictions.is_empty());
        assert_eq!(e.dropped_types, 1);
        // a prefix shared by two labels is ambiguous
        assert_eq!(canonicalize_type("L", &inv(&["LOC", "LANGUAGE"])), None);
        assert_eq!(canonicalize_type("LA", &inv(&["LOC", "LANGUAGE"])), Some("LANGUAGE"));
    }

    #[test]
    fn untyped_entity_is_demoted() {
        let report = ParseReport {
            candidates: vec![cand("X", true, None), cand("Y", true, Some("PER"))],
            ..Default::default()
        };
        let e = extract_predictions(&report, &inv(&["PER"]));
        assert_eq!(e.demoted, 1);
        assert_eq!(e.predictions.len(), 1);
    }
}
