//! Grounding predicted phrases back onto token spans.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySpan, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    CaseInsensitive,
    Normalized,
}

impl MatchMode {
    const CASCADE: [MatchMode; 3] = [
        MatchMode::Exact,
        MatchMode::CaseInsensitive,
        MatchMode::Normalized,
    ];

    /// Canonical form of `s` under this mode's equivalence.
    pub fn key(self, s: &str) -> String {
        match self {
            MatchMode::Exact => s.to_string(),
            MatchMode::CaseInsensitive => s.to_lowercase(),
            MatchMode::Normalized => normalize(s),
        }
    }

    /// Extra tokens a window may carry beyond the phrase's word count.
    fn slack(self) -> usize {
        match self {
            MatchMode::Normalized => 3,
            _ => 0,
        }
    }
}

/// Lower-cases, strips leading and trailing punctuation, and collapses runs of
/// whitespace.
pub fn normalize(s: &str) -> String {
    s.trim_matches(|c: char| !c.is_alphanumeric())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedPrediction {
    pub span: EntitySpan,
    pub phrase: String,
    pub match_mode: MatchMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundingReport {
    pub grounded: Vec<GroundedPrediction>,
    pub unmatched: Vec<(String, String)>,
}

impl GroundingReport {
    pub fn spans(&self) -> Vec<EntitySpan> {
        self.grounded.iter().map(|g| g.span.clone()).collect()
    }
}

/// Grounds each `(phrase, type)` onto the leftmost token window that matches
/// it and that no earlier prediction has taken.
///
/// Match modes are tried in order exact, case-insensitive, normalized; within
/// a mode windows are scanned by start position and then by length. Windows
/// are consumed by `(start, end)` regardless of type.
pub fn ground(predictions: &[(String, String)], sentence: &[Token]) -> GroundingReport {
    let mut report = GroundingReport::default();
    let mut consumed: HashSet<(usize, usize)> = HashSet::new();
    let n = sentence.len();

    for (phrase, etype) in predictions {
        let words = phrase.split_whitespace().count();
        let mut hit = None;
        'modes: for mode in MatchMode::CASCADE {
            let target = mode.key(phrase);
            if target.is_empty() || words == 0 {
                continue;
            }
            let (min_len, max_len) = match mode {
                MatchMode::Normalized => (1, words + mode.slack()),
                _ => (words, words),
            };
            for start in 0..n {
                let mut window = String::new();
                for end in start + 1..=n.min(start + max_len) {
                    if end > start + 1 {
                        window.push(' ');
                    }
                    window.push_str(&sentence[end - 1].text);
                    if end - start < min_len || consumed.contains(&(start, end)) {
                        continue;
                    }
                    if mode.key(&window) == target {
                        hit = Some((start, end, mode));
                        break 'modes;
                    }
                }
            }
        }
        match hit {
            Some((start, end, mode)) => {
                consumed.insert((start, end));
                report.grounded.push(GroundedPrediction {
                    span: EntitySpan::new(start, end, etype.clone()),
                    phrase: phrase.clone(),
                    match_mode: mode,
                });
            }
            None => report.unmatched.push((phrase.clone(), etype.clone())),
        }
    }
    report
}

/// Encodes spans as IOB2 tags. Overlapping spans are resolved by keeping the
/// longer one, ties going to the leftmost.
pub fn spans_to_tags(tokens: &[Token], spans: &[EntitySpan]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); tokens.len()];
    let valid: Vec<EntitySpan> = spans
        .iter()
        .filter(|s| s.start < s.end && s.end <= tokens.len())
        .cloned()
        .collect();
    for span in crate::corpus::flatten_to_outermost(valid) {
        tags[span.start] = format!("B-{}", span.etype);
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = format!("I-{}", span.etype);
        }
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<Token> {
        s.split(' ')
            .enumerate()
            .map(|(index, t)| Token {
                text: t.to_string(),
                index,
            })
            .collect()
    }

    fn p(phrase: &str, t: &str) -> (String, String) {
        (phrase.to_string(), t.to_string())
    }

    #[test]
    fn repeated_phrase_leftmost_unused() {
        let r = ground(
            &[p("bank", "ORG"), p("bank", "LOC")],
            &toks("the bank near the bank"),
        );
        assert_eq!(
            r.spans(),
            vec![EntitySpan::new(1, 2, "ORG"), EntitySpan::new(4, 5, "LOC")]
        );
        assert!(r.unmatched.is_empty());
    }

    #[test]
    fn case_insensitive_fallback() {
        let r = ground(&[p("new york", "LOC")], &toks("New York"));
        assert_eq!(r.grounded[0].span, EntitySpan::new(0, 2, "LOC"));
        assert_eq!(r.grounded[0].match_mode, MatchMode::CaseInsensitive);
    }

    #[test]
    fn normalized_fallback() {
        let r = ground(&[p("\"Acme Corp.\"", "ORG")], &toks("shares of Acme Corp rose"));
        assert_eq!(r.grounded[0].span, EntitySpan::new(2, 4, "ORG"));
        assert_eq!(r.grounded[0].match_mode, MatchMode::Normalized);
        let r = ground(&[p("York", "LOC")], &toks("in , York"));
        assert_eq!(r.grounded[0].match_mode, MatchMode::Exact);
    }

    #[test]
    fn missing_phrase_unmatched() {
        let r = ground(&[p("Atlantis", "LOC")], &toks("a quiet town"));
        assert_eq!(r.unmatched, vec![p("Atlantis", "LOC")]);
        assert!(r.grounded.is_empty());
    }

    #[test]
    fn more_predictions_than_occurrences() {
        let r = ground(
            &[p("bank", "ORG"), p("bank", "LOC"), p("bank", "MISC")],
            &toks("the bank near the bank"),
        );
        assert_eq!(r.grounded.len(), 2);
        assert_eq!(r.unmatched, vec![p("bank", "MISC")]);
    }

    #[test]
    fn tags_from_spans() {
        let t = toks("John lives in New York .");
        assert_eq!(
            spans_to_tags(&t, &[EntitySpan::new(0, 1, "PER"), EntitySpan::new(3, 5, "LOC")]),
            vec!["B-PER", "O", "O", "B-LOC", "I-LOC", "O"]
        );
        assert_eq!(spans_to_tags(&t, &[]), vec!["O"; 6]);
    }

    #[test]
    fn overlapping_spans_keep_longer_then_leftmost() {
        let t = toks("a b c");
        assert_eq!(
            spans_to_tags(&t, &[EntitySpan::new(0, 2, "PER"), EntitySpan::new(1, 3, "ORG")]),
            vec!["B-PER", "I-PER", "O"]
        );
        assert_eq!(
            spans_to_tags(&t, &[EntitySpan::new(1, 2, "ORG"), EntitySpan::new(0, 3, "PER")]),
            vec!["B-PER", "I-PER", "I-PER"]
        );
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("  \"New   York,\" "), "new york");
        assert_eq!(normalize("..."), "");
        assert_eq!(normalize("U.S."), "u.s");
    }
}
