//! Strict span-level scoring, multi-run aggregation and disagreement export.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntitySpan;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("length mismatch: {predictions} prediction lists vs {gold} gold lists")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("cannot aggregate an empty list of runs")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn from_counts(total: Counts, per_type: BTreeMap<String, Counts>) -> Self {
        Self {
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            per_type,
        }
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
        }
    }
}

/// Matches one sentence's predictions against its gold spans: each prediction
/// in order takes the first uncredited gold span equal on `(start, end, type)`.
pub fn match_example(
    pred: &[EntitySpan],
    gold: &[EntitySpan],
    per_type: &mut BTreeMap<String, Counts>,
) -> Counts {
    let mut credited = vec![false; gold.len()];
    let mut c = Counts::default();
    for p in pred {
        let hit = gold
            .iter()
            .enumerate()
            .find(|(i, g)| !credited[*i] && *g == p)
            .map(|(i, _)| i);
        let entry = per_type.entry(p.etype.clone()).or_default();
        match hit {
            Some(i) => {
                credited[i] = true;
                c.tp += 1;
                entry.tp += 1;
            }
            None => {
                c.fp += 1;
                entry.fp += 1;
            }
        }
    }
    for (g, _) in gold.iter().zip(&credited).filter(|(_, &c)| !c) {
        c.fn_ += 1;
        per_type.entry(g.etype.clone()).or_default().fn_ += 1;
    }
    c
}

/// Micro-averaged strict F1: counts are pooled over all examples first.
pub fn micro_f1(
    pred: &[Vec<EntitySpan>],
    gold: &[Vec<EntitySpan>],
) -> Result<EvalReport, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: pred.len(),
            gold: gold.len(),
        });
    }
    let mut total = Counts::default();
    let mut per_type = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        total.add(match_example(p, g, &mut per_type));
    }
    Ok(EvalReport::from_counts(total, per_type))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub run_f1s: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (divisor n - 1); zero for a single run.
    pub std: f64,
    pub n_runs: usize,
}

impl AggregateReport {
    /// `MM.MM ± SS.SS`
    pub fn formatted(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn aggregate(run_f1s: &[f64]) -> Result<AggregateReport, EvalError> {
    if run_f1s.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = run_f1s.len();
    let mean = run_f1s.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        let ss: f64 = run_f1s.iter().map(|x| (x - mean).powi(2)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    Ok(AggregateReport {
        run_f1s: run_f1s.to_vec(),
        mean,
        std,
        n_runs: n,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub sentence_id: String,
    pub sentence: String,
    pub predicted: BTreeSet<String>,
    pub gold: BTreeSet<String>,
}

/// One scored sentence as seen by [`entity_set_diff`].
#[derive(Debug, Clone)]
pub struct PhraseSets<'a> {
    pub sentence_id: &'a str,
    pub sentence: &'a str,
    pub predicted: Vec<String>,
    pub gold: Vec<String>,
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sentences whose predicted and gold phrase sets differ, ignoring types.
/// Ordered by sentence id.
pub fn entity_set_diff(items: &[PhraseSets<'_>]) -> Vec<Disagreement> {
    let mut out: Vec<Disagreement> = items
        .iter()
        .filter_map(|it| {
            let predicted: BTreeSet<String> = it.predicted.iter().map(|p| collapse_ws(p)).collect();
            let gold: BTreeSet<String> = it.gold.iter().map(|p| collapse_ws(p)).collect();
            (predicted != gold).then(|| Disagreement {
                sentence_id: it.sentence_id.to_string(),
                sentence: it.sentence.to_string(),
                predicted,
                gold,
            })
        })
        .collect();
    out.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
    out
}

/// Seeded subset of `n` disagreements, kept in sentence-id order. Returns all
/// of them when fewer than `n` exist.
pub fn sample_disagreements(all: &[Disagreement], n: usize, seed: u64) -> Vec<Disagreement> {
    if n >= all.len() {
        return all.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, all.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i].clone()).collect()
}

/// Human-readable review file: the sentence and two bulleted phrase lists per
/// record. The lists are labelled neutrally so reviewers cannot tell which
/// one is the reference.
pub fn render_review(items: &[Disagreement]) -> String {
    let mut out = String::new();
    for (i, d) in items.iter().enumerate() {
        out.push_str(&format!("[{}] {}\n{}\n", i + 1, d.sentence_id, d.sentence));
        for (label, set) in [("List A", &d.predicted), ("List B", &d.gold)] {
            out.push_str(&format!("{label}:\n"));
            if set.is_empty() {
                out.push_str("  (none)\n");
            }
            for p in set {
                out.push_str(&format!("  - {p}\n"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: usize, b: usize, t: &str) -> EntitySpan {
        EntitySpan::new(a, b, t)
    }

    #[test]
    fn identical_predictions_score_one() {
        let gold = vec![vec![s(0, 1, "PER")], vec![s(2, 4, "LOC"), s(5, 6, "ORG")]];
        let r = micro_f1(&gold, &gold).unwrap();
        assert_eq!(r.f1, 1.0);
        assert_eq!((r.tp, r.fp, r.fn_), (3, 0, 0));
    }

    #[test]
    fn mixed_example() {
        let (a, b, c) = ((0, 1), (2, 3), (4, 6));
        let pred = vec![vec![s(a.0, a.1, "PER"), s(b.0, b.1, "LOC")]];
        let gold = vec![vec![s(a.0, a.1, "PER"), s(b.0, b.1, "ORG"), s(c.0, c.1, "LOC")]];
        let r = micro_f1(&pred, &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 2));
        assert_eq!(r.precision, 0.5);
        assert!((r.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 0.4).abs() < 1e-15);
        assert_eq!(r.per_type["LOC"], Counts { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(r.per_type["ORG"], Counts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(r.per_type["PER"], Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn no_predictions() {
        let r = micro_f1(&[vec![]], &[vec![s(0, 1, "PER")]]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = micro_f1(&[vec![]], &[vec![]]).unwrap();
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn duplicate_prediction_credited_once() {
        let r = micro_f1(&[vec![s(0, 1, "PER"), s(0, 1, "PER")]], &[vec![s(0, 1, "PER")]]).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
    }

    #[test]
    fn misaligned_inputs() {
        assert_eq!(
            micro_f1(&[vec![]], &[]),
            Err(EvalError::LengthMismatch {
                predictions: 1,
                gold: 0
            })
        );
    }

    #[test]
    fn aggregate_five_runs() {
        let a = aggregate(&[80.0, 82.0, 78.0, 84.0, 76.0]).unwrap();
        assert_eq!(a.mean, 80.0);
        assert!((a.std - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.formatted(), "80.00 ± 3.16");
        let a = aggregate(&[70.0]).unwrap();
        assert_eq!(a.formatted(), "70.00 ± 0.00");
        assert_eq!(aggregate(&[]), Err(EvalError::EmptyInput));
    }

    fn sets<'a>(id: &'a str, p: &[&str], g: &[&str]) -> PhraseSets<'a> {
        PhraseSets {
            sentence_id: id,
            sentence: "",
            predicted: p.iter().map(|x| x.to_string()).collect(),
            gold: g.iter().map(|x| x.to_string()).collect(),
        }
    }

    #[test]
    fn disagreements_ignore_type_and_whitespace() {
        let d = entity_set_diff(&[
            sets("b", &["Paris"], &["Paris", "France"]),
            sets("a", &["New  York"], &["New York"]),
            sets("c", &[], &["X"]),
        ]);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].sentence_id, "b");
        assert_eq!(d[1].sentence_id, "c");
    }

    #[test]
    fn seeded_disagreement_sample() {
        let all: Vec<Disagreement> = (0..200)
            .map(|i| Disagreement {
                sentence_id: format!("s{i:03}"),
                sentence: String::new(),
                predicted: BTreeSet::new(),
                gold: [format!("g{i}")].into_iter().collect(),
            })
            .collect();
        let a = sample_disagreements(&all, 20, 9);
        let b = sample_disagreements(&all, 20, 9);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert_ne!(a, sample_disagreements(&all, 20, 10));
        assert_eq!(sample_disagreements(&all[..5], 20, 9).len(), 5);
    }

    #[test]
    fn review_layout() {
        let d = Disagreement {
            sentence_id: "s1".into(),
            sentence: "Paris is in France".into(),
            predicted: ["Paris".to_string()].into_iter().collect(),
            gold: ["France".to_string(), "Paris".to_string()].into_iter().collect(),
        };
        assert_eq!(
            render_review(&[d]),
            "[1] s1\nParis is in France\nList A:\n  - Paris\nList B:\n  - France\n  - Paris\n\n"
        );
    }
}
