//! Component ablation: the same pipeline with subsets of the four prompt
//! switches turned off, ranked per dataset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::records::write_file;
use super::{build_backend, load_inputs, run_experiment_with, HarnessError, ResultRow, RunConfig};
use crate::backend::CompletionBackend;
use crate::corpus::Corpus;
use crate::promptgen::{DefinitionDoc, Flags};

const fn flags(def: bool, fs: bool, cot: bool, cand: bool) -> Flags {
    Flags { def, fs, cot, cand }
}

/// Configurations compared in the sweep, in table order: everything on, each
/// of cand, cot, fs and def off alone, then def+cand off (plain chain of
/// thought) and def+cot+cand off (plain few-shot).
pub const ABLATION_ROWS: [Flags; 7] = [
    flags(true, true, true, true),
    flags(true, true, true, false),
    flags(true, true, false, true),
    flags(true, false, true, true),
    flags(false, true, true, true),
    flags(false, true, true, false),
    flags(false, true, false, false),
];

/// Ranks of `values`, 1 for the largest; tied values share the mean of the
/// ranks they span.
pub fn rank_descending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Mean rank of each row across columns, for `scores[row][column]`.
pub fn average_ranks(scores: &[Vec<f64>]) -> Vec<f64> {
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    assert!(scores.iter().all(|r| r.len() == cols), "ragged score matrix");
    if cols == 0 {
        return vec![0.0; rows];
    }
    let mut sums = vec![0.0; rows];
    for c in 0..cols {
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        for (s, r) in sums.iter_mut().zip(rank_descending(&column)) {
            *s += r;
        }
    }
    sums.into_iter().map(|s| s / cols as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationMatrix {
    pub datasets: Vec<String>,
    pub flags: Vec<Flags>,
    /// Mean F1 (0-100) per `[row][dataset]`.
    pub scores: Vec<Vec<f64>>,
    pub avg_rank: Vec<f64>,
    /// Full results, row-major; empty when built from bare scores.
    pub results: Vec<ResultRow>,
}

impl AblationMatrix {
    pub fn from_scores(datasets: Vec<String>, flags: Vec<Flags>, scores: Vec<Vec<f64>>) -> Self {
        assert_eq!(flags.len(), scores.len(), "one score row per flag row");
        let avg_rank = average_ranks(&scores);
        Self {
            datasets,
            flags,
            scores,
            avg_rank,
            results: Vec::new(),
        }
    }

    pub fn avg_rank_of(&self, f: Flags) -> Option<f64> {
        self.flags.iter().position(|&x| x == f).map(|i| self.avg_rank[i])
    }

    /// Plain-text table: one row per configuration, one column per dataset,
    /// followed by the average rank.
    pub fn render_table(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { "✗" };
        let widths: Vec<usize> = self.datasets.iter().map(|d| d.chars().count().max(6)).collect();
        let mut out = String::from("Def  FS   CoT  Cand |");
        for (d, w) in self.datasets.iter().zip(&widths) {
            let _ = write!(out, " {d:>w$}");
        }
        out.push_str(" | Avg Rank\n");
        for (i, f) in self.flags.iter().enumerate() {
            let _ = write!(
                out,
                "{:<4} {:<4} {:<4} {:<4} |",
                mark(f.def),
                mark(f.fs),
                mark(f.cot),
                mark(f.cand)
            );
            for (s, w) in self.scores[i].iter().zip(&widths) {
                let _ = write!(out, " {:>w$}", format!("{s:.2}"));
            }
            let _ = writeln!(out, " | {:.2}", self.avg_rank[i]);
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), HarnessError> {
        let json_path = dir.join(format!("{stem}.json"));
        let table_path = dir.join(format!("{stem}.txt"));
        let mut json =
            serde_json::to_vec_pretty(self).map_err(|e| HarnessError::Json(e.to_string()))?;
        json.push(b'\n');
        write_file(&json_path, &json)?;
        write_file(&table_path, self.render_table().as_bytes())?;
        Ok((json_path, table_path))
    }
}

/// Runs every row of [`ABLATION_ROWS`] on every `(manifest, definition)`
/// pair, starting from `base` for all other settings.
pub fn run_ablation(
    base: &RunConfig,
    datasets: &[(PathBuf, PathBuf)],
) -> Result<AblationMatrix, HarnessError> {
    run_ablation_with(base, datasets, build_backend)
}

/// [`run_ablation`] with the provider for each cell built by `backend`.
pub fn run_ablation_with<F>(
    base: &RunConfig,
    datasets: &[(PathBuf, PathBuf)],
    backend: F,
) -> Result<AblationMatrix, HarnessError>
where
    F: Fn(&RunConfig, &Corpus, &DefinitionDoc) -> Result<Box<dyn CompletionBackend>, HarnessError>,
{
    if datasets.is_empty() {
        return Err(HarnessError::Config("the ablation needs at least one dataset".into()));
    }
    let mut names = Vec::with_capacity(datasets.len());
    let mut grid: Vec<Vec<Option<ResultRow>>> = vec![vec![None; datasets.len()]; ABLATION_ROWS.len()];
    for (c, (manifest, definition)) in datasets.iter().enumerate() {
        for (r, f) in ABLATION_ROWS.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.manifest = manifest.clone();
            cfg.definition = definition.clone();
            cfg.prompt.def = f.def;
            cfg.prompt.fs = f.fs;
            cfg.prompt.cot = f.cot;
            cfg.prompt.cand = f.cand;
            let (corpus, def_doc) = load_inputs(&cfg)?;
            let b = backend(&cfg, &corpus, &def_doc)?;
            let row = run_experiment_with(&cfg, &corpus, &def_doc, b.as_ref())?;
            if r == 0 {
                names.push(row.dataset.clone());
            }
            grid[r][c] = Some(row);
        }
    }
    let results: Vec<ResultRow> = grid.into_iter().flatten().map(|r| r.expect("filled")).collect();
    let scores: Vec<Vec<f64>> = results
        .chunks(datasets.len())
        .map(|row| row.iter().map(|r| r.aggregate.mean).collect())
        .collect();
    let mut matrix = AblationMatrix::from_scores(names, ABLATION_ROWS.to_vec(), scores);
    matrix.results = results;

    let mut h = Sha256::new();
    for r in &matrix.results {
        h.update(r.config_fingerprint.as_bytes());
    }
    let stem = format!("ablation-{}", &hex::encode(h.finalize())[..12]);
    matrix.write(&base.output_dir, &stem)?;
    Ok(matrix)
}
