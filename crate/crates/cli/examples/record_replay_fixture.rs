//! Regenerates `fixtures/conll/replay.cache`.
//!
//! Completions come from a scripted provider that imitates typical model
//! output: mostly well-formed answers, with some misses, loose formatting,
//! chatter around the list, wrong types, spurious entities and one refusal.
//! Rerun whenever the prompt template changes, since cache keys hash the
//! rendered prompt.

use std::path::PathBuf;
use std::sync::Arc;

use defner_core::backend::{CachedBackend, MockBackend, ResponseCache};
use defner_core::harness::{self, RunConfig};
use defner_core::promptgen::{render_exemplar_answer, PromptConfig};
use defner_core::{DefinitionDoc, LabeledExample};

fn variant(ex: &LabeledExample) -> usize {
    ex.source_id
        .rsplit(':')
        .next()
        .and_then(|n| n.parse().ok())
        .unwrap_or(0)
}

fn noisy_answer(ex: &LabeledExample, cfg: &PromptConfig, def: &DefinitionDoc, types: &[String]) -> String {
    let clean = render_exemplar_answer(ex, cfg, def);
    let lines: Vec<&str> = clean.lines().collect();
    let n = variant(ex);
    if n == 13 {
        return "I'm sorry, I can't determine the entities in this sentence.".into();
    }
    match n % 6 {
        1 => {
            // misses the last entity it found
            let keep = lines.iter().rposition(|l| l.contains("| True |"));
            lines
                .iter()
                .enumerate()
                .filter(|(i, _)| Some(*i) != keep)
                .map(|(_, l)| format!("{l}\n"))
                .collect()
        }
        2 => lines
            .iter()
            .map(|l| {
                let body = l.split_once(". ").map_or(*l, |(_, b)| b);
                format!("- {}\n", body.replacen("| True |", "| yes |", 1).replacen("| False |", "| no |", 1))
            })
            .collect(),
        3 => {
            let extra = ex
                .tokens
                .iter()
                .enumerate()
                .find(|(i, t)| {
                    t.text.len() >= 5
                        && t.text.chars().all(char::is_alphabetic)
                        && !ex.gold.iter().any(|g| g.start <= *i && *i < g.end)
                })
                .map(|(_, t)| t.text.clone());
            let mut out = clean.clone();
            if let Some(w) = extra {
                out.push_str(&format!("{}. {w} | True | is a location name (LOC)\n", lines.len() + 1));
            }
            out
        }
        4 => format!("Here are the candidates:\n{clean}\nLet me know if you need anything else.\n"),
        5 => {
            let mut swapped = false;
            lines
                .iter()
                .map(|l| {
                    if !swapped && l.contains("| True |") {
                        if let Some(open) = l.rfind('(') {
                            let cur = &l[open + 1..l.len() - 1];
                            if let Some(other) = types.iter().find(|t| t.as_str() != cur) {
                                swapped = true;
                                return format!("{}({other})\n", &l[..open]);
                            }
                        }
                    }
                    format!("{l}\n")
                })
                .collect()
        }
        _ => clean,
    }
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/conll")
        .canonicalize()
        .expect("fixture directory exists");
    let cfg = RunConfig::load(&root.join("run.toml")).expect("fixture config");
    let (corpus, def) = harness::load_inputs(&cfg).expect("fixture inputs");
    let pcfg = cfg.prompt_config(&corpus.name);
    let mock = corpus.examples.iter().fold(MockBackend::new(), |m, ex| {
        m.respond_to_tokens(&ex.token_texts(), noisy_answer(ex, &pcfg, &def, &corpus.type_inventory))
    });

    let cache_path = cfg.backend.cache.clone().expect("fixture names a cache");
    let _ = std::fs::remove_file(&cache_path);
    let _ = std::fs::remove_file(cache_path.with_extension("cache.idx"));
    let cache = Arc::new(ResponseCache::open(&cache_path).expect("cache opens"));
    let backend = CachedBackend::new(mock, cache.clone());

    let out = tempfile::tempdir().expect("temp dir");
    let mut run_cfg = cfg.clone();
    run_cfg.output_dir = out.path().to_path_buf();
    let row = harness::run_experiment_with(&run_cfg, &corpus, &def, &backend).expect("recording run");
    println!(
        "recorded {} completions into {}; F1 {}",
        cache.len(),
        cache_path.display(),
        row.formatted()
    );
}
