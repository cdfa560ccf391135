//! Experiment driver: sampling, prompting, completion, scoring and
//! persistence for one configuration, plus the ablation sweep.

mod ablation;
mod config;
mod records;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use ablation::{
    average_ranks, rank_descending, run_ablation, run_ablation_with, AblationMatrix, ABLATION_ROWS,
};
pub use config::{default_k_for, BackendConfig, BackendKind, PromptSection, RunConfig};
pub use records::{
    run_file_name, summary_file_name, summary_path_for_run, Counters, ExampleRecord,
    ExperimentSummary, RunFile, RunHeader, RunLine, RunSummary,
};

use crate::align::ground;
use crate::backend::{
    complete_batch, BackendError, CachedBackend, CompletionBackend, CompletionRequest,
    CompletionResult, HttpBackend, MockBackend, ReplayBackend, RequestLog, ResponseCache,
};
use crate::corpus::{self, Corpus, CorpusError, LabeledExample};
use crate::eval::{self, AggregateReport, EvalError, EvalReport};
use crate::parse::{extract_predictions, parse_completion, Extraction};
use crate::promptgen::{
    render_exemplar_answer, render_prompt, DefinitionDoc, Flags, PromptConfig, PromptError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed record: {0}")]
    Json(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures of the completion provider, as opposed to bad input.
    pub fn is_backend(&self) -> bool {
        matches!(self, Self::Backend(_))
    }
}

/// Outcome of one configuration on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_fingerprint: String,
    pub dataset: String,
    pub flags: Flags,
    pub aggregate: AggregateReport,
    pub counters: Counters,
    pub summary_path: PathBuf,
    pub run_files: Vec<PathBuf>,
    pub cache_hits: usize,
    pub requests: usize,
    pub wall_time_ms: u64,
}

impl ResultRow {
    /// `MM.MM ± SS.SS` on a 0-100 scale.
    pub fn formatted(&self) -> String {
        self.aggregate.formatted()
    }
}

/// Exemplars and evaluation sentences for one run.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub run: usize,
    pub seed: u64,
    pub exemplars: Vec<LabeledExample>,
    pub eval: Vec<LabeledExample>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<(Corpus, DefinitionDoc), HarnessError> {
    let corpus = corpus::load_manifest(&cfg.manifest)?;
    let def_doc = DefinitionDoc::from_path(&cfg.definition)?;
    let unknown = def_doc.unknown_labels(&corpus.type_inventory);
    if !unknown.is_empty() {
        return Err(HarnessError::Config(format!(
            "definition lists types outside the {} inventory: {}",
            corpus.name,
            unknown.join(", ")
        )));
    }
    Ok((corpus, def_doc))
}

/// Draws exemplars and evaluation sentences for every seed.
///
/// By default each seed draws its own exemplars and then an evaluation sample
/// disjoint from them. With `fix_eval_sample` the evaluation sample is drawn
/// once from the first seed and exemplars come from the remaining sentences.
pub fn plan_runs(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<RunPlan>, HarnessError> {
    let pcfg = cfg.prompt_config(&corpus.name);
    let k = pcfg.effective_k();
    let fixed = if cfg.fix_eval_sample {
        Some(corpus::sample_eval(corpus, cfg.n_eval, cfg.seeds[0], &[])?)
    } else {
        None
    };
    let mut plans = Vec::with_capacity(cfg.seeds.len());
    for (run, &seed) in cfg.seeds.iter().enumerate() {
        let (exemplars, eval) = match &fixed {
            Some(eval) => {
                let ex = if k > 0 {
                    corpus::sample_exemplars(&corpus.without(eval), k, seed)?
                } else {
                    Vec::new()
                };
                (ex, eval.clone())
            }
            None => {
                let ex = if k > 0 {
                    corpus::sample_exemplars(corpus, k, seed)?
                } else {
                    Vec::new()
                };
                let eval = corpus::sample_eval(corpus, cfg.n_eval, seed, &ex)?;
                (ex, eval)
            }
        };
        plans.push(RunPlan {
            run,
            seed,
            exemplars,
            eval,
        });
    }
    Ok(plans)
}

fn request_for(cfg: &BackendConfig, prompt: String) -> CompletionRequest {
    CompletionRequest {
        prompt,
        model_id: cfg.model_id.clone(),
        temperature: cfg.temperature,
        max_output_tokens: cfg.max_output_tokens,
        stop_sequences: cfg.stop_sequences.clone(),
    }
}

/// Rendered prompts for one run, in evaluation order.
pub fn build_requests(
    cfg: &RunConfig,
    pcfg: &PromptConfig,
    def_doc: &DefinitionDoc,
    plan: &RunPlan,
) -> Result<Vec<CompletionRequest>, HarnessError> {
    plan.eval
        .iter()
        .map(|q| {
            let p = render_prompt(pcfg, def_doc, &plan.exemplars, q)?;
            let req = request_for(&cfg.backend, p.text);
            req.validate()?;
            Ok(req)
        })
        .collect()
}

/// First prompt the configuration would send, without contacting a provider.
pub fn dry_run(cfg: &RunConfig) -> Result<String, HarnessError> {
    let (corpus, def_doc) = load_inputs(cfg)?;
    let pcfg = cfg.prompt_config(&corpus.name);
    let plans = plan_runs(cfg, &corpus)?;
    let reqs = build_requests(cfg, &pcfg, &def_doc, &plans[0])?;
    Ok(reqs.into_iter().next().map(|r| r.prompt).unwrap_or_default())
}

/// Mock provider that answers each sentence of `corpus` with its own gold
/// annotation, written in the demonstration format.
pub fn echo_gold_backend(corpus: &Corpus, pcfg: &PromptConfig, def_doc: &DefinitionDoc) -> MockBackend {
    corpus.examples.iter().fold(MockBackend::new(), |m, ex| {
        m.respond_to_tokens(&ex.token_texts(), render_exemplar_answer(ex, pcfg, def_doc))
    })
}

/// Provider described by the backend section of `cfg`. Remote calls write
/// through to the cache when one is configured.
pub fn build_backend(
    cfg: &RunConfig,
    corpus: &Corpus,
    def_doc: &DefinitionDoc,
) -> Result<Box<dyn CompletionBackend>, HarnessError> {
    let b = &cfg.backend;
    match b.kind {
        BackendKind::Replay => {
            let path = b.cache.as_ref().ok_or_else(|| {
                HarnessError::Config("the replay backend needs backend.cache".into())
            })?;
            if !path.is_file() {
                return Err(HarnessError::Config(format!(
                    "replay cache {} does not exist",
                    path.display()
                )));
            }
            let cache = Arc::new(ResponseCache::open_existing(path)?);
            Ok(Box::new(ReplayBackend::new(cache)))
        }
        BackendKind::Remote => {
            let mut http = HttpBackend::from_env(b.remote.clone())?;
            if let Some(log) = &b.log {
                http = http.with_log(RequestLog::open(log).map_err(|e| HarnessError::io(log, e))?);
            }
            Ok(match &b.cache {
                Some(p) => Box::new(CachedBackend::new(http, Arc::new(ResponseCache::open(p)?))),
                None => Box::new(http),
            })
        }
        // never writes to the configured cache
        BackendKind::Mock => {
            let pcfg = cfg.prompt_config(&corpus.name);
            Ok(Box::new(echo_gold_backend(corpus, &pcfg, def_doc)))
        }
    }
}

/// Loads inputs, builds the configured provider and runs every seed.
pub fn run_experiment(cfg: &RunConfig) -> Result<ResultRow, HarnessError> {
    let (corpus, def_doc) = load_inputs(cfg)?;
    let backend = build_backend(cfg, &corpus, &def_doc)?;
    run_experiment_with(cfg, &corpus, &def_doc, backend.as_ref())
}

/// Parses, grounds and scores one completion.
pub fn score_example(
    index: usize,
    ex: &LabeledExample,
    inventory: &[String],
    req: &CompletionRequest,
    result: &CompletionResult,
) -> ExampleRecord {
    let (parse, extraction) = match parse_completion(&result.text) {
        Ok(report) => {
            let extraction = extract_predictions(&report, inventory);
            (Some(report), extraction)
        }
        Err(_) => (None, Extraction::default()),
    };
    let grounding = ground(&extraction.predictions, &ex.tokens);
    let mut per_type = Default::default();
    let counts = eval::match_example(&grounding.spans(), &ex.gold, &mut per_type);
    ExampleRecord {
        index,
        source_id: ex.source_id.clone(),
        tokens: ex.tokens.iter().map(|t| t.text.clone()).collect(),
        gold: ex.gold.clone(),
        prompt_sha256: hex::encode(Sha256::digest(req.prompt.as_bytes())),
        cache_key: req.cache_key(),
        completion: result.text.clone(),
        cache_hit: result.cache_hit,
        empty_parse: parse.is_none(),
        parse,
        extraction,
        grounding,
        counts,
    }
}

/// Runs every seed of `cfg` against an explicit provider.
///
/// Any provider failure aborts the experiment; completions obtained before
/// the failure stay in the cache when the provider writes through one.
pub fn run_experiment_with(
    cfg: &RunConfig,
    corpus: &Corpus,
    def_doc: &DefinitionDoc,
    backend: &dyn CompletionBackend,
) -> Result<ResultRow, HarnessError> {
    let started = Instant::now();
    let pcfg = cfg.prompt_config(&corpus.name);
    let fp = cfg.fingerprint(&corpus.name);
    let plans = plan_runs(cfg, corpus)?;

    let mut runs = Vec::with_capacity(plans.len());
    let mut run_files = Vec::with_capacity(plans.len());
    let mut totals = Counters::default();
    let mut cache_hits = 0;
    let mut requests = 0;
    for plan in &plans {
        let reqs = build_requests(cfg, &pcfg, def_doc, plan)?;
        let results = complete_batch(backend, &reqs, cfg.backend.max_in_flight);
        requests += reqs.len();
        let mut examples = Vec::with_capacity(reqs.len());
        for (i, ((ex, req), res)) in plan.eval.iter().zip(&reqs).zip(results).enumerate() {
            let res = res?;
            cache_hits += usize::from(res.cache_hit);
            examples.push(score_example(i, ex, &corpus.type_inventory, req, &res));
        }
        let file = RunFile {
            header: RunHeader {
                config_fingerprint: fp.clone(),
                dataset: corpus.name.clone(),
                run: plan.run,
                seed: plan.seed,
                prompt: pcfg.clone(),
                model_id: cfg.backend.model_id.clone(),
                exemplar_ids: plan.exemplars.iter().map(|e| e.source_id.clone()).collect(),
                eval_ids: plan.eval.iter().map(|e| e.source_id.clone()).collect(),
            },
            examples,
        };
        let name = run_file_name(&corpus.name, &fp, plan.run);
        let path = cfg.output_dir.join(&name);
        file.write(&path)?;
        let counters = file.counters();
        totals.add(&counters);
        runs.push(RunSummary {
            run: plan.run,
            seed: plan.seed,
            run_file: name,
            report: file.rescore(),
            counters,
        });
        run_files.push(path);
    }

    let f1s: Vec<f64> = runs.iter().map(|r| r.report.f1 * 100.0).collect();
    let aggregate = eval::aggregate(&f1s)?;
    let summary = ExperimentSummary {
        config_fingerprint: fp.clone(),
        dataset: corpus.name.clone(),
        model_id: cfg.backend.model_id.clone(),
        prompt: pcfg.clone(),
        n_eval: cfg.n_eval,
        seeds: cfg.seeds.clone(),
        f1: aggregate.formatted(),
        aggregate: aggregate.clone(),
        runs,
        counters: totals,
    };
    let summary_path = cfg.output_dir.join(summary_file_name(&corpus.name, &fp));
    summary.write(&summary_path)?;

    Ok(ResultRow {
        config_fingerprint: fp,
        dataset: corpus.name.clone(),
        flags: pcfg.flags(),
        aggregate,
        counters: totals,
        summary_path,
        run_files,
        cache_hits,
        requests,
        wall_time_ms: started.elapsed().as_millis() as u64,
    })
}

/// Recomputes the report of a saved run from its stored spans.
pub fn rescore_file(path: &Path) -> Result<(RunHeader, EvalReport), HarnessError> {
    let f = RunFile::read(path)?;
    let report = f.rescore();
    Ok((f.header, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntitySpan;

    fn corpus() -> Corpus {
        let sents: Vec<(&str, Vec<EntitySpan>)> = vec![
            ("Alice flew to Paris .", vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(3, 4, "LOC")]),
            ("Bob met Carol in Rome .", vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(2, 3, "PER"), EntitySpan::new(4, 5, "LOC")]),
            ("It rained all day .", vec![]),
            ("Dana lives in Oslo .", vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(3, 4, "LOC")]),
            ("Evan visited Lima .", vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(2, 3, "LOC")]),
            ("The soup was cold .", vec![]),
        ];
        let examples = sents
            .into_iter()
            .enumerate()
            .map(|(i, (s, g))| {
                let toks: Vec<&str> = s.split(' ').collect();
                LabeledExample::new(format!("s{i}"), &toks, g).unwrap()
            })
            .collect();
        Corpus::new("toy", vec!["PER".into(), "LOC".into()], examples).unwrap()
    }

    fn def_doc() -> DefinitionDoc {
        DefinitionDoc::parse("---\nPER: a person\nLOC: a place\n---\nNames of people and places.\n")
            .unwrap()
    }

    fn cfg(dir: &Path) -> RunConfig {
        let mut c = RunConfig::from_toml(
            r#"
manifest = "m.toml"
definition = "d.txt"
n_eval = 3
n_runs = 2
[prompt]
k = 2
[backend]
kind = "mock"
model_id = "m"
"#,
        )
        .unwrap();
        c.output_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn echo_backend_scores_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path());
        let corpus = corpus();
        let d = def_doc();
        let mock = echo_gold_backend(&corpus, &c.prompt_config("toy"), &d);
        let row = run_experiment_with(&c, &corpus, &d, &mock).unwrap();
        assert_eq!(row.aggregate.run_f1s, vec![100.0, 100.0]);
        assert_eq!(row.formatted(), "100.00 ± 0.00");
        assert_eq!(row.requests, 6);
        assert_eq!(row.run_files.len(), 2);
        let summary = ExperimentSummary::read(&row.summary_path).unwrap();
        assert_eq!(summary.f1, "100.00 ± 0.00");
        let (h, rep) = rescore_file(&row.run_files[1]).unwrap();
        assert_eq!(h.run, 1);
        assert_eq!(rep.f1, 1.0);
    }

    #[test]
    fn plans_keep_exemplars_out_of_eval() {
        let c = cfg(Path::new("unused"));
        let corpus = corpus();
        for plan in plan_runs(&c, &corpus).unwrap() {
            assert_eq!(plan.exemplars.len(), 2);
            assert_eq!(plan.eval.len(), 3);
            for e in &plan.eval {
                assert!(plan.exemplars.iter().all(|x| x.source_id != e.source_id));
            }
        }
        let mut fixed = c.clone();
        fixed.fix_eval_sample = true;
        let plans = plan_runs(&fixed, &corpus).unwrap();
        assert_eq!(plans[0].eval, plans[1].eval);
    }

    #[test]
    fn provider_failure_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path());
        let corpus = corpus();
        let mock = MockBackend::new();
        let err = run_experiment_with(&c, &corpus, &def_doc(), &mock).unwrap_err();
        assert!(err.is_backend());
    }

    #[test]
    fn unparseable_completion_counts_as_no_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path());
        let corpus = corpus();
        let mock = MockBackend::new().with_default("I cannot help with that.");
        let row = run_experiment_with(&c, &corpus, &def_doc(), &mock).unwrap();
        assert_eq!(row.counters.empty_parses, 6);
        assert_eq!(row.aggregate.mean, 0.0);
    }
}
