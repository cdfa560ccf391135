//! Command-line front end. `run_cli` holds all behaviour so tests can drive
//! it in-process; the binary only forwards `std::env::args_os`.

use std::collections::HashSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use defner_core::backend::{CacheKey, ResponseCache};
use defner_core::eval::{render_review, sample_disagreements};
use defner_core::harness::{
    self, run_ablation, summary_path_for_run, BackendKind, ExperimentSummary, HarnessError,
    RunConfig, RunFile,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "defner", version, about = "Definition-guided few-shot NER experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the provider named in the config.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    /// Print the first rendered prompt and exit.
    #[arg(long)]
    dry_run: bool,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one configuration over all its seeds.
    Run(RunArgs),
    /// Run the seven-row component ablation over one or more datasets.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// A dataset manifest and its definition file; repeat per dataset.
        #[arg(long, num_args = 2, value_names = ["MANIFEST", "DEFINITION"], required = true)]
        dataset: Vec<PathBuf>,
    },
    /// Recompute scores from saved run files.
    Score {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Export sentences where predicted and gold entity sets differ.
    Diff {
        file: PathBuf,
        /// Keep a random subset of this many sentences.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the neutral review sheet instead of JSONL.
        #[arg(long)]
        review: bool,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or prune a completion cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    /// Entry count and data size.
    Stats { path: PathBuf },
    /// One line per entry: key, model, prompt length.
    List { path: PathBuf },
    /// Drop entries not referenced by the given run files.
    Prune {
        path: PathBuf,
        #[arg(long = "keep", required = true)]
        keep: Vec<PathBuf>,
    },
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    s.parse()
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            code: if e.is_backend() { EXIT_BACKEND } else { EXIT_CONFIG },
            message: e.to_string(),
        }
    }
}

impl From<defner_core::BackendError> for Failure {
    fn from(e: defner_core::BackendError) -> Self {
        HarnessError::from(e).into()
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

/// Parses `args` (program name first) and executes the command, writing
/// normal output to `out` and diagnostics to `err`. Returns the exit status.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_CONFIG
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(kind) = args.backend {
        cfg.backend.kind = kind;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    config_failure(format!("{}: {e}", path.display()))
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    let w = |r: std::io::Result<()>| r.map_err(|e| config_failure(format!("writing output: {e}")));
    match cmd {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            if args.dry_run {
                return w(write!(out, "{}", harness::dry_run(&cfg)?));
            }
            let row = harness::run_experiment(&cfg)?;
            w(writeln!(
                out,
                "{} [{}] F1 {}  (skipped {}, repaired {}, unmatched {}, empty {})",
                row.dataset,
                row.config_fingerprint,
                row.formatted(),
                row.counters.skipped_lines,
                row.counters.repaired_lines,
                row.counters.unmatched,
                row.counters.empty_parses,
            ))?;
            w(writeln!(out, "summary: {}", row.summary_path.display()))
        }
        Command::Ablate { run, dataset } => {
            let cfg = load_config(&run)?;
            let pairs: Vec<(PathBuf, PathBuf)> = dataset
                .chunks(2)
                .map(|c| (c[0].clone(), c[1].clone()))
                .collect();
            if run.dry_run {
                let mut c = cfg.clone();
                c.manifest = pairs[0].0.clone();
                c.definition = pairs[0].1.clone();
                return w(write!(out, "{}", harness::dry_run(&c)?));
            }
            let matrix = run_ablation(&cfg, &pairs)?;
            w(write!(out, "{}", matrix.render_table()))
        }
        Command::Score { files, json } => {
            for f in files {
                let run = RunFile::read(&f)?;
                let report = run.rescore();
                if json {
                    let text = serde_json::to_string(&report)
                        .map_err(|e| config_failure(e.to_string()))?;
                    w(writeln!(out, "{text}"))?;
                    continue;
                }
                w(writeln!(
                    out,
                    "{}: run {} seed {}  P {:.4}  R {:.4}  F1 {:.4}  (tp {}, fp {}, fn {})",
                    f.display(),
                    run.header.run,
                    run.header.seed,
                    report.precision,
                    report.recall,
                    report.f1,
                    report.tp,
                    report.fp,
                    report.fn_
                ))?;
                if let Some(stored) = summary_path_for_run(&f)
                    .filter(|p| p.is_file())
                    .and_then(|p| ExperimentSummary::read(&p).ok())
                    .and_then(|s| s.runs.into_iter().find(|r| r.run == run.header.run))
                {
                    let verdict = if stored.report == report { "matches" } else { "DIFFERS from" };
                    w(writeln!(out, "  {verdict} the stored summary"))?;
                }
            }
            Ok(())
        }
        Command::Diff {
            file,
            sample,
            seed,
            review,
            out: dest,
        } => {
            let run = RunFile::read(&file)?;
            let mut items = run.disagreements();
            if let Some(n) = sample {
                items = sample_disagreements(&items, n, seed);
            }
            let text = if review {
                render_review(&items)
            } else {
                let mut s = String::new();
                for d in &items {
                    s.push_str(&serde_json::to_string(d).map_err(|e| config_failure(e.to_string()))?);
                    s.push('\n');
                }
                s
            };
            match dest {
                Some(p) => std::fs::write(&p, text).map_err(|e| io_failure(&p, e)),
                None => w(write!(out, "{text}")),
            }
        }
        Command::Cache { action } => cache_command(action, out),
    }
}

fn open_cache(path: &Path) -> Result<ResponseCache, Failure> {
    if !path.is_file() {
        return Err(config_failure(format!("{} does not exist", path.display())));
    }
    Ok(ResponseCache::open_existing(path)?)
}

fn cache_command(action: CacheAction, out: &mut dyn Write) -> Result<(), Failure> {
    let w = |r: std::io::Result<()>| r.map_err(|e| config_failure(format!("writing output: {e}")));
    match action {
        CacheAction::Stats { path } => {
            let s = open_cache(&path)?.stats();
            w(writeln!(out, "entries: {}\ndata bytes: {}", s.entries, s.data_bytes))
        }
        CacheAction::List { path } => {
            for rec in open_cache(&path)?.records()? {
                w(writeln!(
                    out,
                    "{}\t{}\t{} chars",
                    rec.key,
                    rec.model_id,
                    rec.prompt.chars().count()
                ))?;
            }
            Ok(())
        }
        CacheAction::Prune { path, keep } => {
            let cache = open_cache(&path)?;
            let mut keys: HashSet<CacheKey> = HashSet::new();
            for f in keep {
                keys.extend(RunFile::read(&f)?.examples.into_iter().map(|e| e.cache_key));
            }
            let removed = cache.prune(&keys)?;
            w(writeln!(out, "removed {removed}, kept {}", cache.len()))
        }
    }
}
