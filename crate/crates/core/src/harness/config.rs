//! Run configuration, loaded from TOML. Relative paths resolve against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::backend::{RemoteConfig, DEFAULT_STOP};
use crate::promptgen::PromptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Replay,
    /// Answers every query with its own gold annotation.
    Mock,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "remote" => Ok(Self::Remote),
            "replay" => Ok(Self::Replay),
            "mock" => Ok(Self::Mock),
            other => Err(format!("unknown backend {other:?} (expected remote, replay or mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    pub model_id: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_stop")]
    pub stop_sequences: Vec<String>,
    /// Completion cache; required for replay, optional write-through for the
    /// other providers.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Structured per-request log for remote calls.
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default)]
    pub remote: RemoteConfig,
}

fn default_max_output_tokens() -> u32 {
    512
}

fn default_stop() -> Vec<String> {
    vec![DEFAULT_STOP.to_string()]
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    #[serde(default = "yes")]
    pub def: bool,
    #[serde(default = "yes")]
    pub fs: bool,
    #[serde(default = "yes")]
    pub cot: bool,
    #[serde(default = "yes")]
    pub cand: bool,
    /// Exemplar count; defaults by dataset family when absent.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_max_candidates")]
    pub max_candidates: usize,
}

fn yes() -> bool {
    true
}

fn default_max_candidates() -> usize {
    20
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            def: true,
            fs: true,
            cot: true,
            cand: true,
            k: None,
            max_candidates: default_max_candidates(),
        }
    }
}

/// Exemplar count used when a config does not set one: 2 for the CrossNER
/// and FewNERD families, 5 otherwise.
pub fn default_k_for(dataset_name: &str) -> usize {
    let n = dataset_name.to_lowercase();
    if n.contains("crossner") || n.contains("fewnerd") {
        2
    } else {
        5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub definition: PathBuf,
    #[serde(default)]
    pub prompt: PromptSection,
    pub backend: BackendConfig,
    pub n_eval: usize,
    pub n_runs: usize,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Draw the evaluation sample once (with the first seed) and reuse it for
    /// every run instead of redrawing per seed.
    #[serde(default)]
    pub fix_eval_sample: bool,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.seeds.is_empty() {
            cfg.seeds = (1..=cfg.n_runs as u64).collect();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.definition);
        fix(&mut self.output_dir);
        if let Some(c) = self.backend.cache.as_mut() {
            fix(c);
        }
        if let Some(l) = self.backend.log.as_mut() {
            fix(l);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.n_runs == 0 {
            return bad("n_runs must be at least 1".into());
        }
        if self.n_eval == 0 {
            return bad("n_eval must be at least 1".into());
        }
        if self.seeds.len() != self.n_runs {
            return bad(format!(
                "{} seeds given for {} runs",
                self.seeds.len(),
                self.n_runs
            ));
        }
        if self.prompt.max_candidates == 0 {
            return bad("prompt.max_candidates must be positive".into());
        }
        if self.prompt.fs && self.prompt.k == Some(0) {
            return bad("prompt.k must be positive when few-shot examples are on".into());
        }
        if self.backend.max_in_flight == 0 {
            return bad("backend.max_in_flight must be positive".into());
        }
        if self.backend.kind == BackendKind::Replay && self.backend.cache.is_none() {
            return bad("the replay backend needs backend.cache".into());
        }
        Ok(())
    }

    pub fn prompt_config(&self, dataset_name: &str) -> PromptConfig {
        PromptConfig {
            def_on: self.prompt.def,
            fs_on: self.prompt.fs,
            cot_on: self.prompt.cot,
            cand_on: self.prompt.cand,
            k: self.prompt.k.unwrap_or_else(|| default_k_for(dataset_name)),
            max_candidates: self.prompt.max_candidates,
        }
    }

    /// Short hash of everything that determines the results of a run.
    /// Output location, transport details and concurrency are left out.
    pub fn fingerprint(&self, dataset_name: &str) -> String {
        let canonical = serde_json::json!({
            "dataset": dataset_name,
            "manifest": file_name(&self.manifest),
            "definition": file_name(&self.definition),
            "prompt": self.prompt_config(dataset_name),
            "model_id": self.backend.model_id,
            "temperature": self.backend.temperature,
            "max_output_tokens": self.backend.max_output_tokens,
            "stop_sequences": self.backend.stop_sequences,
            "n_eval": self.n_eval,
            "n_runs": self.n_runs,
            "seeds": self.seeds,
            "fix_eval_sample": self.fix_eval_sample,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        hex::encode(digest)[..12].to_string()
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
manifest = "data/m.toml"
definition = "defs/d.txt"
n_eval = 10
n_runs = 2

[backend]
kind = "replay"
model_id = "gpt-4"
cache = "cache/c.cache"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        assert!(c.prompt.def && c.prompt.fs && c.prompt.cot && c.prompt.cand);
        assert_eq!(c.backend.temperature, 0.0);
        assert_eq!(c.backend.stop_sequences, vec![DEFAULT_STOP.to_string()]);
        assert_eq!(c.prompt_config("conll").k, 5);
        assert_eq!(c.prompt_config("CrossNER-politics").k, 2);
        assert_eq!(c.prompt_config("fewnerd-intra").k, 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let seeds = MINIMAL.replace("n_runs = 2", "n_runs = 2\nseeds = [1]");
        assert!(RunConfig::from_toml(&seeds).is_err());
        let zero = MINIMAL.replace("n_eval = 10", "n_eval = 0");
        assert!(RunConfig::from_toml(&zero).is_err());
        let no_cache = MINIMAL.replace("cache = \"cache/c.cache\"", "");
        assert!(RunConfig::from_toml(&no_cache).is_err());
        let unknown = format!("{MINIMAL}\nbogus = 1\n");
        assert!(RunConfig::from_toml(&unknown).is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let mut c = RunConfig::from_toml(MINIMAL).unwrap();
        c.resolve_paths(Path::new("/x/y"));
        assert_eq!(c.manifest, PathBuf::from("/x/y/data/m.toml"));
        assert_eq!(c.backend.cache, Some(PathBuf::from("/x/y/cache/c.cache")));
        assert_eq!(c.output_dir, PathBuf::from("/x/y/runs"));
    }

    #[test]
    fn fingerprint_tracks_result_relevant_fields() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        b.backend.max_in_flight = 16;
        b.resolve_paths(Path::new("/tmp"));
        assert_eq!(a.fingerprint("d"), b.fingerprint("d"));
        let mut c = a.clone();
        c.prompt.cand = false;
        assert_ne!(a.fingerprint("d"), c.fingerprint("d"));
        assert_ne!(a.fingerprint("d"), a.fingerprint("e"));
    }
}
