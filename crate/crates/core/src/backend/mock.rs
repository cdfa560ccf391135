//! Scripted provider for tests and offline pipelines.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult, ProviderKind};
use crate::promptgen::query_tokens;

/// Identifies the query a prompt asks about: a hash of the embedded query
/// token list, or of the whole prompt when no token list is present.
pub fn query_fingerprint(prompt: &str) -> String {
    match query_tokens(prompt) {
        Some(tokens) => tokens_fingerprint(&tokens),
        None => hex::encode(Sha256::digest(prompt.as_bytes())),
    }
}

fn tokens_fingerprint<S: AsRef<str>>(tokens: &[S]) -> String {
    let list: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let json = serde_json::to_string(&list).expect("token list serializes");
    hex::encode(Sha256::digest(format!("tokens:{json}").as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockFailure {
    Auth,
    RateLimited,
    Transport,
}

impl MockFailure {
    fn error(self) -> BackendError {
        match self {
            MockFailure::Auth => BackendError::Auth("scripted credential rejection".into()),
            MockFailure::RateLimited => BackendError::RateLimited { attempts: 5 },
            MockFailure::Transport => BackendError::Transport("scripted transport failure".into()),
        }
    }
}

#[derive(Debug, Clone)]
enum Reply {
    Text(String),
    Fail(MockFailure),
}

#[derive(Default)]
pub struct MockBackend {
    script: HashMap<String, Reply>,
    default: Option<String>,
    delay: Duration,
    issued: Mutex<Vec<String>>,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Answer `text` to any prompt whose query has these tokens.
    pub fn respond_to_tokens<S: AsRef<str>>(mut self, tokens: &[S], text: impl Into<String>) -> Self {
        self.script
            .insert(tokens_fingerprint(tokens), Reply::Text(text.into()));
        self
    }

    /// Answer `text` to this exact prompt (or to its query, if it embeds one).
    pub fn respond_to_prompt(mut self, prompt: &str, text: impl Into<String>) -> Self {
        self.script
            .insert(query_fingerprint(prompt), Reply::Text(text.into()));
        self
    }

    pub fn fail_for_tokens<S: AsRef<str>>(mut self, tokens: &[S], failure: MockFailure) -> Self {
        self.script.insert(tokens_fingerprint(tokens), Reply::Fail(failure));
        self
    }

    /// Reply used for prompts that match no script entry.
    pub fn with_default(mut self, text: impl Into<String>) -> Self {
        self.default = Some(text.into());
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Fingerprints of the prompts received, in the order they arrived.
    pub fn issued(&self) -> Vec<String> {
        self.issued.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.issued.lock().unwrap().len()
    }

    /// Largest number of calls that were in progress at the same time.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        let fp = query_fingerprint(&req.prompt);
        self.issued.lock().unwrap().push(fp.clone());
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        let reply = match self.script.get(&fp) {
            Some(Reply::Text(t)) => Ok(t.clone()),
            Some(Reply::Fail(f)) => Err(f.error()),
            None => self
                .default
                .clone()
                .ok_or_else(|| BackendError::Transport("mock has no reply for this prompt".into())),
        };
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        reply.map(|text| CompletionResult {
            text,
            provider: ProviderKind::Mock,
            latency_ms: started.elapsed().as_millis() as u64,
            cache_hit: false,
        })
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Mock
    }
}
