//! Completion providers.
//!
//! Every provider implements [`CompletionBackend`]. The remote provider talks
//! to a chat-completion HTTP endpoint and is normally wrapped in a
//! [`CachedBackend`] so that each response is persisted before it is
//! returned; [`ReplayBackend`] serves only from that cache; [`MockBackend`]
//! answers from a script and is used by tests and dry pipelines.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheRecord, CacheStats, ResponseCache};
pub use http::{HttpBackend, RemoteConfig, RequestLog};
pub use mock::{query_fingerprint, MockBackend, MockFailure};

/// Smallest accepted output budget.
pub const MIN_OUTPUT_TOKENS: u32 = 64;

/// Two blank lines after the answer block end a completion.
pub const DEFAULT_STOP: &str = "\n\n\n";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("no cached completion for key {0}")]
    CacheMiss(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    /// Request with temperature 0, a 512-token budget and the default stop.
    pub fn new(prompt: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            model_id: model_id.into(),
            temperature: 0.0,
            max_output_tokens: 512,
            stop_sequences: vec![DEFAULT_STOP.to_string()],
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens < MIN_OUTPUT_TOKENS {
            return Err(BackendError::InvalidRequest(format!(
                "max_output_tokens must be at least {MIN_OUTPUT_TOKENS}, got {}",
                self.max_output_tokens
            )));
        }
        Ok(())
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey::of(self)
    }
}

/// SHA-256 over a length-prefixed encoding of every request field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn of(req: &CompletionRequest) -> Self {
        fn field(h: &mut Sha256, bytes: &[u8]) {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        let mut h = Sha256::new();
        field(&mut h, req.model_id.as_bytes());
        // +0.0 and -0.0 are the same temperature
        let temp = if req.temperature == 0.0 { 0.0f64 } else { req.temperature };
        field(&mut h, &temp.to_bits().to_le_bytes());
        field(&mut h, &req.max_output_tokens.to_le_bytes());
        field(&mut h, &(req.stop_sequences.len() as u64).to_le_bytes());
        for s in &req.stop_sequences {
            field(&mut h, s.as_bytes());
        }
        field(&mut h, req.prompt.as_bytes());
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Replay,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub provider: ProviderKind,
    pub latency_ms: u64,
    pub cache_hit: bool,
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError>;

    fn kind(&self) -> ProviderKind;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(req)
    }

    fn kind(&self) -> ProviderKind {
        (**self).kind()
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(req)
    }

    fn kind(&self) -> ProviderKind {
        (**self).kind()
    }
}

/// Write-through cache in front of another provider. Hits are answered from
/// the cache; misses go to the inner provider and are stored before the
/// result is returned.
pub struct CachedBackend<B> {
    inner: B,
    cache: Arc<ResponseCache>,
}

impl<B: CompletionBackend> CachedBackend<B> {
    pub fn new(inner: B, cache: Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: CompletionBackend> CompletionBackend for CachedBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let key = req.cache_key();
        if let Some(rec) = self.cache.get(&key)? {
            return Ok(CompletionResult {
                text: rec.completion,
                provider: self.inner.kind(),
                latency_ms: started.elapsed().as_millis() as u64,
                cache_hit: true,
            });
        }
        let result = self.inner.complete(req)?;
        self.cache.put(&CacheRecord::new(req, &result.text))?;
        Ok(result)
    }

    fn kind(&self) -> ProviderKind {
        self.inner.kind()
    }
}

/// Serves completions from a cache only; unseen requests are a
/// [`BackendError::CacheMiss`].
pub struct ReplayBackend {
    cache: Arc<ResponseCache>,
}

impl ReplayBackend {
    pub fn new(cache: Arc<ResponseCache>) -> Self {
        Self { cache }
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let started = Instant::now();
        let key = req.cache_key();
        match self.cache.get(&key)? {
            Some(rec) => Ok(CompletionResult {
                text: rec.completion,
                provider: ProviderKind::Replay,
                latency_ms: started.elapsed().as_millis() as u64,
                cache_hit: true,
            }),
            None => Err(BackendError::CacheMiss(key.0)),
        }
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Replay
    }
}

/// Completes every request with at most `max_in_flight` outstanding at once.
/// Results come back in input order; failures are reported per item.
pub fn complete_batch<B: CompletionBackend + ?Sized>(
    backend: &B,
    reqs: &[CompletionRequest],
    max_in_flight: usize,
) -> Vec<Result<CompletionResult, BackendError>> {
    let workers = max_in_flight.max(1).min(reqs.len());
    if workers <= 1 {
        return reqs.iter().map(|r| backend.complete(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CompletionResult, BackendError>>>> =
        Mutex::new(vec![None; reqs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= reqs.len() {
                    break;
                }
                let r = backend.complete(&reqs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}
