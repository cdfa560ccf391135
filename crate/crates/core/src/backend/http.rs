//! Remote chat-completion provider.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult, ProviderKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub path: String,
    /// Header carrying the credential.
    pub auth_header: String,
    /// Prepended to the credential in the auth header, e.g. `"Bearer "`.
    pub auth_prefix: String,
    /// Environment variable holding the credential.
    pub credential_env: String,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com".into(),
            path: "/v1/chat/completions".into(),
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            credential_env: "OPENAI_API_KEY".into(),
            max_attempts: 5,
            backoff_base_ms: 1000,
            backoff_cap_ms: 30_000,
            timeout_secs: 120,
        }
    }
}

impl RemoteConfig {
    pub fn url(&self) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            self.path.trim_start_matches('/')
        )
    }

    /// Delay before retry number `retry` (0-based): base * 2^retry, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.backoff_base_ms
                .saturating_mul(factor)
                .min(self.backoff_cap_ms),
        )
    }
}

/// One JSON object per remote call, appended to a log file.
pub struct RequestLog {
    file: Mutex<File>,
}

impl RequestLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Mutex::new(file),
        })
    }

    fn write(&self, entry: &Value) {
        let mut f = self.file.lock().unwrap();
        // logging is best-effort; a full disk should not fail the request
        let _ = writeln!(f, "{entry}");
    }
}

pub struct HttpBackend {
    config: RemoteConfig,
    credential: String,
    agent: ureq::Agent,
    log: Option<RequestLog>,
    requests: AtomicU64,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    /// Reads the credential from the configured environment variable.
    pub fn from_env(config: RemoteConfig) -> Result<Self, BackendError> {
        match std::env::var(&config.credential_env) {
            Ok(v) if !v.trim().is_empty() => Ok(Self::new(config, v)),
            _ => Err(BackendError::Auth(format!(
                "environment variable {} is not set",
                config.credential_env
            ))),
        }
    }

    pub fn new(config: RemoteConfig, credential: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Self {
            config,
            credential,
            agent,
            log: None,
            requests: AtomicU64::new(0),
        }
    }

    pub fn with_log(mut self, log: RequestLog) -> Self {
        self.log = Some(log);
        self
    }

    /// HTTP requests issued so far, retries included.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    fn body(req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": req.model_id,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        if !req.stop_sequences.is_empty() {
            body["stop"] = json!(req.stop_sequences);
        }
        body
    }

    fn attempt(&self, url: &str, body: &Value) -> (Option<u16>, Attempt) {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let auth = format!("{}{}", self.config.auth_prefix, self.credential);
        let resp = self
            .agent
            .post(url)
            .header(self.config.auth_header.as_str(), auth.as_str())
            .send_json(body);
        let mut resp = match resp {
            Ok(r) => r,
            Err(e) => return (None, Attempt::Retry(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        let outcome = match status {
            200..=299 => match extract_text(&text) {
                Some(t) => Attempt::Done(t),
                None => Attempt::Fatal(BackendError::Transport(format!(
                    "response has no completion text: {}",
                    truncate(&text, 200)
                ))),
            },
            401 | 403 => Attempt::Fatal(BackendError::Auth(format!(
                "HTTP {status}: {}",
                truncate(&text, 200)
            ))),
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(BackendError::Transport(format!(
                "HTTP {status}: {}",
                truncate(&text, 200)
            ))),
        };
        (Some(status), outcome)
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Pulls the completion out of a chat (`choices[0].message.content`) or plain
/// completion (`choices[0].text`) response body.
fn extract_text(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    let choice = v.get("choices")?.get(0)?;
    choice
        .get("message")
        .and_then(|m| m.get("content"))
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        req.validate()?;
        let url = self.config.url();
        let body = Self::body(req);
        let started = Instant::now();
        let attempts_allowed = self.config.max_attempts.max(1);
        let mut backoffs: Vec<u64> = Vec::new();
        let mut statuses: Vec<Option<u16>> = Vec::new();

        let result = loop {
            let (status, outcome) = self.attempt(&url, &body);
            statuses.push(status);
            match outcome {
                Attempt::Done(text) => break Ok(text),
                Attempt::Fatal(e) => break Err(e),
                Attempt::Retry(reason) => {
                    let made = statuses.len() as u32;
                    if made >= attempts_allowed {
                        break Err(if status == Some(429) {
                            BackendError::RateLimited { attempts: made }
                        } else {
                            BackendError::Transport(format!(
                                "{reason} after {made} attempts"
                            ))
                        });
                    }
                    let delay = self.config.backoff(made - 1);
                    backoffs.push(delay.as_millis() as u64);
                    std::thread::sleep(delay);
                }
            }
        };

        let latency_ms = started.elapsed().as_millis() as u64;
        if let Some(log) = &self.log {
            log.write(&json!({
                "cache_key": req.cache_key(),
                "model_id": req.model_id,
                "attempts": statuses.len(),
                "retries": statuses.len() - 1,
                "backoff_ms": backoffs,
                "statuses": statuses,
                "outcome": match &result {
                    Ok(_) => "ok".to_string(),
                    Err(e) => e.to_string(),
                },
                "latency_ms": latency_ms,
            }));
        }
        result.map(|text| CompletionResult {
            text,
            provider: ProviderKind::Remote,
            latency_ms,
            cache_hit: false,
        })
    }

    fn kind(&self) -> ProviderKind {
        ProviderKind::Remote
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_schedule_doubles_and_caps() {
        let c = RemoteConfig {
            backoff_base_ms: 100,
            backoff_cap_ms: 1000,
            ..Default::default()
        };
        let got: Vec<u64> = (0..6).map(|i| c.backoff(i).as_millis() as u64).collect();
        assert_eq!(got, vec![100, 200, 400, 800, 1000, 1000]);
        assert_eq!(c.backoff(200).as_millis(), 1000);
    }

    #[test]
    fn url_joins_cleanly() {
        let c = RemoteConfig {
            base_url: "http://h:1/".into(),
            path: "/v1/x".into(),
            ..Default::default()
        };
        assert_eq!(c.url(), "http://h:1/v1/x");
    }

    #[test]
    fn extracts_chat_and_completion_shapes() {
        assert_eq!(
            extract_text(r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#),
            Some("hi".into())
        );
        assert_eq!(extract_text(r#"{"choices":[{"text":"yo"}]}"#), Some("yo".into()));
        assert_eq!(extract_text(r#"{"choices":[]}"#), None);
        assert_eq!(extract_text("not json"), None);
    }

    #[test]
    fn missing_credential_is_auth_error() {
        let c = RemoteConfig {
            credential_env: "DEFNER_TEST_SURELY_UNSET_VAR".into(),
            ..Default::default()
        };
        assert!(matches!(HttpBackend::from_env(c), Err(BackendError::Auth(_))));
    }
}
