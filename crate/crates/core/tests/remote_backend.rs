use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use defner_core::backend::{
    complete_batch, BackendError, CachedBackend, CompletionBackend, CompletionRequest,
    HttpBackend, MockBackend, MockFailure, ProviderKind, RemoteConfig, ReplayBackend,
    RequestLog, ResponseCache,
};
use defner_core::promptgen::QUERY_TOKENS_MARKER;

struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Tiny HTTP server answering each request with the next scripted status.
/// After the script runs out it keeps answering 200.
struct Server {
    url: String,
    hits: Arc<AtomicUsize>,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0usize;
    let mut auth = None;
    let mut first = String::new();
    if reader.read_line(&mut first).ok()? == 0 {
        return None;
    }
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            match k.to_ascii_lowercase().as_str() {
                "content-length" => len = v.trim().parse().ok()?,
                "authorization" => auth = Some(v.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Seen {
        auth,
        body: serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null),
    })
}

fn serve(script: Vec<u16>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let Some(req) = read_request(&mut stream) else { continue };
            let n = h.fetch_add(1, Ordering::SeqCst);
            let status = script.get(n).copied().unwrap_or(200);
            let prompt = req.body["messages"][0]["content"].as_str().unwrap_or("").to_string();
            s.lock().unwrap().push(req);
            let body = if status == 200 {
                serde_json::json!({
                    "choices": [{"message": {"role": "assistant", "content": format!("echo:{}", prompt.len())}}]
                })
                .to_string()
            } else {
                r#"{"error":"scripted"}"#.to_string()
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    Server { url, hits, seen }
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: url.to_string(),
        max_attempts: 3,
        backoff_base_ms: 1,
        backoff_cap_ms: 4,
        timeout_secs: 10,
        ..Default::default()
    }
}

#[test]
fn success_sends_credential_and_parameters() {
    let srv = serve(vec![]);
    let backend = HttpBackend::new(config(&srv.url), "sk-test".into());
    let mut req = CompletionRequest::new("hello", "gpt-4");
    req.temperature = 0.5;
    let res = backend.complete(&req).unwrap();
    assert_eq!(res.text, "echo:5");
    assert_eq!(res.provider, ProviderKind::Remote);
    assert!(!res.cache_hit);
    let seen = srv.seen.lock().unwrap();
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen[0].body["model"], "gpt-4");
    assert_eq!(seen[0].body["temperature"], 0.5);
    assert_eq!(seen[0].body["max_tokens"], 512);
    assert_eq!(seen[0].body["stop"][0], "\n\n\n");
}

#[test]
fn second_call_is_served_from_cache() {
    let srv = serve(vec![]);
    let dir = tempfile::tempdir().unwrap();
    let cache = Arc::new(ResponseCache::open(dir.path().join("c.cache")).unwrap());
    let backend = CachedBackend::new(HttpBackend::new(config(&srv.url), "k".into()), cache.clone());
    let req = CompletionRequest::new("same prompt", "gpt-4");
    let first = backend.complete(&req).unwrap();
    let second = backend.complete(&req).unwrap();
    assert!(!first.cache_hit);
    assert!(second.cache_hit);
    assert_eq!(first.text, second.text);
    assert_eq!(srv.hits.load(Ordering::SeqCst), 1);
    assert_eq!(backend.inner().request_count(), 1);

    // a warm cache answers a fresh process without any HTTP traffic
    drop(backend);
    let reopened = Arc::new(ResponseCache::open_existing(dir.path().join("c.cache")).unwrap());
    let replay = ReplayBackend::new(reopened);
    assert_eq!(replay.complete(&req).unwrap().text, first.text);
    assert_eq!(srv.hits.load(Ordering::SeqCst), 1);
    let other = CompletionRequest::new("different prompt", "gpt-4");
    assert!(matches!(replay.complete(&other), Err(BackendError::CacheMiss(_))));
}

#[test]
fn rate_limits_retry_then_give_up() {
    let srv = serve(vec![429, 429, 429, 429]);
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("requests.jsonl");
    let backend = HttpBackend::new(config(&srv.url), "k".into())
        .with_log(RequestLog::open(&log_path).unwrap());
    let err = backend.complete(&CompletionRequest::new("p", "m")).unwrap_err();
    assert_eq!(err, BackendError::RateLimited { attempts: 3 });
    assert_eq!(srv.hits.load(Ordering::SeqCst), 3);

    let log = std::fs::read_to_string(&log_path).unwrap();
    let entry: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(entry["attempts"], 3);
    assert_eq!(entry["retries"], 2);
    assert_eq!(entry["statuses"], serde_json::json!([429, 429, 429]));
    assert_eq!(entry["backoff_ms"], serde_json::json!([1, 2]));
    assert_eq!(entry["model_id"], "m");
}

#[test]
fn transient_errors_recover() {
    let srv = serve(vec![503, 429]);
    let backend = HttpBackend::new(config(&srv.url), "k".into());
    let res = backend.complete(&CompletionRequest::new("abc", "m")).unwrap();
    assert_eq!(res.text, "echo:3");
    assert_eq!(backend.request_count(), 3);
}

#[test]
fn rejected_credential_is_not_retried() {
    let srv = serve(vec![401]);
    let backend = HttpBackend::new(config(&srv.url), "bad".into());
    let err = backend.complete(&CompletionRequest::new("p", "m")).unwrap_err();
    assert!(matches!(err, BackendError::Auth(_)), "{err:?}");
    assert_eq!(srv.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn client_errors_are_transport_failures() {
    let srv = serve(vec![400]);
    let backend = HttpBackend::new(config(&srv.url), "k".into());
    let err = backend.complete(&CompletionRequest::new("p", "m")).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)));
    assert_eq!(srv.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn unreachable_host_is_transport_failure() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let backend = HttpBackend::new(config(&url), "k".into());
    let err = backend.complete(&CompletionRequest::new("p", "m")).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)));
    assert_eq!(backend.request_count(), 3);
}

#[test]
fn invalid_requests_never_leave_the_process() {
    let srv = serve(vec![]);
    let backend = HttpBackend::new(config(&srv.url), "k".into());
    let mut req = CompletionRequest::new("p", "m");
    req.max_output_tokens = 10;
    assert!(matches!(backend.complete(&req), Err(BackendError::InvalidRequest(_))));
    req.max_output_tokens = 512;
    req.temperature = f64::NAN;
    assert!(matches!(backend.complete(&req), Err(BackendError::InvalidRequest(_))));
    std::thread::sleep(Duration::from_millis(20));
    assert_eq!(srv.hits.load(Ordering::SeqCst), 0);
}

fn query(tokens: &[&str]) -> CompletionRequest {
    let json = serde_json::to_string(tokens).unwrap();
    CompletionRequest::new(format!("Sentence: x\n{QUERY_TOKENS_MARKER}{json}\nAnswer:\n"), "m")
}

#[test]
fn batch_keeps_input_order_and_respects_bound() {
    let words: Vec<String> = (0..24).map(|i| format!("w{i}")).collect();
    let mock = words
        .iter()
        .fold(MockBackend::new(), |m, w| m.respond_to_tokens(&[w.as_str()], format!("reply {w}")))
        .with_delay(Duration::from_millis(5));
    let reqs: Vec<CompletionRequest> = words.iter().map(|w| query(&[w.as_str()])).collect();
    let out = complete_batch(&mock, &reqs, 4);
    for (w, r) in words.iter().zip(&out) {
        assert_eq!(r.as_ref().unwrap().text, format!("reply {w}"));
    }
    assert!(mock.peak_in_flight() <= 4);
    assert!(mock.peak_in_flight() >= 2);
    assert_eq!(mock.call_count(), 24);
}

#[test]
fn batch_reports_failures_per_item() {
    let mock = MockBackend::new()
        .respond_to_tokens(&["ok"], "fine")
        .fail_for_tokens(&["bad"], MockFailure::RateLimited)
        .fail_for_tokens(&["auth"], MockFailure::Auth);
    let reqs = vec![query(&["ok"]), query(&["bad"]), query(&["auth"]), query(&["ok"])];
    let out = complete_batch(&mock, &reqs, 3);
    assert_eq!(out[0].as_ref().unwrap().text, "fine");
    assert!(matches!(out[1], Err(BackendError::RateLimited { .. })));
    assert!(matches!(out[2], Err(BackendError::Auth(_))));
    assert_eq!(out[3].as_ref().unwrap().text, "fine");
}

#[test]
fn failed_completions_are_not_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Arc::new(ResponseCache::open(dir.path().join("c")).unwrap());
    let mock = MockBackend::new().fail_for_tokens(&["x"], MockFailure::Transport);
    let backend = CachedBackend::new(mock, cache.clone());
    assert!(backend.complete(&query(&["x"])).is_err());
    assert!(cache.is_empty());
}
