//! Cached, retrying, concurrency-capped access to a completion backend.

use std::fs;
use std::io::{self, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::{CompletionBackend, CompletionRequest, CompletionResponse};
use crate::error::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub token_logprobs: Option<Vec<(String, f64)>>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): `base * 2^(attempt-1)`, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// One file per key under `dir`, named by the hex SHA-256 of
/// `(backend id, prompt, want_logprobs)`. The first value persisted for a key
/// wins; later writers adopt it.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(backend_id: &str, prompt: &str, want_logprobs: bool) -> String {
        let mut h = Sha256::new();
        for part in [backend_id.as_bytes(), prompt.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update([want_logprobs as u8]);
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CompletionResponse> {
        let raw = fs::read_to_string(self.path(key)).ok()?;
        serde_json::from_str(&raw).ok()
    }

    /// Persists `value` unless the key already exists; returns whatever is
    /// stored afterwards.
    pub fn put(&self, key: &str, value: &CompletionResponse) -> io::Result<CompletionResponse> {
        let target = self.path(key);
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(serde_json::to_string(value)?.as_bytes())?;
            f.sync_all()?;
        }
        let linked = fs::hard_link(&tmp, &target);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(value.clone()),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                let raw = fs::read_to_string(&target)?;
                Ok(serde_json::from_str(&raw)?)
            }
            Err(e) => Err(e),
        }
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .filter(|e| e.file_name().to_string_lossy().ends_with(".json"))
                    .filter(|e| !e.file_name().to_string_lossy().starts_with('.'))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Limiter {
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            max_tokens: 1024,
            temperature: 0.0,
        }
    }
}

#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn CompletionBackend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    settings: GenerationSettings,
    limiter: Arc<Limiter>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn CompletionBackend>) -> Self {
        LlmClient {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            settings: GenerationSettings::default(),
            limiter: Arc::new(Limiter {
                cap: 8,
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
            }),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_settings(mut self, settings: GenerationSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.limiter = Arc::new(Limiter {
            cap: cap.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        });
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn complete(&self, prompt: &str, want_logprobs: bool) -> Result<CompletionResult, BackendError> {
        let max_tokens = if want_logprobs { 0 } else { self.settings.max_tokens };
        self.complete_with(prompt, want_logprobs, max_tokens)
    }

    fn complete_with(
        &self,
        prompt: &str,
        want_logprobs: bool,
        max_tokens: u32,
    ) -> Result<CompletionResult, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::Rejected("empty prompt".into()));
        }
        let key = ResponseCache::key(&self.backend.id(), prompt, want_logprobs);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(Self::result(hit, want_logprobs, true));
        }

        let request = CompletionRequest {
            prompt: prompt.to_string(),
            max_tokens,
            temperature: self.settings.temperature,
            want_logprobs,
        };
        let mut attempt = 0;
        let response = loop {
            attempt += 1;
            let outcome = {
                let _slot = self.limiter.acquire();
                self.backend.complete(&request)
            };
            match outcome {
                Ok(r) => break r,
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    log::debug!("retrying after attempt {attempt}: {e}");
                    thread::sleep(self.retry.delay(attempt));
                }
                Err(e) => return Err(e),
            }
        };
        if want_logprobs && response.logprobs.is_none() {
            return Err(BackendError::Rejected("backend returned no logprobs".into()));
        }
        let stored = match &self.cache {
            Some(cache) => cache
                .put(&key, &response)
                .map_err(|e| BackendError::Unavailable(format!("cache write failed: {e}")))?,
            None => response,
        };
        Ok(Self::result(stored, want_logprobs, false))
    }

    fn result(r: CompletionResponse, want_logprobs: bool, cache_hit: bool) -> CompletionResult {
        CompletionResult {
            text: r.text,
            token_logprobs: if want_logprobs { r.logprobs } else { None },
            cache_hit,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::backend::FnBackend;
    use std::sync::atomic::AtomicUsize;

    fn counting(calls: Arc<AtomicUsize>) -> Arc<dyn CompletionBackend> {
        Arc::new(FnBackend::new("count", move |r: &CompletionRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(CompletionResponse {
                text: format!("echo:{}", r.prompt),
                logprobs: r.want_logprobs.then(|| vec![("t".to_string(), -1.0)]),
            })
        }))
    }

    fn fast_retry(n: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts: n,
            base_delay_ms: 1,
            max_delay_ms: 4,
        }
    }

    #[test]
    fn second_call_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let client = LlmClient::new(counting(calls.clone()))
            .with_cache(ResponseCache::new(dir.path()).unwrap());
        let a = client.complete("hello", false).unwrap();
        let b = client.complete("hello", false).unwrap();
        assert!(!a.cache_hit);
        assert!(b.cache_hit);
        assert_eq!(a.text, b.text);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert!(a.token_logprobs.is_none());

        let c = client.complete("hello", true).unwrap();
        assert!(!c.cache_hit);
        assert_eq!(c.token_logprobs.unwrap().len(), 1);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn retries_then_gives_up() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let down = Arc::new(FnBackend::new("down", move |_: &CompletionRequest| {
            c2.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Unavailable("connection refused".into()))
        }));
        let client = LlmClient::new(down).with_retry(fast_retry(3));
        let err = client.complete("p", false).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable(_)));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn rejection_is_not_retried() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let rejecting = Arc::new(FnBackend::new("rej", move |_: &CompletionRequest| {
            c2.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Rejected("no".into()))
        }));
        let client = LlmClient::new(rejecting).with_retry(fast_retry(5));
        assert!(matches!(client.complete("p", false), Err(BackendError::Rejected(_))));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transient_failure_recovers() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let flaky = Arc::new(FnBackend::new("flaky", move |_: &CompletionRequest| {
            if c2.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(BackendError::Unavailable("later".into()))
            } else {
                Ok(CompletionResponse {
                    text: "ok".into(),
                    logprobs: None,
                })
            }
        }));
        let client = LlmClient::new(flaky).with_retry(fast_retry(4));
        assert_eq!(client.complete("p", false).unwrap().text, "ok");
    }

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy {
            max_attempts: 10,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(3), Duration::from_millis(400));
        assert_eq!(p.delay(8), Duration::from_millis(1000));
        assert_eq!(p.delay(80), Duration::from_millis(1000));
    }

    #[test]
    fn concurrent_identical_calls_share_one_value() {
        let dir = tempfile::tempdir().unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let seq = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        // Each invocation answers differently so a double write would be visible.
        let backend = Arc::new(FnBackend::new("racy", move |_: &CompletionRequest| {
            c2.fetch_add(1, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(20));
            Ok(CompletionResponse {
                text: format!("v{}", seq.fetch_add(1, Ordering::SeqCst)),
                logprobs: None,
            })
        }));
        let client = LlmClient::new(backend).with_cache(ResponseCache::new(dir.path()).unwrap());
        let handles: Vec<_> = (0..2)
            .map(|_| {
                let c = client.clone();
                thread::spawn(move || c.complete("same", false).unwrap().text)
            })
            .collect();
        let texts: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(texts[0], texts[1]);
        assert!(calls.load(Ordering::SeqCst) <= 2);
        let cache = ResponseCache::new(dir.path()).unwrap();
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn in_flight_cap_is_respected() {
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (a2, p2) = (active.clone(), peak.clone());
        let backend = Arc::new(FnBackend::new("slow", move |r: &CompletionRequest| {
            let now = a2.fetch_add(1, Ordering::SeqCst) + 1;
            p2.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(10));
            a2.fetch_sub(1, Ordering::SeqCst);
            Ok(CompletionResponse {
                text: r.prompt.clone(),
                logprobs: None,
            })
        }));
        let client = LlmClient::new(backend).with_max_in_flight(2);
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let c = client.clone();
                thread::spawn(move || c.complete(&format!("p{i}"), false).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
