//! Completion backends that report per-token log-probabilities.
//!
//! [`Backend`] is a single-attempt transport. [`Gateway`] adds the retry
//! policy and the in-flight bound on top of any backend.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ResponseRecord, TokenTrace};

pub mod http;
pub mod mock;

pub use http::{ApiStyle, HttpBackend, HttpConfig};
pub use mock::{MockBackend, MockScript, MockToken};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Answer,
    Correction,
    Judge,
}

/// Identity of a request, echoed back with its result.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestKey {
    pub question_id: String,
    pub response_index: usize,
    pub stage: Stage,
}

impl RequestKey {
    pub fn answer(question_id: &str, response_index: usize) -> Self {
        RequestKey {
            question_id: question_id.to_owned(),
            response_index,
            stage: Stage::Answer,
        }
    }

    pub fn with_stage(mut self, stage: Stage) -> Self {
        self.stage = stage;
        self
    }

    /// Lookup key used by mock scripts: `qid/idx`, `qid/idx/correction`, `qid/idx/judge`.
    pub fn script_key(&self) -> String {
        match self.stage {
            Stage::Answer => format!("{}/{}", self.question_id, self.response_index),
            Stage::Correction => format!("{}/{}/correction", self.question_id, self.response_index),
            Stage::Judge => format!("{}/{}/judge", self.question_id, self.response_index),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub key: RequestKey,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub want_logprobs: bool,
    pub top_logprobs_depth: u32,
}

impl CompletionRequest {
    pub fn new(
        key: RequestKey,
        prompt: impl Into<String>,
        temperature: f64,
        max_tokens: usize,
    ) -> Self {
        CompletionRequest {
            key,
            prompt: prompt.into(),
            temperature,
            max_tokens,
            want_logprobs: true,
            top_logprobs_depth: 5,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("request", "temperature must be > 0"));
        }
        if self.max_tokens == 0 {
            return Err(Error::invalid("request", "max_tokens must be >= 1"));
        }
        if self.top_logprobs_depth == 0 {
            return Err(Error::invalid("request", "top_logprobs_depth must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub tokens: Vec<TokenTrace>,
    pub backend_id: String,
    pub latency: Duration,
    /// Top-logprobs were missing upstream; `logprob_top` mirrors `logprob_chosen`.
    pub top_degraded: bool,
}

impl CompletionResult {
    pub fn into_response(self, question_id: &str, response_index: usize) -> Result<ResponseRecord> {
        let mut r = ResponseRecord::new(question_id, response_index, self.tokens)?;
        if r.text != self.text {
            return Err(Error::invalid(
                format!("response {question_id}/{response_index}"),
                "backend tokens do not concatenate to the completion text",
            ));
        }
        r.top_degraded = self.top_degraded;
        Ok(r)
    }
}

/// Assigns character offsets to a token sequence and joins the text.
pub fn assemble_tokens(
    rows: impl IntoIterator<Item = (String, f64, f64)>,
) -> (String, Vec<TokenTrace>) {
    let mut text = String::new();
    let mut offset = 0;
    let tokens = rows
        .into_iter()
        .map(|(token_text, chosen, top)| {
            let t = TokenTrace {
                char_offset: offset,
                logprob_chosen: chosen,
                logprob_top: top.max(chosen),
                token_text,
            };
            offset += t.token_text.chars().count();
            text.push_str(&t.token_text);
            t
        })
        .collect();
    (text, tokens)
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// One attempt, no retries.
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    #[serde(with = "millis")]
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Counting semaphore bounding concurrent backend calls.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Thread-safe front for a backend: retries, backoff and the in-flight bound.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    in_flight: usize,
    limiter: Arc<Limiter>,
    calls: Arc<AtomicUsize>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, in_flight: usize) -> Self {
        let in_flight = in_flight.max(1);
        Gateway {
            backend,
            retry,
            in_flight,
            limiter: Arc::new(Limiter {
                free: Mutex::new(in_flight),
                cv: Condvar::new(),
            }),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    /// Number of backend attempts made so far, retries included.
    pub fn attempts_made(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        request.validate()?;
        let attempts = self.retry.attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 1;
        loop {
            let result = {
                let _slot = self.limiter.acquire();
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.backend.complete(request)
            };
            match result {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    tracing::warn!(
                        key = %request.key.script_key(),
                        attempt,
                        error = %e,
                        "retrying completion"
                    );
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Runs requests on up to `in_flight` worker threads. Results come back in
    /// input order, each tagged with its request key.
    pub fn complete_many(
        &self,
        requests: &[CompletionRequest],
    ) -> Vec<(RequestKey, Result<CompletionResult>)> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<CompletionResult>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        let workers = self.in_flight.min(requests.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(req) = requests.get(i) else { break };
                    let r = self.complete(req);
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        requests
            .iter()
            .zip(slots)
            .map(|(req, slot)| {
                let r = slot
                    .into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .unwrap_or_else(|| Err(Error::invalid("gateway", "request was not executed")));
                (req.key.clone(), r)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Flaky {
        failures_left: AtomicUsize,
        retryable: bool,
        calls: AtomicUsize,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            "flaky"
        }

        fn complete(&self, _r: &CompletionRequest) -> Result<CompletionResult> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                return Err(Error::Backend {
                    backend: "flaky".into(),
                    message: "boom".into(),
                    retryable: self.retryable,
                });
            }
            let (text, tokens) = assemble_tokens([("ok".to_string(), -0.1, -0.1)]);
            Ok(CompletionResult {
                text,
                tokens,
                backend_id: "flaky".into(),
                latency: Duration::ZERO,
                top_degraded: false,
            })
        }
    }

    fn gateway(failures: usize, retryable: bool) -> (Arc<Flaky>, Gateway) {
        let b = Arc::new(Flaky {
            failures_left: AtomicUsize::new(failures),
            retryable,
            calls: AtomicUsize::new(0),
        });
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        };
        (b.clone(), Gateway::new(b, policy, 2))
    }

    fn req() -> CompletionRequest {
        CompletionRequest::new(RequestKey::answer("q", 0), "p", 0.001, 8)
    }

    #[test]
    fn transient_failures_are_retried() {
        let (b, g) = gateway(2, true);
        assert!(g.complete(&req()).is_ok());
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_attempt_budget() {
        let (b, g) = gateway(5, true);
        assert!(g.complete(&req()).is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (b, g) = gateway(1, false);
        assert!(g.complete(&req()).is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn invalid_request_never_reaches_backend() {
        let (b, g) = gateway(0, true);
        let mut r = req();
        r.temperature = 0.0;
        assert!(g.complete(&r).is_err());
        assert_eq!(b.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn complete_many_preserves_order_and_keys() {
        let (_, g) = gateway(0, true);
        let reqs: Vec<_> = (0..9)
            .map(|i| CompletionRequest::new(RequestKey::answer("q", i), "p", 0.001, 8))
            .collect();
        let out = g.complete_many(&reqs);
        assert_eq!(out.len(), 9);
        for (i, (k, r)) in out.iter().enumerate() {
            assert_eq!(k.response_index, i);
            assert!(r.is_ok());
        }
    }
}
