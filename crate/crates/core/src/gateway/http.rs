//! OpenAI-compatible HTTP backend.
//!
//! Field mapping (request / response):
//!
//! `completions` style, `POST {endpoint}/completions`:
//!   request  `{"model", "prompt", "max_tokens", "temperature", "logprobs": depth, "n": 1}`
//!   response `choices[0].text`, `choices[0].logprobs.tokens[i]`,
//!            `choices[0].logprobs.token_logprobs[i]` -> `logprob_chosen`,
//!            `max(choices[0].logprobs.top_logprobs[i].values())` -> `logprob_top`
//!
//! `chat` style, `POST {endpoint}/chat/completions`:
//!   request  `{"model", "messages": [{"role": "user", "content": prompt}], "max_tokens",
//!             "temperature", "logprobs": true, "top_logprobs": depth, "n": 1}`
//!   response `choices[0].message.content`, `choices[0].logprobs.content[i].token`,
//!            `.logprob` -> `logprob_chosen`, `max(.top_logprobs[*].logprob)` -> `logprob_top`
//!
//! When no top-logprobs are present, `logprob_top` is set to `logprob_chosen`
//! and the result is flagged `top_degraded`. A response without any logprobs
//! fails with [`Error::NoLogprobs`].

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{assemble_tokens, Backend, CompletionRequest, CompletionResult};
use crate::error::{Error, Result};

pub const ENV_ENDPOINT: &str = "UACORRECT_ENDPOINT";
pub const ENV_API_KEY: &str = "UACORRECT_API_KEY";
pub const ENV_TIMEOUT: &str = "UACORRECT_TIMEOUT_SECS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    #[default]
    Completions,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL such as `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    pub api: ApiStyle,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: String::new(),
            model: String::new(),
            api: ApiStyle::Completions,
            api_key_env: ENV_API_KEY.into(),
            timeout_secs: 60,
        }
    }
}

impl HttpConfig {
    /// Fills endpoint and timeout from the environment when they are unset here.
    pub fn with_env_overrides(mut self) -> Self {
        if self.endpoint.is_empty() {
            if let Ok(e) = std::env::var(ENV_ENDPOINT) {
                self.endpoint = e;
            }
        }
        if let Some(t) = std::env::var(ENV_TIMEOUT).ok().and_then(|t| t.parse().ok()) {
            self.timeout_secs = t;
        }
        self
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    id: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::Config(format!(
                "http backend needs an endpoint (config or {ENV_ENDPOINT})"
            )));
        }
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let id = format!("http:{}", config.model);
        Ok(HttpBackend {
            config,
            api_key,
            agent,
            id,
        })
    }

    fn url(&self) -> String {
        let base = self.config.endpoint.trim_end_matches('/');
        match self.config.api {
            ApiStyle::Completions => format!("{base}/completions"),
            ApiStyle::Chat => format!("{base}/chat/completions"),
        }
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        match self.config.api {
            ApiStyle::Completions => {
                let mut b = json!({
                    "model": self.config.model,
                    "prompt": req.prompt,
                    "max_tokens": req.max_tokens,
                    "temperature": req.temperature,
                    "n": 1,
                });
                if req.want_logprobs {
                    b["logprobs"] = json!(req.top_logprobs_depth);
                }
                b
            }
            ApiStyle::Chat => {
                let mut b = json!({
                    "model": self.config.model,
                    "messages": [{"role": "user", "content": req.prompt}],
                    "max_tokens": req.max_tokens,
                    "temperature": req.temperature,
                    "n": 1,
                });
                if req.want_logprobs {
                    b["logprobs"] = json!(true);
                    b["top_logprobs"] = json!(req.top_logprobs_depth);
                }
                b
            }
        }
    }

    fn backend_err(&self, message: String, retryable: bool) -> Error {
        Error::Backend {
            backend: self.id.clone(),
            message,
            retryable,
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult> {
        let started = Instant::now();
        let mut call = self.agent.post(&self.url());
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let response = call
            .send_json(self.body(req))
            .map_err(|e| self.backend_err(format!("transport: {e}"), true))?;
        let status = response.status().as_u16();
        let text = response
            .into_body()
            .read_to_string()
            .map_err(|e| self.backend_err(format!("reading body: {e}"), true))?;
        if status >= 500 {
            return Err(self.backend_err(format!("HTTP {status}: {text}"), true));
        }
        if status >= 400 {
            return Err(self.backend_err(format!("HTTP {status}: {text}"), false));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| self.backend_err(format!("malformed JSON body: {e}"), false))?;
        let parsed = match self.config.api {
            ApiStyle::Completions => parse_completions(&value, req.want_logprobs),
            ApiStyle::Chat => parse_chat(&value, req.want_logprobs),
        }
        .map_err(|e| match e {
            Error::Invalid { message, .. } => self.backend_err(message, false),
            other => other,
        })?;
        let (text, tokens, top_degraded) = parsed;
        Ok(CompletionResult {
            text,
            tokens,
            backend_id: self.id.clone(),
            latency: started.elapsed(),
            top_degraded,
        })
    }
}

type Parsed = (String, Vec<crate::trace::TokenTrace>, bool);

fn no_logprobs(what: &str) -> Error {
    Error::NoLogprobs(format!("response has no {what}"))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::invalid("http response", msg)
}

fn finish(rows: Vec<(String, f64, Option<f64>)>, reported_text: &str) -> Result<Parsed> {
    let degraded = rows.iter().any(|r| r.2.is_none());
    let (text, tokens) = assemble_tokens(
        rows.into_iter()
            .map(|(t, chosen, top)| (t, chosen, top.unwrap_or(chosen))),
    );
    if text != reported_text {
        tracing::warn!("token concatenation differs from reported text; using token text");
    }
    Ok((text, tokens, degraded))
}

/// Parses a legacy `/completions` body.
pub fn parse_completions(v: &Value, want_logprobs: bool) -> Result<Parsed> {
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| bad("missing choices[0]"))?;
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing choices[0].text"))?;
    let lp = match choice.get("logprobs") {
        Some(lp) if !lp.is_null() => lp,
        _ if want_logprobs => return Err(no_logprobs("logprobs")),
        _ => return Ok((text.to_owned(), Vec::new(), true)),
    };
    let toks = lp
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| no_logprobs("logprobs.tokens"))?;
    let chosen = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| no_logprobs("logprobs.token_logprobs"))?;
    if toks.len() != chosen.len() {
        return Err(bad("tokens and token_logprobs differ in length"));
    }
    let tops = lp.get("top_logprobs").and_then(Value::as_array);
    let mut rows = Vec::with_capacity(toks.len());
    for (i, (t, c)) in toks.iter().zip(chosen).enumerate() {
        let token = t
            .as_str()
            .ok_or_else(|| bad(format!("token {i} is not a string")))?;
        let c = c
            .as_f64()
            .ok_or_else(|| no_logprobs(&format!("logprob for token {i}")))?;
        let top = tops
            .and_then(|a| a.get(i))
            .and_then(Value::as_object)
            .and_then(|m| m.values().filter_map(Value::as_f64).reduce(f64::max))
            .map(|t| t.max(c));
        rows.push((token.to_owned(), c, top));
    }
    finish(rows, text)
}

/// Parses a `/chat/completions` body.
pub fn parse_chat(v: &Value, want_logprobs: bool) -> Result<Parsed> {
    let choice = v
        .pointer("/choices/0")
        .ok_or_else(|| bad("missing choices[0]"))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing choices[0].message.content"))?;
    let content = match choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
    {
        Some(c) => c,
        None if want_logprobs => return Err(no_logprobs("logprobs.content")),
        None => return Ok((text.to_owned(), Vec::new(), true)),
    };
    let mut rows = Vec::with_capacity(content.len());
    for (i, entry) in content.iter().enumerate() {
        let token = entry
            .get("token")
            .and_then(Value::as_str)
            .ok_or_else(|| bad(format!("token {i} missing")))?;
        let c = entry
            .get("logprob")
            .and_then(Value::as_f64)
            .ok_or_else(|| no_logprobs(&format!("logprob for token {i}")))?;
        let top = entry
            .get("top_logprobs")
            .and_then(Value::as_array)
            .and_then(|a| {
                a.iter()
                    .filter_map(|x| x.get("logprob").and_then(Value::as_f64))
                    .reduce(f64::max)
            })
            .map(|t| t.max(c));
        rows.push((token.to_owned(), c, top));
    }
    finish(rows, text)
}
