//! Scripted offline backend.
//!
//! A [`MockScript`] maps request keys to fixed token rows. The same script and
//! request always produce the same result.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{assemble_tokens, Backend, CompletionRequest, CompletionResult, RequestKey};
use crate::error::{Error, Result};
use crate::io;

/// One scripted decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockToken {
    pub token: String,
    /// Probability of the emitted token.
    pub p: f64,
    /// Maximum softmax probability at this step; defaults to `p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_top: Option<f64>,
}

impl MockToken {
    pub fn new(token: impl Into<String>, p: f64) -> Self {
        MockToken {
            token: token.into(),
            p,
            p_top: None,
        }
    }
}

/// Script document: `{"<question_id>/<response_index>[/correction|/judge]": [rows...]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub entries: BTreeMap<String, Vec<MockToken>>,
}

impl MockScript {
    pub fn insert(&mut self, key: &RequestKey, rows: Vec<MockToken>) {
        self.entries.insert(key.script_key(), rows);
    }

    pub fn validate(&self) -> Result<()> {
        for (key, rows) in &self.entries {
            for (i, row) in rows.iter().enumerate() {
                let top = row.p_top.unwrap_or(row.p);
                let ok = |p: f64| p > 0.0 && p <= 1.0;
                if !ok(row.p) || !ok(top) || top < row.p {
                    return Err(Error::invalid(
                        format!("mock script {key}"),
                        format!("row {i}: probabilities must satisfy 0 < p <= p_top <= 1"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MockScript> {
        let script: MockScript = io::read_json(path)?;
        script.validate()?;
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self> {
        script.validate()?;
        Ok(MockBackend { script })
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let key = request.key.script_key();
        let rows = self
            .script
            .entries
            .get(&key)
            .ok_or_else(|| Error::Backend {
                backend: "mock".into(),
                message: format!("no scripted response for {key}"),
                retryable: false,
            })?;
        let (text, tokens) = assemble_tokens(
            rows.iter()
                .take(request.max_tokens)
                .map(|r| (r.token.clone(), r.p.ln(), r.p_top.unwrap_or(r.p).ln())),
        );
        Ok(CompletionResult {
            text,
            tokens,
            backend_id: "mock".into(),
            latency: Duration::ZERO,
            top_degraded: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Stage;

    fn backend() -> MockBackend {
        let mut s = MockScript::default();
        s.insert(
            &RequestKey::answer("q1", 0),
            vec![MockToken::new("The", 0.9), MockToken::new("Answer", 0.5)],
        );
        MockBackend::new(s).unwrap()
    }

    fn req(max_tokens: usize) -> CompletionRequest {
        CompletionRequest::new(RequestKey::answer("q1", 0), "prompt", 0.001, max_tokens)
    }

    #[test]
    fn scripted_tokens_echo_back() {
        let r = backend().complete(&req(16)).unwrap();
        assert_eq!(r.text, "TheAnswer");
        let chosen: Vec<f64> = r.tokens.iter().map(|t| t.logprob_chosen).collect();
        assert_eq!(chosen, vec![0.9f64.ln(), 0.5f64.ln()]);
        assert_eq!(r.tokens[1].char_offset, 3);
    }

    #[test]
    fn max_tokens_truncates() {
        let r = backend().complete(&req(1)).unwrap();
        assert!(r.tokens.len() <= 1);
        assert_eq!(r.text, "The");
    }

    #[test]
    fn identical_requests_give_identical_results() {
        let b = backend();
        assert_eq!(b.complete(&req(16)).unwrap(), b.complete(&req(16)).unwrap());
    }

    #[test]
    fn missing_key_is_not_retryable() {
        let mut r = req(4);
        r.key = r.key.with_stage(Stage::Correction);
        let e = backend().complete(&r).unwrap_err();
        assert!(!e.is_retryable());
        assert!(e.to_string().contains("q1/0/correction"));
    }

    #[test]
    fn invalid_rows_rejected() {
        let mut s = MockScript::default();
        s.insert(&RequestKey::answer("q", 0), vec![MockToken::new("x", 1.5)]);
        assert!(MockBackend::new(s).is_err());
        let mut s = MockScript::default();
        s.insert(
            &RequestKey::answer("q", 0),
            vec![MockToken {
                token: "x".into(),
                p: 0.5,
                p_top: Some(0.4),
            }],
        );
        assert!(s.validate().is_err());
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("script.json");
        let mut s = MockScript::default();
        s.insert(
            &RequestKey::answer("q", 3),
            vec![MockToken {
                token: "A".into(),
                p: 0.25,
                p_top: Some(0.5),
            }],
        );
        s.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"q/3\""));
        assert_eq!(MockScript::load(&p).unwrap(), s);
    }
}
