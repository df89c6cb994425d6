//! Domain records: calibration questions, token traces and answer sets.
//!
//! Ingestion validates every record on the way in, so the rest of the crate
//! can rely on the invariants documented on each type.

use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io;

/// A multiple-choice question with exactly one gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub correct_answer: String,
    pub distractors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<String>,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<()> {
        let ctx = || format!("question {}", self.id);
        if self.correct_answer.trim().is_empty() {
            return Err(Error::invalid(ctx(), "correct_answer is empty"));
        }
        if self.distractors.iter().any(|d| d == &self.correct_answer) {
            return Err(Error::invalid(
                ctx(),
                "correct_answer is also listed as a distractor",
            ));
        }
        Ok(())
    }

    /// Serializes to the same flat layout accepted by [`parse_questions`].
    pub fn to_sciq_value(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("id".into(), Value::String(self.id.clone()));
        obj.insert("question".into(), Value::String(self.question.clone()));
        obj.insert(
            "correct_answer".into(),
            Value::String(self.correct_answer.clone()),
        );
        for (i, d) in self.distractors.iter().enumerate() {
            obj.insert(format!("distractor{}", i + 1), Value::String(d.clone()));
        }
        if let Some(s) = &self.support {
            obj.insert("support".into(), Value::String(s.clone()));
        }
        Value::Object(obj)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionFormat {
    #[default]
    Sciq,
}

/// Loads SciQ-style questions from a JSON-lines file (a top-level JSON array is also accepted).
///
/// Records without an `id` get their zero-based record index.
pub fn parse_questions(path: &Path, format: QuestionFormat) -> Result<Vec<QuestionRecord>> {
    let QuestionFormat::Sciq = format;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: source.line(),
            source,
        })?
    } else {
        io::read_jsonl(path)?
    };
    questions_from_values(&rows)
}

pub fn questions_from_values(rows: &[Value]) -> Result<Vec<QuestionRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (index, row) in rows.iter().enumerate() {
        let q = question_from_value(index, row)?;
        if !seen.insert(q.id.clone()) {
            return Err(Error::invalid(
                format!("record {index}"),
                format!("duplicate id {:?}", q.id),
            ));
        }
        out.push(q);
    }
    Ok(out)
}

fn question_from_value(index: usize, row: &Value) -> Result<QuestionRecord> {
    let ctx = format!("record {index}");
    let obj = row
        .as_object()
        .ok_or_else(|| Error::invalid(&ctx, "not a JSON object"))?;
    let field = |name: &str| -> Result<String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::invalid(
                &ctx,
                format!("field {name} is not a string"),
            )),
            None => Err(Error::invalid(&ctx, format!("missing field {name}"))),
        }
    };
    let id = match obj.get("id") {
        None | Some(Value::Null) => index.to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(Error::invalid(&ctx, "field id is not a string")),
    };
    let question = field("question")?;
    let correct_answer = field("correct_answer")?;

    let mut distractors = Vec::new();
    if let Some(list) = obj.get("distractors") {
        let list = list
            .as_array()
            .ok_or_else(|| Error::invalid(&ctx, "field distractors is not an array"))?;
        for d in list {
            let s = d
                .as_str()
                .ok_or_else(|| Error::invalid(&ctx, "distractor is not a string"))?;
            distractors.push(s.to_owned());
        }
    } else {
        for n in 1..=3 {
            distractors.push(field(&format!("distractor{n}"))?);
        }
        // SciQ always has three; tolerate extras if a file carries them.
        let mut n = 4;
        while let Some(Value::String(s)) = obj.get(&format!("distractor{n}")) {
            distractors.push(s.clone());
            n += 1;
        }
    }
    let support = match obj.get("support") {
        Some(Value::String(s)) if !s.is_empty() => Some(s.clone()),
        _ => None,
    };

    let q = QuestionRecord {
        id,
        question,
        correct_answer,
        distractors,
        support,
    };
    q.validate().map_err(|e| match e {
        Error::Invalid { message, .. } => Error::invalid(ctx, message),
        other => other,
    })?;
    Ok(q)
}

/// One decoding step of a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    #[serde(rename = "token")]
    pub token_text: String,
    /// Natural-log probability of the emitted token.
    pub logprob_chosen: f64,
    /// Natural-log of the maximum softmax probability at this step.
    pub logprob_top: f64,
    /// Start offset of `token_text` in the response, in Unicode scalar values.
    pub char_offset: usize,
}

impl TokenTrace {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, lp) in [
            ("logprob_chosen", self.logprob_chosen),
            ("logprob_top", self.logprob_top),
        ] {
            if !lp.is_finite() {
                return Err(format!("{name} is not finite"));
            }
            if lp > 0.0 {
                return Err(format!("{name} {lp} is positive"));
            }
        }
        if self.logprob_top < self.logprob_chosen {
            return Err(format!(
                "logprob_top {} is below logprob_chosen {}",
                self.logprob_top, self.logprob_chosen
            ));
        }
        Ok(())
    }

    fn char_len(&self) -> usize {
        self.token_text.chars().count()
    }
}

/// A single model response with its per-token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRecord {
    pub question_id: String,
    pub response_index: usize,
    pub text: String,
    pub tokens: Vec<TokenTrace>,
    pub decision_span: Range<usize>,
    /// Set when the backend could not report top-logprobs and `logprob_top`
    /// was copied from `logprob_chosen`.
    pub top_degraded: bool,
}

/// Token layout accepted on the wire: `char_offset` may be omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireToken {
    pub token: String,
    pub logprob_chosen: f64,
    pub logprob_top: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char_offset: Option<usize>,
}

/// Trace-file record layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireResponse {
    pub question_id: String,
    pub response_index: usize,
    pub text: String,
    pub tokens: Vec<WireToken>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_span: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub top_degraded: bool,
}

impl ResponseRecord {
    /// Builds a validated response; the decision span is derived from the text.
    pub fn new(
        question_id: impl Into<String>,
        response_index: usize,
        tokens: Vec<TokenTrace>,
    ) -> Result<Self> {
        let text: String = tokens.iter().map(|t| t.token_text.as_str()).collect();
        let mut r = ResponseRecord {
            question_id: question_id.into(),
            response_index,
            text,
            tokens,
            decision_span: 0..0,
            top_degraded: false,
        };
        r.check_tokens()?;
        r.decision_span = extract_decision_sentence(&r);
        Ok(r)
    }

    /// Convenience constructor from `(token, logprob_chosen, logprob_top)` triples.
    pub fn from_token_logprobs(
        question_id: impl Into<String>,
        response_index: usize,
        tokens: &[(&str, f64, f64)],
    ) -> Result<Self> {
        let mut offset = 0;
        let tokens = tokens
            .iter()
            .map(|&(text, chosen, top)| {
                let t = TokenTrace {
                    token_text: text.to_owned(),
                    logprob_chosen: chosen,
                    logprob_top: top,
                    char_offset: offset,
                };
                offset += t.char_len();
                t
            })
            .collect();
        Self::new(question_id, response_index, tokens)
    }

    pub fn from_wire(w: WireResponse) -> Result<Self> {
        let mut offset = 0;
        let mut tokens = Vec::with_capacity(w.tokens.len());
        for t in w.tokens {
            let t = TokenTrace {
                char_offset: t.char_offset.unwrap_or(offset),
                token_text: t.token,
                logprob_chosen: t.logprob_chosen,
                logprob_top: t.logprob_top,
            };
            offset += t.char_len();
            tokens.push(t);
        }
        let mut r = ResponseRecord {
            question_id: w.question_id,
            response_index: w.response_index,
            text: w.text,
            tokens,
            decision_span: 0..0,
            top_degraded: w.top_degraded,
        };
        r.check_tokens()?;
        let computed = extract_decision_sentence(&r);
        r.decision_span = match w.decision_span {
            None => computed,
            Some([start, end]) => {
                let m = r.tokens.len();
                if start > end || end > m || (start == end && !r.text.is_empty()) {
                    return Err(r.err(format!(
                        "decision_span [{start}, {end}) invalid for {m} tokens"
                    )));
                }
                start..end
            }
        };
        Ok(r)
    }

    pub fn to_wire(&self) -> WireResponse {
        WireResponse {
            question_id: self.question_id.clone(),
            response_index: self.response_index,
            text: self.text.clone(),
            tokens: self
                .tokens
                .iter()
                .map(|t| WireToken {
                    token: t.token_text.clone(),
                    logprob_chosen: t.logprob_chosen,
                    logprob_top: t.logprob_top,
                    char_offset: Some(t.char_offset),
                })
                .collect(),
            decision_span: Some([self.decision_span.start, self.decision_span.end]),
            top_degraded: self.top_degraded,
        }
    }

    /// Text covered by the decision span.
    pub fn decision_text(&self) -> String {
        self.tokens[self.decision_span.clone()]
            .iter()
            .map(|t| t.token_text.as_str())
            .collect()
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::invalid(
            format!("response {}/{}", self.question_id, self.response_index),
            msg,
        )
    }

    fn check_tokens(&self) -> Result<()> {
        let mut offset = 0;
        let mut joined = String::with_capacity(self.text.len());
        for (i, t) in self.tokens.iter().enumerate() {
            t.validate()
                .map_err(|m| self.err(format!("token {i}: {m}")))?;
            if t.char_offset != offset {
                return Err(self.err(format!(
                    "token {i}: char_offset {} does not match position {offset}",
                    t.char_offset
                )));
            }
            offset += t.char_len();
            joined.push_str(&t.token_text);
        }
        if joined != self.text {
            return Err(self.err("token concatenation does not match text"));
        }
        Ok(())
    }
}

impl Serialize for ResponseRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_wire().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ResponseRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = WireResponse::deserialize(d)?;
        ResponseRecord::from_wire(w).map_err(serde::de::Error::custom)
    }
}

/// Reads and validates a trace file.
pub fn parse_traces(path: &Path) -> Result<Vec<ResponseRecord>> {
    let wire: Vec<WireResponse> = io::read_jsonl(path)?;
    wire.into_iter().map(ResponseRecord::from_wire).collect()
}

pub fn write_traces(path: &Path, responses: &[ResponseRecord]) -> Result<()> {
    let wire: Vec<_> = responses.iter().map(ResponseRecord::to_wire).collect();
    io::write_jsonl(path, &wire)
}

/// Character length of the first sentence: everything up to and including the
/// first `.`, `?` or `!` that is followed by whitespace or end of text. Falls
/// back to the whole text.
pub fn first_sentence_chars(text: &str) -> usize {
    let mut chars = text.chars().peekable();
    let mut n = 0;
    while let Some(c) = chars.next() {
        n += 1;
        if matches!(c, '.' | '?' | '!') && chars.peek().is_none_or(|next| next.is_whitespace()) {
            return n;
        }
    }
    n
}

/// Token range covering the first sentence of `response`.
///
/// A token belongs to the range when its character span intersects the
/// sentence, so a token straddling the terminator is kept.
pub fn extract_decision_sentence(response: &ResponseRecord) -> Range<usize> {
    let end = first_sentence_chars(&response.text);
    let last = response
        .tokens
        .iter()
        .rposition(|t| t.char_offset < end && !t.token_text.is_empty());
    match last {
        Some(i) => 0..i + 1,
        None => 0..0,
    }
}

/// The N responses generated for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSet {
    pub question_id: String,
    pub responses: Vec<ResponseRecord>,
}

impl AnswerSet {
    pub fn new(question_id: impl Into<String>, responses: Vec<ResponseRecord>) -> Result<Self> {
        let question_id = question_id.into();
        for (i, r) in responses.iter().enumerate() {
            if r.question_id != question_id {
                return Err(Error::invalid(
                    format!("answer set {question_id}"),
                    format!("response {i} belongs to question {}", r.question_id),
                ));
            }
            if r.response_index != i {
                return Err(Error::invalid(
                    format!("answer set {question_id}"),
                    format!("expected response_index {i}, found {}", r.response_index),
                ));
            }
        }
        Ok(AnswerSet {
            question_id,
            responses,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

/// Groups responses into answer sets, keeping first-appearance order of question ids.
pub fn group_answer_sets(responses: Vec<ResponseRecord>) -> Result<Vec<AnswerSet>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<ResponseRecord>> = Default::default();
    for r in responses {
        if !groups.contains_key(&r.question_id) {
            order.push(r.question_id.clone());
        }
        groups.entry(r.question_id.clone()).or_default().push(r);
    }
    order
        .into_iter()
        .map(|qid| {
            let mut rs = groups.remove(&qid).unwrap_or_default();
            rs.sort_by_key(|r| r.response_index);
            AnswerSet::new(qid, rs)
        })
        .collect()
}

/// Sampling settings for answer generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub num_responses: usize,
    pub max_tokens: usize,
    /// Only consulted by the mock backends.
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.001,
            num_responses: 5,
            max_tokens: 256,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("generation.temperature must be > 0".into()));
        }
        if self.num_responses == 0 {
            return Err(Error::Config(
                "generation.num_responses must be >= 1".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("generation.max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}
