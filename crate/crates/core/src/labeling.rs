//! Correct/incorrect labelling of responses against the gold answer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{CompletionRequest, Gateway, HttpConfig, Stage};
use crate::trace::{QuestionRecord, ResponseRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectnessLabel {
    Correct,
    Incorrect,
}

impl CorrectnessLabel {
    pub fn is_correct(self) -> bool {
        self == CorrectnessLabel::Correct
    }

    pub fn flip(self) -> Self {
        match self {
            CorrectnessLabel::Correct => CorrectnessLabel::Incorrect,
            CorrectnessLabel::Incorrect => CorrectnessLabel::Correct,
        }
    }
}

pub const DEFAULT_EXTRACTION_PROMPT: &str = "Choose a correct answer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Heuristic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<HttpConfig>,
    pub prompt: String,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            kind: JudgeKind::Heuristic,
            external: None,
            prompt: DEFAULT_EXTRACTION_PROMPT.into(),
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.kind, &self.external) {
            (JudgeKind::External, None) => Err(Error::Config(
                "judge.kind = external requires judge.external".into(),
            )),
            (JudgeKind::Heuristic, Some(_)) => Err(Error::Config(
                "judge.external is only valid with judge.kind = external".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Lowercases, replaces punctuation with spaces, drops the articles
/// `a`/`an`/`the`, and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Word-aligned occurrences of `needle` in `hay` (both normalized), as byte ranges.
fn occurrences(hay: &str, needle: &str) -> Vec<(usize, usize)> {
    if needle.is_empty() {
        return Vec::new();
    }
    let padded = format!(" {hay} ");
    let pat = format!(" {needle} ");
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = padded[from..].find(&pat) {
        let start = from + pos;
        out.push((start, start + pat.len()));
        from = start + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judgement {
    pub label: CorrectnessLabel,
    /// Both the gold answer and a distractor were found.
    pub ambiguous: bool,
}

/// Gold answer present and no distractor present, matched on whole words.
///
/// A distractor occurrence lying inside a gold-answer occurrence is ignored,
/// so a distractor that is a sub-phrase of the gold answer does not veto it.
pub fn judge_heuristic(text: &str, question: &QuestionRecord) -> Judgement {
    let hay = normalize(text);
    let gold = occurrences(&hay, &normalize(&question.correct_answer));
    let distractor_hit = question.distractors.iter().any(|d| {
        occurrences(&hay, &normalize(d))
            .into_iter()
            .any(|(s, e)| !gold.iter().any(|(gs, ge)| *gs <= s && e <= *ge))
    });
    match (!gold.is_empty(), distractor_hit) {
        (true, false) => Judgement {
            label: CorrectnessLabel::Correct,
            ambiguous: false,
        },
        (true, true) => Judgement {
            label: CorrectnessLabel::Incorrect,
            ambiguous: true,
        },
        _ => Judgement {
            label: CorrectnessLabel::Incorrect,
            ambiguous: false,
        },
    }
}

/// Verdict parser for external judges: the first word decides.
pub fn parse_verdict(reply: &str) -> Option<CorrectnessLabel> {
    let norm = normalize(reply);
    match norm.split_whitespace().next()? {
        "correct" | "yes" | "true" | "right" => Some(CorrectnessLabel::Correct),
        "incorrect" | "no" | "false" | "wrong" => Some(CorrectnessLabel::Incorrect),
        _ => None,
    }
}

pub fn external_judge_prompt(prompt: &str, response: &str, question: &QuestionRecord) -> String {
    format!(
        "{prompt}\nQuestion: {}\nGold answer: {}\nOther options: {}\nModel response: {response}\n\
         Extract the answer given in the model response. Reply with one word: \
         \"correct\" if it matches the gold answer, otherwise \"incorrect\".",
        question.question,
        question.correct_answer,
        question.distractors.join("; "),
    )
}

#[derive(Clone)]
pub enum Judge {
    Heuristic,
    External { gateway: Gateway, prompt: String },
}

impl Judge {
    pub fn from_config(
        config: &JudgeConfig,
        make_gateway: impl FnOnce(&HttpConfig) -> Result<Gateway>,
    ) -> Result<Self> {
        config.validate()?;
        Ok(match (config.kind, &config.external) {
            (JudgeKind::External, Some(http)) => Judge::External {
                gateway: make_gateway(http)?,
                prompt: config.prompt.clone(),
            },
            _ => Judge::Heuristic,
        })
    }

    pub fn external(
        backend: Arc<dyn crate::gateway::Backend>,
        retry: crate::gateway::RetryPolicy,
        prompt: &str,
    ) -> Self {
        Judge::External {
            gateway: Gateway::new(backend, retry, 1),
            prompt: prompt.to_owned(),
        }
    }

    /// Labels one response. Heuristic judging looks only at the decision sentence.
    pub fn label_response(
        &self,
        response: &ResponseRecord,
        question: &QuestionRecord,
    ) -> Result<CorrectnessLabel> {
        if response.text.trim().is_empty() {
            return Ok(CorrectnessLabel::Incorrect);
        }
        match self {
            Judge::Heuristic => {
                let j = judge_heuristic(&response.decision_text(), question);
                if j.ambiguous {
                    tracing::warn!(
                        question_id = %response.question_id,
                        response_index = response.response_index,
                        "ambiguous answer: gold and distractor both present"
                    );
                }
                Ok(j.label)
            }
            Judge::External { gateway, prompt } => {
                let mut req = CompletionRequest::new(
                    crate::gateway::RequestKey::answer(
                        &response.question_id,
                        response.response_index,
                    )
                    .with_stage(Stage::Judge),
                    external_judge_prompt(prompt, &response.text, question),
                    0.001,
                    8,
                );
                req.want_logprobs = false;
                let reply = gateway.complete(&req)?;
                parse_verdict(&reply.text).ok_or_else(|| Error::Backend {
                    backend: gateway.backend_id().to_owned(),
                    message: format!("judge reply is not a verdict: {:?}", reply.text),
                    retryable: false,
                })
            }
        }
    }
}
