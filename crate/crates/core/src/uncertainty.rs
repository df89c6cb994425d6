//! Single-pass uncertainty estimators over token probabilities.
//!
//! All four estimators work in log space: the value is a non-negative number in
//! nats, larger meaning less confident.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::ResponseRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// `-ln min_j p_j`
    #[serde(rename = "min")]
    Min,
    /// `-ln mean_j p_j`
    #[serde(rename = "avg")]
    Avg,
    /// `(1/m) * sum_j -ln p_j`
    #[serde(rename = "norm")]
    Norm,
    /// `sum_j -ln p_j`
    #[serde(rename = "log-sum")]
    LogSum,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Min,
        EstimatorKind::Avg,
        EstimatorKind::Norm,
        EstimatorKind::LogSum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Min => "min",
            EstimatorKind::Avg => "avg",
            EstimatorKind::Norm => "norm",
            EstimatorKind::LogSum => "log-sum",
        }
    }

    /// Column label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Min => "Min",
            EstimatorKind::Avg => "Avg",
            EstimatorKind::Norm => "Norm",
            EstimatorKind::LogSum => "Log-sum",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(EstimatorKind::Min),
            "avg" | "average" => Ok(EstimatorKind::Avg),
            "norm" | "normalized" => Ok(EstimatorKind::Norm),
            "log-sum" | "logsum" | "log_sum" => Ok(EstimatorKind::LogSum),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Which tokens feed the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    DecisionSentence,
    Full,
}

/// Which per-token log-probability is exponentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbSource {
    /// Maximum softmax probability at each step.
    #[default]
    Top,
    /// Probability of the token actually emitted.
    Chosen,
}

/// Raw uncertainty of one response. Also the score-dump record layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyValue {
    pub question_id: String,
    pub response_index: usize,
    pub estimator: EstimatorKind,
    pub value: f64,
    pub token_count_used: usize,
}

pub fn token_probabilities(
    response: &ResponseRecord,
    scope: Scope,
    source: ProbSource,
) -> Result<Vec<f64>> {
    let tokens = match scope {
        Scope::DecisionSentence => &response.tokens[response.decision_span.clone()],
        Scope::Full => &response.tokens[..],
    };
    if tokens.is_empty() {
        return Err(Error::EmptyScope);
    }
    Ok(tokens
        .iter()
        .map(|t| match source {
            ProbSource::Top => t.logprob_top.exp(),
            ProbSource::Chosen => t.logprob_chosen.exp(),
        })
        .collect())
}

/// Computes the raw uncertainty (nats) of a non-empty probability list.
pub fn estimate_value(kind: EstimatorKind, probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyScope);
    }
    if let Some(&bad) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::ProbabilityDomain(bad));
    }
    let m = probs.len() as f64;
    let value = match kind {
        EstimatorKind::Min => probs.iter().map(|p| -p.ln()).fold(0.0f64, f64::max),
        EstimatorKind::Avg => -(probs.iter().sum::<f64>() / m).ln(),
        EstimatorKind::Norm => neg_log_sum(probs) / m,
        EstimatorKind::LogSum => neg_log_sum(probs),
    };
    // -ln(1.0) is -0.0; keep the sign clean.
    Ok(value.max(0.0))
}

fn neg_log_sum(probs: &[f64]) -> f64 {
    probs.iter().map(|p| -p.ln()).sum()
}

pub fn estimate(
    kind: EstimatorKind,
    probs: &[f64],
    question_id: &str,
    response_index: usize,
) -> Result<UncertaintyValue> {
    Ok(UncertaintyValue {
        question_id: question_id.to_owned(),
        response_index,
        estimator: kind,
        value: estimate_value(kind, probs)?,
        token_count_used: probs.len(),
    })
}

/// Estimator settings bundled for pipeline use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub scope: Scope,
    pub source: ProbSource,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            kind: EstimatorKind::LogSum,
            scope: Scope::DecisionSentence,
            source: ProbSource::Top,
        }
    }
}

impl EstimatorConfig {
    pub fn score_response(&self, response: &ResponseRecord) -> Result<UncertaintyValue> {
        let probs = token_probabilities(response, self.scope, self.source)?;
        estimate(
            self.kind,
            &probs,
            &response.question_id,
            response.response_index,
        )
    }
}
