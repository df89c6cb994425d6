//! Uncertainty-aware self-correction for LLM answers.
//!
//! Token log-probabilities are turned into an uncertainty value, binned into
//! an integer score, and fed back to the model alongside its own answer so
//! it can keep, revise or withdraw it.

pub mod binning;
pub mod config;
pub mod error;
pub mod gateway;
pub mod io;
pub mod labeling;
pub mod metrics;
pub mod orchestrator;
pub mod sft;
pub mod synthetic;
pub mod trace;
pub mod uncertainty;

pub use binning::{BinMap, BinStrategy, UncertaintyScore};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gateway::{
    Backend, CompletionRequest, CompletionResult, Gateway, RequestKey, RetryPolicy, Stage,
};
pub use labeling::{CorrectnessLabel, Judge};
pub use metrics::{BehaviorShift, Decision, EvalOptions, EvalReport};
pub use orchestrator::{CorrectionOutcome, Failure, Mode, RunSummary};
pub use sft::{Provenance, SftLine, SftRecord};
pub use trace::{AnswerSet, QuestionRecord, ResponseRecord, TokenTrace};
pub use uncertainty::{EstimatorConfig, EstimatorKind, UncertaintyValue};
