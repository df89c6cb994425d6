//! Run configuration: one TOML document, every field defaulted.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::binning::BinStrategy;
use crate::error::{Error, Result};
use crate::gateway::{
    Backend, Gateway, HttpBackend, HttpConfig, MockBackend, MockScript, RetryPolicy,
};
use crate::labeling::{Judge, JudgeConfig};
use crate::metrics::EvalOptions;
use crate::sft::{DEFAULT_PROMPT_TEMPLATE, DEFAULT_REJECTION_TEMPLATE};
use crate::synthetic::{SyntheticBackend, SyntheticProfile};
use crate::trace::{GenerationConfig, QuestionRecord};
use crate::uncertainty::EstimatorConfig;

/// Question prompt, version 1.
pub const QUESTION_TEMPLATE_V1: &str = "Question: {question}\nChoose a correct answer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Script file for `kind = "mock"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpConfig>,
    pub synthetic: SyntheticProfile,
    pub in_flight: usize,
    pub top_logprobs: u32,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            mock_script: None,
            http: None,
            synthetic: SyntheticProfile::default(),
            in_flight: 4,
            top_logprobs: 5,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningConfig {
    pub k: u32,
    pub strategy: BinStrategy,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            k: 100,
            strategy: BinStrategy::Quantile,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    /// Client-side gate: answers scoring above this are replaced by the
    /// rejection template without a correction call. Off by default.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reject_above_score: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub binning: BinningConfig,
    pub generation: GenerationConfig,
    pub backend: BackendConfig,
    pub judge: JudgeConfig,
    pub eval: EvalOptions,
    pub correction: CorrectionConfig,
    pub rejection_template: String,
    /// Correction / SFT prompt with `{question}`, `{response}`, `{score}`.
    pub prompt_template: String,
    /// Answer prompt with `{question}`.
    pub question_template: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            estimator: EstimatorConfig::default(),
            binning: BinningConfig::default(),
            generation: GenerationConfig::default(),
            backend: BackendConfig::default(),
            judge: JudgeConfig::default(),
            eval: EvalOptions::default(),
            correction: CorrectionConfig::default(),
            rejection_template: DEFAULT_REJECTION_TEMPLATE.into(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
            question_template: QUESTION_TEMPLATE_V1.into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.binning.k < 2 {
            return Err(Error::Config(format!(
                "binning.k must be >= 2, got {}",
                self.binning.k
            )));
        }
        self.generation.validate()?;
        self.judge.validate()?;
        if self.rejection_template.trim().is_empty() {
            return Err(Error::Config("rejection_template must not be empty".into()));
        }
        if !self.question_template.contains("{question}") {
            return Err(Error::Config(
                "question_template must contain {question}".into(),
            ));
        }
        for field in ["{question}", "{response}", "{score}"] {
            if !self.prompt_template.contains(field) {
                return Err(Error::Config(format!(
                    "prompt_template must contain {field}"
                )));
            }
        }
        if self.backend.in_flight == 0 {
            return Err(Error::Config("backend.in_flight must be >= 1".into()));
        }
        if self.backend.top_logprobs == 0 {
            return Err(Error::Config("backend.top_logprobs must be >= 1".into()));
        }
        if let Some(t) = self.correction.reject_above_score {
            if t == 0 || t > self.binning.k {
                return Err(Error::Config(format!(
                    "correction.reject_above_score must be in 1..={}",
                    self.binning.k
                )));
            }
        }
        match self.backend.kind {
            BackendKind::Mock if self.backend.mock_script.is_none() => Err(Error::Config(
                "backend.kind = mock requires backend.mock_script".into(),
            )),
            BackendKind::Synthetic => self.backend.synthetic.validate(),
            _ => Ok(()),
        }
    }

    /// Resolves relative paths against `base` (usually the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.backend.mock_script {
            if p.is_relative() {
                self.backend.mock_script = Some(base.join(p));
            }
        }
    }

    /// Instantiates the configured backend. The synthetic backend needs the question set.
    pub fn build_backend(&self, questions: &[QuestionRecord]) -> Result<Arc<dyn Backend>> {
        Ok(match self.backend.kind {
            BackendKind::Mock => {
                let path = self
                    .backend
                    .mock_script
                    .as_deref()
                    .ok_or_else(|| Error::Config("backend.mock_script is not set".into()))?;
                Arc::new(MockBackend::new(MockScript::load(path)?)?)
            }
            BackendKind::Synthetic => {
                Arc::new(SyntheticBackend::new(self.backend.synthetic, questions)?)
            }
            BackendKind::Http => {
                let http = self
                    .backend
                    .http
                    .clone()
                    .unwrap_or_default()
                    .with_env_overrides();
                Arc::new(HttpBackend::new(http)?)
            }
        })
    }

    pub fn build_gateway(&self, questions: &[QuestionRecord]) -> Result<Gateway> {
        Ok(Gateway::new(
            self.build_backend(questions)?,
            self.backend.retry,
            self.backend.in_flight,
        ))
    }

    pub fn build_judge(&self) -> Result<Judge> {
        Judge::from_config(&self.judge, |http| {
            let backend = HttpBackend::new(http.clone().with_env_overrides())?;
            Ok(Gateway::new(Arc::new(backend), self.backend.retry, 1))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::uncertainty::EstimatorKind;

    #[test]
    fn defaults_match_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(c.generation.temperature, 0.001);
        assert_eq!(c.generation.num_responses, 5);
        assert_eq!(c.estimator.kind, EstimatorKind::LogSum);
    }

    #[test]
    fn toml_round_trip_and_partial_documents() {
        let mut c = RunConfig::default();
        c.backend.mock_script = Some("script.json".into());
        c.correction.reject_above_score = Some(80);
        let text = c.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);

        let partial = RunConfig::from_toml_str(
            "seed = 9\n[estimator]\nkind = \"min\"\nscope = \"full\"\nsource = \"chosen\"\n[binning]\nk = 10\n",
        )
        .unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.binning.k, 10);
        assert_eq!(partial.estimator.kind, EstimatorKind::Min);
        assert_eq!(partial.generation.num_responses, 5);
    }

    #[test]
    fn validation_names_fields() {
        let mut c = RunConfig::default();
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("mock_script"));
        c.backend.kind = BackendKind::Synthetic;
        c.validate().unwrap();
        c.binning.k = 1;
        assert!(c.validate().unwrap_err().to_string().contains("binning.k"));
        c.binning.k = 10;
        c.correction.reject_above_score = Some(11);
        assert!(c.validate().is_err());
        c.correction.reject_above_score = None;
        c.prompt_template = "no fields".into();
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("prompt_template"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        // typos should not silently fall back to defaults
        assert!(RunConfig::from_toml_str("sed = 1").is_err());
    }
}
