//! Seeded synthetic questions and a generative mock model for offline runs.
//!
//! Correct answers get token probabilities from one range and incorrect
//! answers from another, so the uncertainty signal is known by construction.

use std::collections::HashMap;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    assemble_tokens, Backend, CompletionRequest, CompletionResult, MockScript, MockToken,
    RequestKey, Stage,
};
use crate::sft::question_rng;
use crate::trace::QuestionRecord;

const ADJECTIVES: &[&str] = &[
    "amber", "basalt", "cobalt", "dusky", "ember", "frosted", "granite", "hollow", "ivory",
    "jagged", "kelp", "lunar", "marsh", "nimble", "opal", "polar", "quartz", "russet", "solar",
    "tidal",
];
const NOUNS: &[&str] = &[
    "anther",
    "bract",
    "calyx",
    "dermis",
    "enzyme",
    "flagellum",
    "gamete",
    "hypha",
    "isotope",
    "jetstream",
    "keratin",
    "lichen",
    "mantle",
    "nucleus",
    "orbital",
    "plasma",
    "quasar",
    "ribosome",
    "stamen",
    "tendon",
];

/// Deterministic SciQ-shaped questions with two-word answers.
pub fn synthetic_questions(n: usize, seed: u64, id_prefix: &str) -> Vec<QuestionRecord> {
    (0..n)
        .map(|i| {
            let id = format!("{id_prefix}{i}");
            let mut rng = question_rng(seed, &id);
            let mut picks: Vec<String> = Vec::with_capacity(4);
            while picks.len() < 4 {
                let a = ADJECTIVES.choose(&mut rng).copied().unwrap_or("amber");
                let b = NOUNS.choose(&mut rng).copied().unwrap_or("anther");
                let cand = format!("{a} {b}");
                if !picks.contains(&cand) {
                    picks.push(cand);
                }
            }
            let correct_answer = picks.remove(0);
            QuestionRecord {
                question: format!("Which structure is described in synthetic item {i}?"),
                id,
                correct_answer,
                distractors: picks,
                support: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProfile {
    pub seed: u64,
    /// Probability that an answer names the gold option.
    pub p_correct: f64,
    /// Per-token probability range for decision-sentence tokens of correct answers.
    pub correct_range: (f64, f64),
    /// Same, for incorrect answers.
    pub incorrect_range: (f64, f64),
    /// Range for tokens after the first sentence.
    pub filler_range: (f64, f64),
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        SyntheticProfile {
            seed: 0,
            p_correct: 0.6,
            correct_range: (0.7, 1.0),
            incorrect_range: (0.2, 0.6),
            filler_range: (0.5, 1.0),
        }
    }
}

impl SyntheticProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo < hi && hi <= 1.0;
        if !(0.0..=1.0).contains(&self.p_correct)
            || !ok(self.correct_range)
            || !ok(self.incorrect_range)
            || !ok(self.filler_range)
        {
            return Err(Error::Config(
                "synthetic profile: ranges must satisfy 0 < lo < hi <= 1 and p_correct in [0, 1]"
                    .into(),
            ));
        }
        Ok(())
    }
}

pub struct SyntheticBackend {
    profile: SyntheticProfile,
    questions: HashMap<String, QuestionRecord>,
}

impl SyntheticBackend {
    pub fn new(profile: SyntheticProfile, questions: &[QuestionRecord]) -> Result<Self> {
        profile.validate()?;
        Ok(SyntheticBackend {
            profile,
            questions: questions
                .iter()
                .map(|q| (q.id.clone(), q.clone()))
                .collect(),
        })
    }

    /// Token rows the model emits for an answer request.
    pub fn answer_rows(&self, question_id: &str, response_index: usize) -> Result<Vec<MockToken>> {
        let q = self
            .questions
            .get(question_id)
            .ok_or_else(|| Error::Backend {
                backend: "synthetic".into(),
                message: format!("unknown question {question_id}"),
                retryable: false,
            })?;
        let key = RequestKey::answer(question_id, response_index).script_key();
        let mut rng = question_rng(self.profile.seed, &key);
        let correct = rng.random::<f64>() < self.profile.p_correct;
        let answer = if correct || q.distractors.is_empty() {
            q.correct_answer.as_str()
        } else {
            q.distractors
                .choose(&mut rng)
                .map(String::as_str)
                .unwrap_or("")
        };
        let range = if correct {
            self.profile.correct_range
        } else {
            self.profile.incorrect_range
        };

        let mut sentence: Vec<String> = ["The", " correct", " answer", " is", ":"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        sentence.extend(answer.split_whitespace().map(|w| format!(" {w}")));
        sentence.push(".".into());
        let filler = [" It", " follows", " from", " the", " question", "."];

        let mut rows = Vec::with_capacity(sentence.len() + filler.len());
        for t in sentence {
            rows.push(MockToken::new(t, rng.random_range(range.0..range.1)));
        }
        for t in filler {
            let (lo, hi) = self.profile.filler_range;
            rows.push(MockToken::new(t, rng.random_range(lo..hi)));
        }
        Ok(rows)
    }

    /// Pre-renders answer rows for every question into a static script.
    pub fn to_script(&self, ids: &[String], responses_per_question: usize) -> Result<MockScript> {
        let mut script = MockScript::default();
        for id in ids {
            for i in 0..responses_per_question {
                script.insert(&RequestKey::answer(id, i), self.answer_rows(id, i)?);
            }
        }
        Ok(script)
    }
}

impl Backend for SyntheticBackend {
    fn id(&self) -> &str {
        "synthetic"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult> {
        let rows = match request.key.stage {
            // the correction model keeps its original answer
            Stage::Answer | Stage::Correction => {
                self.answer_rows(&request.key.question_id, request.key.response_index)?
            }
            Stage::Judge => {
                return Err(Error::Backend {
                    backend: "synthetic".into(),
                    message: "synthetic backend does not act as a judge".into(),
                    retryable: false,
                })
            }
        };
        let (text, tokens) = assemble_tokens(
            rows.into_iter()
                .take(request.max_tokens)
                .map(|r| (r.token, r.p.ln(), r.p.ln())),
        );
        Ok(CompletionResult {
            text,
            tokens,
            backend_id: "synthetic".into(),
            latency: Duration::ZERO,
            top_degraded: false,
        })
    }
}
