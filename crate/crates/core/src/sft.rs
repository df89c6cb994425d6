//! Uncertainty-labelled fine-tuning records.
//!
//! Per question: if no response in the answer set is correct, every target
//! becomes the rejection template. Otherwise correct responses keep their own
//! text and each incorrect one is retargeted to a correct response drawn at
//! random from the same set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binning::UncertaintyScore;
use crate::error::{Error, Result};
use crate::labeling::CorrectnessLabel;
use crate::trace::{AnswerSet, QuestionRecord};

pub const DEFAULT_REJECTION_TEMPLATE: &str =
    "I am unable to answer the question due to a lack of relevant knowledge.";

pub const DEFAULT_PROMPT_TEMPLATE: &str = "Question: {question}\nChoose a correct answer.\nPrevious answer: {response}\nUncertainty score: {score}\nRefine the answer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Kept,
    ReplacedWithCorrect,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftRecord {
    pub question_id: String,
    pub response_index: usize,
    pub input_question: String,
    pub input_response: String,
    pub input_score: UncertaintyScore,
    pub target: String,
    pub provenance: Provenance,
}

/// SFT file line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftLine {
    pub question_id: String,
    pub prompt: String,
    pub completion: String,
    pub provenance: Provenance,
    pub score: u32,
}

/// Fills `{question}`, `{response}` and `{score}` in a prompt template.
pub fn render_prompt(
    template: &str,
    question: &str,
    response: &str,
    score: UncertaintyScore,
) -> String {
    // single pass so placeholder-like text inside the inputs is left alone
    let mut out = String::with_capacity(template.len() + question.len() + response.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let (value, len) = if tail.starts_with("{question}") {
            (question.to_owned(), "{question}".len())
        } else if tail.starts_with("{response}") {
            (response.to_owned(), "{response}".len())
        } else if tail.starts_with("{score}") {
            (score.score.to_string(), "{score}".len())
        } else {
            ("{".to_owned(), 1)
        };
        out.push_str(&value);
        rest = &tail[len..];
    }
    out.push_str(rest);
    out
}

impl SftRecord {
    pub fn to_line(&self, prompt_template: &str) -> SftLine {
        SftLine {
            question_id: self.question_id.clone(),
            prompt: render_prompt(
                prompt_template,
                &self.input_question,
                &self.input_response,
                self.input_score,
            ),
            completion: self.target.clone(),
            provenance: self.provenance,
            score: self.input_score.score,
        }
    }
}

/// Generator seeded from `(seed, question_id)`, stable across platforms.
pub fn question_rng(seed: u64, question_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(question_id.as_bytes());
    let d = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&d);
    ChaCha8Rng::from_seed(key)
}

pub fn build_sft(
    question: &QuestionRecord,
    answer_set: &AnswerSet,
    labels: &[CorrectnessLabel],
    scores: &[UncertaintyScore],
    rejection_template: &str,
    seed: u64,
) -> Result<Vec<SftRecord>> {
    let ctx = || format!("answer set {}", answer_set.question_id);
    if answer_set.is_empty() {
        return Err(Error::invalid(ctx(), "empty answer set"));
    }
    if labels.len() != answer_set.len() || scores.len() != answer_set.len() {
        return Err(Error::invalid(
            ctx(),
            format!(
                "{} responses but {} labels and {} scores",
                answer_set.len(),
                labels.len(),
                scores.len()
            ),
        ));
    }
    if question.id != answer_set.question_id {
        return Err(Error::invalid(
            ctx(),
            format!("question record {} does not match", question.id),
        ));
    }

    let correct: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_correct())
        .map(|(i, _)| i)
        .collect();
    let mut rng = question_rng(seed, &answer_set.question_id);

    let records = answer_set
        .responses
        .iter()
        .zip(labels.iter().zip(scores))
        .map(|(resp, (label, score))| {
            let (target, provenance) = if correct.is_empty() {
                (rejection_template.to_owned(), Provenance::Rejected)
            } else if label.is_correct() {
                (resp.text.clone(), Provenance::Kept)
            } else {
                let pick = correct[rng.random_range(0..correct.len())];
                (
                    answer_set.responses[pick].text.clone(),
                    Provenance::ReplacedWithCorrect,
                )
            };
            SftRecord {
                question_id: resp.question_id.clone(),
                response_index: resp.response_index,
                input_question: question.question.clone(),
                input_response: resp.text.clone(),
                input_score: *score,
                target,
                provenance,
            }
        })
        .collect();
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::ResponseRecord;

    fn set(qid: &str, texts: &[&str]) -> AnswerSet {
        let rs = texts
            .iter()
            .enumerate()
            .map(|(i, t)| ResponseRecord::from_token_logprobs(qid, i, &[(t, -0.2, -0.1)]).unwrap())
            .collect();
        AnswerSet::new(qid, rs).unwrap()
    }

    fn q(id: &str) -> QuestionRecord {
        QuestionRecord {
            id: id.into(),
            question: "Q?".into(),
            correct_answer: "x".into(),
            distractors: vec!["y".into()],
            support: None,
        }
    }

    fn s(n: u32) -> UncertaintyScore {
        UncertaintyScore { score: n, k: 100 }
    }

    use CorrectnessLabel::{Correct as C, Incorrect as I};

    #[test]
    fn all_incorrect_rejects_everything() {
        let a = set(
            "mag",
            &[
                "The correct answer is \"southwest and southeast\".",
                "The correct answer is \"tropic and arctic\".",
                "The correct answer is \"southwest and southeast\".",
            ],
        );
        let out = build_sft(
            &q("mag"),
            &a,
            &[I, I, I],
            &[s(65), s(82), s(59)],
            "no idea",
            1,
        )
        .unwrap();
        assert_eq!(out.len(), 3);
        assert!(out
            .iter()
            .all(|r| r.provenance == Provenance::Rejected && r.target == "no idea"));
    }

    #[test]
    fn one_correct_replaces_the_rest() {
        let a = set(
            "olf",
            &[
                "The olfactory receptor neurons are located in the olfactory epithelium.",
                "The correct answer is between inferior nasal and posterior nasal.",
                "The correct answer is: the superior nasal cavity.",
            ],
        );
        let out = build_sft(&q("olf"), &a, &[I, I, C], &[s(96), s(45), s(51)], "no", 3).unwrap();
        let gold = "The correct answer is: the superior nasal cavity.";
        assert_eq!(out[0].target, gold);
        assert_eq!(out[1].target, gold);
        assert_eq!(out[2].target, gold);
        assert_eq!(out[0].provenance, Provenance::ReplacedWithCorrect);
        assert_eq!(out[2].provenance, Provenance::Kept);
        assert!(out.iter().all(|r| r.provenance != Provenance::Rejected));
    }

    #[test]
    fn all_correct_keeps_everything() {
        let a = set("k", &["a", "b"]);
        let out = build_sft(&q("k"), &a, &[C, C], &[s(1), s(2)], "no", 0).unwrap();
        assert!(out
            .iter()
            .all(|r| r.provenance == Provenance::Kept && r.target == r.input_response));
    }

    #[test]
    fn length_mismatch_and_empty_set() {
        let a = set("k", &["a", "b"]);
        assert!(build_sft(&q("k"), &a, &[C], &[s(1), s(2)], "no", 0).is_err());
        assert!(build_sft(&q("k"), &a, &[C, C], &[s(1)], "no", 0).is_err());
        let empty = AnswerSet::new("k", vec![]).unwrap();
        assert!(build_sft(&q("k"), &empty, &[], &[], "no", 0).is_err());
    }

    #[test]
    fn prompt_rendering() {
        let r = SftRecord {
            question_id: "1".into(),
            response_index: 0,
            input_question: "Why {score}?".into(),
            input_response: "Because.".into(),
            input_score: s(42),
            target: "T".into(),
            provenance: Provenance::Kept,
        };
        let line = r.to_line(DEFAULT_PROMPT_TEMPLATE);
        assert_eq!(
            line.prompt,
            "Question: Why {score}?\nChoose a correct answer.\nPrevious answer: Because.\nUncertainty score: 42\nRefine the answer."
        );
        assert_eq!(line.score, 42);
        let json = serde_json::to_string(&line).unwrap();
        assert!(json.contains("\"provenance\":\"kept\""));
    }

    #[test]
    fn rng_depends_on_seed_and_question() {
        let a: u64 = question_rng(1, "q").random();
        let b: u64 = question_rng(1, "q").random();
        let c: u64 = question_rng(2, "q").random();
        let d: u64 = question_rng(1, "r").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
