//! Evaluation metrics: accuracy over answered questions, answer rate, AUROC
//! and behavior-shift counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::CorrectnessLabel;

/// What happened to a question: answered correctly, answered wrongly, or refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Correct,
    Incorrect,
    Rejected,
}

impl Decision {
    pub fn answered(self) -> bool {
        self != Decision::Rejected
    }

    pub fn from_label(label: CorrectnessLabel) -> Self {
        match label {
            CorrectnessLabel::Correct => Decision::Correct,
            CorrectnessLabel::Incorrect => Decision::Incorrect,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorShift {
    pub true2false: usize,
    pub true2unknown: usize,
    pub false2true: usize,
    pub false2unknown: usize,
}

impl BehaviorShift {
    pub fn total(&self) -> usize {
        self.true2false + self.true2unknown + self.false2true + self.false2unknown
    }
}

/// Counts status changes between aligned before/after decisions.
///
/// `before` must not contain rejections; unchanged questions land in no bucket.
pub fn behavior_shift(
    before: &[(String, Decision)],
    after: &[(String, Decision)],
) -> Result<BehaviorShift> {
    if before.len() != after.len() {
        return Err(Error::invalid(
            "behavior_shift",
            format!("{} before vs {} after", before.len(), after.len()),
        ));
    }
    let mut shift = BehaviorShift::default();
    for ((qb, b), (qa, a)) in before.iter().zip(after) {
        if qb != qa {
            return Err(Error::invalid(
                "behavior_shift",
                format!("question id mismatch: {qb} vs {qa}"),
            ));
        }
        match (b, a) {
            (Decision::Rejected, _) => {
                return Err(Error::invalid(
                    "behavior_shift",
                    format!("baseline for {qb} is a rejection"),
                ))
            }
            (Decision::Correct, Decision::Incorrect) => shift.true2false += 1,
            (Decision::Correct, Decision::Rejected) => shift.true2unknown += 1,
            (Decision::Incorrect, Decision::Correct) => shift.false2true += 1,
            (Decision::Incorrect, Decision::Rejected) => shift.false2unknown += 1,
            _ => {}
        }
    }
    Ok(shift)
}

/// Mann-Whitney numerator and denominator, both doubled so ties stay integral:
/// `(2 * #{correct < incorrect} + #{ties}, 2 * n_correct * n_incorrect)`.
pub fn auroc_counts(values: &[(f64, CorrectnessLabel)]) -> Result<(u64, u64)> {
    if let Some((v, _)) = values.iter().find(|(v, _)| !v.is_finite()) {
        return Err(Error::NonFinite(*v));
    }
    let n_correct = values.iter().filter(|(_, l)| l.is_correct()).count() as u64;
    let n_incorrect = values.len() as u64 - n_correct;
    if n_correct == 0 || n_incorrect == 0 {
        return Err(Error::AurocUndefined(
            "needs both correct and incorrect entries",
        ));
    }
    let mut sorted: Vec<&(f64, CorrectnessLabel)> = values.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of doubled average ranks (1-based) of the incorrect entries.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let doubled_rank = (i + 1 + j + 1) as u64;
        let incorrect_in_group = sorted[i..=j]
            .iter()
            .filter(|(_, l)| !l.is_correct())
            .count() as u64;
        doubled_rank_sum += doubled_rank * incorrect_in_group;
        i = j + 1;
    }
    let doubled_u = doubled_rank_sum - n_incorrect * (n_incorrect + 1);
    Ok((doubled_u, 2 * n_correct * n_incorrect))
}

/// Probability that a correct response has lower uncertainty than an incorrect
/// one, ties counting one half. O(n log n).
pub fn auroc(values: &[(f64, CorrectnessLabel)]) -> Result<f64> {
    let (num, den) = auroc_counts(values)?;
    Ok(num as f64 / den as f64)
}

/// `accuracy * answer_rate / 100`, all in percent.
pub fn acc_times_rate(accuracy: f64, answer_rate: f64) -> f64 {
    accuracy * answer_rate / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AurocInput {
    /// Raw uncertainty values before binning.
    #[default]
    Raw,
    /// Mapped integer scores.
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanScoreOver {
    #[default]
    Answered,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub auroc_input: AurocInput,
    pub mean_score_over: MeanScoreOver,
}

/// Per-question evaluation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question_id: String,
    /// Judge verdict on the original (pre-correction) answer.
    pub before: Decision,
    /// Outcome after correction.
    pub after: Decision,
    pub original_value: f64,
    pub original_score: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_score: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_questions: usize,
    pub n_answered: usize,
    pub n_correct_answered: usize,
    pub accuracy: Option<f64>,
    pub answer_rate: Option<f64>,
    pub acc_times_rate: Option<f64>,
    pub mean_uncertainty_score: Option<f64>,
    pub auroc: Option<f64>,
    pub behavior_shift: Option<BehaviorShift>,
}

impl EvalReport {
    /// Ratio fields from raw counts.
    pub fn from_counts(n_questions: usize, n_answered: usize, n_correct_answered: usize) -> Self {
        let accuracy =
            (n_answered > 0).then(|| 100.0 * n_correct_answered as f64 / n_answered as f64);
        let answer_rate = (n_questions > 0).then(|| 100.0 * n_answered as f64 / n_questions as f64);
        let acc_times_rate = match (accuracy, answer_rate) {
            (Some(a), Some(r)) => Some(acc_times_rate(a, r)),
            _ => None,
        };
        EvalReport {
            n_questions,
            n_answered,
            n_correct_answered,
            accuracy,
            answer_rate,
            acc_times_rate,
            mean_uncertainty_score: None,
            auroc: None,
            behavior_shift: None,
        }
    }
}

pub fn evaluate(items: &[EvalItem], options: EvalOptions) -> Result<EvalReport> {
    let n_answered = items.iter().filter(|i| i.after.answered()).count();
    let n_correct = items
        .iter()
        .filter(|i| i.after == Decision::Correct)
        .count();
    let mut report = EvalReport::from_counts(items.len(), n_answered, n_correct);

    let scores: Vec<u32> = items
        .iter()
        .filter(|i| match options.mean_score_over {
            MeanScoreOver::Answered => i.after.answered(),
            MeanScoreOver::All => true,
        })
        .map(|i| i.refined_score.unwrap_or(i.original_score))
        .collect();
    if !scores.is_empty() {
        report.mean_uncertainty_score =
            Some(scores.iter().map(|s| *s as f64).sum::<f64>() / scores.len() as f64);
    }

    let pairs: Vec<(f64, CorrectnessLabel)> = items
        .iter()
        .filter_map(|i| {
            let label = match i.before {
                Decision::Correct => CorrectnessLabel::Correct,
                Decision::Incorrect => CorrectnessLabel::Incorrect,
                Decision::Rejected => return None,
            };
            let v = match options.auroc_input {
                AurocInput::Raw => i.original_value,
                AurocInput::Score => i.original_score as f64,
            };
            Some((v, label))
        })
        .collect();
    report.auroc = match auroc(&pairs) {
        Ok(a) => Some(a),
        Err(Error::AurocUndefined(_)) => None,
        Err(e) => return Err(e),
    };

    if !items.is_empty() {
        let before: Vec<_> = items
            .iter()
            .map(|i| (i.question_id.clone(), i.before))
            .collect();
        let after: Vec<_> = items
            .iter()
            .map(|i| (i.question_id.clone(), i.after))
            .collect();
        report.behavior_shift = Some(behavior_shift(&before, &after)?);
    }
    Ok(report)
}

/// Column order of the results table.
pub const TABLE_HEADER: [&str; 6] = [
    "Method",
    "Accuracy",
    "Answer rate",
    "Accuracy*Answer rate",
    "Mean uncertainty score",
    "AUROC",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_owned(), |v| format!("{v:.1}"))
}

impl EvalReport {
    /// One results-table row; percentages to one decimal, AUROC in percent.
    pub fn table_row(&self, method: &str) -> [String; 6] {
        [
            method.to_owned(),
            cell(self.accuracy),
            cell(self.answer_rate),
            cell(self.acc_times_rate),
            cell(self.mean_uncertainty_score),
            cell(self.auroc.map(|a| a * 100.0)),
        ]
    }
}
