//! Calibration and test-time pipelines.
//!
//! Calibration: N answers per question -> uncertainties -> bin map -> labels
//! -> SFT records. Test: one answer per question -> score -> one correction
//! round -> evaluation.
//!
//! Every stage fans requests out through the [`Gateway`] and gathers results
//! back in input order, so persisted files are deterministic for a
//! deterministic backend.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binning::{BinMap, UncertaintyScore};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gateway::{CompletionRequest, Gateway, RequestKey, Stage};
use crate::io;
use crate::labeling::{CorrectnessLabel, Judge};
use crate::metrics::{evaluate, Decision, EvalItem, EvalOptions, EvalReport};
use crate::sft::{build_sft, render_prompt, SftLine, SftRecord};
use crate::trace::{self, AnswerSet, QuestionRecord, ResponseRecord, WireResponse};
use crate::uncertainty::{EstimatorConfig, UncertaintyValue};

pub const TRACES_FILE: &str = "traces.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const BINMAP_FILE: &str = "binmap.json";
pub const SFT_FILE: &str = "sft.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "run_config.toml";

/// A question dropped from a run, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub question_id: String,
    pub stage: String,
    pub error: String,
}

impl Failure {
    fn new(question_id: &str, stage: &str, error: impl ToString) -> Self {
        Failure {
            question_id: question_id.to_owned(),
            stage: stage.to_owned(),
            error: error.to_string(),
        }
    }
}

pub fn question_prompt(template: &str, question: &QuestionRecord) -> String {
    template.replace("{question}", &question.question)
}

/// Whitespace-collapsed prefix match against the rejection template.
pub fn is_rejection(text: &str, template: &str) -> bool {
    let collapse = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    let t = collapse(template);
    !t.is_empty() && collapse(text).starts_with(&t)
}

fn answer_request(config: &RunConfig, q: &QuestionRecord, index: usize) -> CompletionRequest {
    let mut req = CompletionRequest::new(
        RequestKey::answer(&q.id, index),
        question_prompt(&config.question_template, q),
        config.generation.temperature,
        config.generation.max_tokens,
    );
    req.top_logprobs_depth = config.backend.top_logprobs;
    req
}

/// Generates `n` answers per question. Questions with any failed or empty
/// completion are excluded and reported, never padded.
pub fn generate_answer_sets(
    questions: &[QuestionRecord],
    config: &RunConfig,
    n: usize,
    gateway: &Gateway,
) -> (Vec<AnswerSet>, Vec<Failure>) {
    let requests: Vec<CompletionRequest> = questions
        .iter()
        .flat_map(|q| (0..n).map(move |i| (q, i)))
        .map(|(q, i)| answer_request(config, q, i))
        .collect();
    let mut results = gateway.complete_many(&requests).into_iter();

    let mut sets = Vec::with_capacity(questions.len());
    let mut failures = Vec::new();
    for q in questions {
        let mut responses = Vec::with_capacity(n);
        let mut errors = Vec::new();
        for (key, result) in results.by_ref().take(n) {
            let response = result.and_then(|r| {
                if r.text.is_empty() {
                    Err(Error::invalid(key.script_key(), "empty completion"))
                } else {
                    r.into_response(&key.question_id, key.response_index)
                }
            });
            match response {
                Ok(r) => responses.push(r),
                Err(e) => errors.push(format!("response {}: {e}", key.response_index)),
            }
        }
        if errors.is_empty() {
            match AnswerSet::new(q.id.clone(), responses) {
                Ok(s) => sets.push(s),
                Err(e) => failures.push(Failure::new(&q.id, "generate", e)),
            }
        } else {
            let msg = if errors.len() == n {
                format!("all {n} completions failed: {}", errors.join("; "))
            } else {
                errors.join("; ")
            };
            failures.push(Failure::new(&q.id, "generate", msg));
        }
    }
    (sets, failures)
}

pub fn score_responses(
    responses: &[ResponseRecord],
    estimator: &EstimatorConfig,
) -> Result<Vec<UncertaintyValue>> {
    responses
        .iter()
        .map(|r| {
            estimator.score_response(r).map_err(|e| {
                Error::invalid(
                    format!("response {}/{}", r.question_id, r.response_index),
                    e.to_string(),
                )
            })
        })
        .collect()
}

/// Fits a bin map on every value of the configured estimator.
pub fn fit_bins(values: &[UncertaintyValue], config: &RunConfig) -> Result<BinMap> {
    let kind = config.estimator.kind;
    if let Some(v) = values.iter().find(|v| v.estimator != kind) {
        return Err(Error::invalid(
            "fit-bins",
            format!(
                "score file holds {} values but estimator is {kind}",
                v.estimator
            ),
        ));
    }
    let raw: Vec<f64> = values.iter().map(|v| v.value).collect();
    BinMap::fit_with(kind, &raw, config.binning.k, config.binning.strategy)
}

fn value_index(values: &[UncertaintyValue]) -> HashMap<(&str, usize), &UncertaintyValue> {
    values
        .iter()
        .map(|v| ((v.question_id.as_str(), v.response_index), v))
        .collect()
}

fn check_bins_match(bins: &BinMap, config: &RunConfig) -> Result<()> {
    if bins.estimator != config.estimator.kind {
        return Err(Error::Config(format!(
            "bin map was fitted for estimator {} but the run uses {}",
            bins.estimator, config.estimator.kind
        )));
    }
    Ok(())
}

/// Labels every answer set and turns it into SFT records.
pub fn build_sft_dataset(
    questions: &[QuestionRecord],
    sets: &[AnswerSet],
    values: &[UncertaintyValue],
    bins: &BinMap,
    judge: &Judge,
    config: &RunConfig,
) -> Result<(Vec<SftRecord>, Vec<Failure>)> {
    check_bins_match(bins, config)?;
    let by_id: HashMap<&str, &QuestionRecord> =
        questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let values = value_index(values);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for set in sets {
        let Some(q) = by_id.get(set.question_id.as_str()) else {
            return Err(Error::invalid(
                "build-sft",
                format!("traces reference unknown question {}", set.question_id),
            ));
        };
        let mut scores = Vec::with_capacity(set.len());
        for r in &set.responses {
            let v = values
                .get(&(r.question_id.as_str(), r.response_index))
                .ok_or_else(|| {
                    Error::invalid(
                        "build-sft",
                        format!("no score for {}/{}", r.question_id, r.response_index),
                    )
                })?;
            scores.push(bins.map(v.value)?);
        }
        let labels: Result<Vec<CorrectnessLabel>> = set
            .responses
            .iter()
            .map(|r| judge.label_response(r, q))
            .collect();
        match labels {
            Ok(labels) => records.extend(build_sft(
                q,
                set,
                &labels,
                &scores,
                &config.rejection_template,
                config.seed,
            )?),
            Err(e) => failures.push(Failure::new(&set.question_id, "label", e)),
        }
    }
    Ok((records, failures))
}

/// Persisted per-question result of the test-time pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub question_id: String,
    pub original: ResponseRecord,
    pub original_value: f64,
    pub original_score: UncertaintyScore,
    pub refined: ResponseRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined_score: Option<UncertaintyScore>,
    pub is_rejection: bool,
    /// Rejected by the client-side score gate; no correction call was made.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub gated: bool,
    /// Correction call failed; `refined` is the original response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub label_before: CorrectnessLabel,
    pub decision_after: Decision,
}

impl CorrectionOutcome {
    /// No behavior change: refined text equals the original.
    pub fn unchanged(&self) -> bool {
        self.refined.text == self.original.text
    }

    pub fn eval_item(&self) -> EvalItem {
        EvalItem {
            question_id: self.question_id.clone(),
            before: Decision::from_label(self.label_before),
            after: self.decision_after,
            original_value: self.original_value,
            original_score: self.original_score.score,
            refined_score: self.refined_score.map(|s| s.score),
        }
    }
}

fn rejection_response(question_id: &str, template: &str) -> Result<ResponseRecord> {
    ResponseRecord::from_token_logprobs(question_id, 0, &[(template, 0.0, 0.0)])
}

struct Scored<'a> {
    question: &'a QuestionRecord,
    original: &'a ResponseRecord,
    value: f64,
    score: UncertaintyScore,
}

/// Runs one correction round for each (question, original response) pair.
///
/// Exactly one completion is issued per question unless the score gate
/// rejects it first.
pub fn correct_all(
    questions: &[QuestionRecord],
    originals: &[ResponseRecord],
    bins: &BinMap,
    config: &RunConfig,
    gateway: &Gateway,
    judge: &Judge,
) -> Result<(Vec<CorrectionOutcome>, Vec<Failure>)> {
    check_bins_match(bins, config)?;
    let by_id: HashMap<&str, &QuestionRecord> =
        questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut failures = Vec::new();
    let mut scored = Vec::with_capacity(originals.len());
    for r in originals {
        let Some(q) = by_id.get(r.question_id.as_str()) else {
            return Err(Error::invalid(
                "correct",
                format!("trace references unknown question {}", r.question_id),
            ));
        };
        match config.estimator.score_response(r) {
            Ok(v) => scored.push(Scored {
                question: q,
                original: r,
                value: v.value,
                score: bins.map(v.value)?,
            }),
            Err(e) => failures.push(Failure::new(&r.question_id, "score", e)),
        }
    }

    let gate = config.correction.reject_above_score;
    let gated = |s: &Scored| gate.is_some_and(|t| s.score.score > t);
    let requests: Vec<CompletionRequest> = scored
        .iter()
        .filter(|s| !gated(s))
        .map(|s| {
            let mut req = CompletionRequest::new(
                RequestKey::answer(&s.question.id, s.original.response_index)
                    .with_stage(Stage::Correction),
                render_prompt(
                    &config.prompt_template,
                    &s.question.question,
                    &s.original.text,
                    s.score,
                ),
                config.generation.temperature,
                config.generation.max_tokens,
            );
            req.top_logprobs_depth = config.backend.top_logprobs;
            req
        })
        .collect();
    let mut results = gateway.complete_many(&requests).into_iter();

    let mut outcomes = Vec::with_capacity(scored.len());
    for s in &scored {
        let label_before = match judge.label_response(s.original, s.question) {
            Ok(l) => l,
            Err(e) => {
                failures.push(Failure::new(&s.question.id, "label", e));
                if !gated(s) {
                    results.next();
                }
                continue;
            }
        };
        let (refined, gate_hit, error) = if gated(s) {
            (
                rejection_response(&s.question.id, &config.rejection_template)?,
                true,
                None,
            )
        } else {
            let (_, result) = results
                .next()
                .ok_or_else(|| Error::invalid("correct", "missing correction result"))?;
            match result.and_then(|r| r.into_response(&s.question.id, s.original.response_index)) {
                Ok(r) => (r, false, None),
                Err(e) => (s.original.clone(), false, Some(e.to_string())),
            }
        };
        let is_rej = is_rejection(&refined.text, &config.rejection_template);
        let refined_score = if is_rej || gate_hit {
            None
        } else {
            config
                .estimator
                .score_response(&refined)
                .ok()
                .map(|v| bins.map(v.value))
                .transpose()?
        };
        let decision_after = if is_rej {
            Decision::Rejected
        } else {
            match judge.label_response(&refined, s.question) {
                Ok(l) => Decision::from_label(l),
                Err(e) => {
                    failures.push(Failure::new(&s.question.id, "label", e));
                    continue;
                }
            }
        };
        outcomes.push(CorrectionOutcome {
            question_id: s.question.id.clone(),
            original: s.original.clone(),
            original_value: s.value,
            original_score: s.score,
            refined,
            refined_score,
            is_rejection: is_rej,
            gated: gate_hit,
            error,
            label_before,
            decision_after,
        });
    }
    Ok((outcomes, failures))
}

pub fn evaluate_outcomes(
    outcomes: &[CorrectionOutcome],
    options: EvalOptions,
) -> Result<EvalReport> {
    let items: Vec<EvalItem> = outcomes.iter().map(CorrectionOutcome::eval_item).collect();
    evaluate(&items, options)
}

pub fn read_outcomes(path: &Path) -> Result<Vec<CorrectionOutcome>> {
    io::read_jsonl(path)
}

pub fn sft_lines(records: &[SftRecord], template: &str) -> Vec<SftLine> {
    records.iter().map(|r| r.to_line(template)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Calibrate,
    Test,
}

/// Machine-readable result of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub n_questions: usize,
    pub n_completed: usize,
    pub failures: Vec<Failure>,
    pub files: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sft_records: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
}

impl RunSummary {
    pub fn partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

fn write_snapshot(dir: &Path, config: &RunConfig) -> Result<PathBuf> {
    let p = dir.join(CONFIG_SNAPSHOT_FILE);
    io::write_atomic(&p, config.to_toml_string()?.as_bytes())?;
    Ok(p)
}

fn sorted_responses(sets: &[AnswerSet]) -> Vec<ResponseRecord> {
    sets.iter()
        .flat_map(|s| s.responses.iter().cloned())
        .collect()
}

/// Calibration run: writes traces, scores, bin map, SFT file and a config snapshot.
pub fn run_calibrate(
    questions: &[QuestionRecord],
    config: &RunConfig,
    gateway: &Gateway,
    judge: &Judge,
    out_dir: &Path,
) -> Result<RunSummary> {
    config.validate()?;
    let (sets, mut failures) =
        generate_answer_sets(questions, config, config.generation.num_responses, gateway);
    let responses = sorted_responses(&sets);
    let values = score_responses(&responses, &config.estimator)?;

    let mut files = vec![write_snapshot(out_dir, config)?];
    let traces_path = out_dir.join(TRACES_FILE);
    trace::write_traces(&traces_path, &responses)?;
    files.push(traces_path);
    let scores_path = out_dir.join(SCORES_FILE);
    io::write_jsonl(&scores_path, &values)?;
    files.push(scores_path);

    let mut sft_count = None;
    if !values.is_empty() {
        let bins = fit_bins(&values, config)?;
        let bins_path = out_dir.join(BINMAP_FILE);
        bins.save(&bins_path)?;
        files.push(bins_path);

        let (records, label_failures) =
            build_sft_dataset(questions, &sets, &values, &bins, judge, config)?;
        failures.extend(label_failures);
        let sft_path = out_dir.join(SFT_FILE);
        io::write_jsonl(&sft_path, &sft_lines(&records, &config.prompt_template))?;
        files.push(sft_path);
        sft_count = Some(records.len());
    }

    let failed: std::collections::HashSet<&str> =
        failures.iter().map(|f| f.question_id.as_str()).collect();
    Ok(RunSummary {
        mode: Mode::Calibrate,
        n_questions: questions.len(),
        n_completed: questions.len() - failed.len(),
        failures,
        files,
        sft_records: sft_count,
        report: None,
    })
}

/// Test run: one answer per question, one correction round, evaluation report.
pub fn run_test(
    questions: &[QuestionRecord],
    config: &RunConfig,
    bins: &BinMap,
    gateway: &Gateway,
    judge: &Judge,
    out_dir: &Path,
) -> Result<RunSummary> {
    config.validate()?;
    check_bins_match(bins, config)?;
    let (sets, mut failures) = generate_answer_sets(questions, config, 1, gateway);
    let originals = sorted_responses(&sets);
    let values = score_responses(&originals, &config.estimator)?;
    let (outcomes, correct_failures) =
        correct_all(questions, &originals, bins, config, gateway, judge)?;
    failures.extend(correct_failures);
    failures.extend(outcomes.iter().filter_map(|o| {
        o.error
            .as_ref()
            .map(|e| Failure::new(&o.question_id, "correct", e))
    }));
    let report = evaluate_outcomes(&outcomes, config.eval)?;

    let mut files = vec![write_snapshot(out_dir, config)?];
    let p = out_dir.join(TRACES_FILE);
    trace::write_traces(&p, &originals)?;
    files.push(p);
    let p = out_dir.join(SCORES_FILE);
    io::write_jsonl(&p, &values)?;
    files.push(p);
    let p = out_dir.join(BINMAP_FILE);
    bins.save(&p)?;
    files.push(p);
    let p = out_dir.join(OUTCOMES_FILE);
    io::write_jsonl(&p, &outcomes)?;
    files.push(p);
    let p = out_dir.join(REPORT_FILE);
    io::write_json(&p, &report)?;
    files.push(p);

    Ok(RunSummary {
        mode: Mode::Test,
        n_questions: questions.len(),
        n_completed: outcomes.len(),
        failures,
        files,
        sft_records: None,
        report: Some(report),
    })
}

/// Re-reads a trace file written by a pipeline run in its wire form.
pub fn read_wire_traces(path: &Path) -> Result<Vec<WireResponse>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackendKind;
    use crate::gateway::{
        Backend, CompletionResult, MockBackend, MockScript, MockToken, RetryPolicy,
    };
    use crate::sft::Provenance;
    use crate::synthetic::synthetic_questions;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    fn synthetic_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.backend.kind = BackendKind::Synthetic;
        c.backend.retry.initial_backoff = Duration::from_millis(1);
        c.binning.k = 10;
        c
    }

    struct Counting<B> {
        inner: B,
        calls: AtomicUsize,
    }

    impl<B: Backend> Backend for Counting<B> {
        fn id(&self) -> &str {
            "counting"
        }
        fn complete(&self, r: &CompletionRequest) -> Result<CompletionResult> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(r)
        }
    }

    fn motor_question() -> QuestionRecord {
        QuestionRecord {
            id: "nerv".into(),
            question: "What type of response is generated when a stimulus is received by the nervous system?".into(),
            correct_answer: "motor response".into(),
            distractors: vec!["action potential".into(), "neural response".into(), "sensory response".into()],
            support: None,
        }
    }

    fn words(text: &str, p: f64) -> Vec<MockToken> {
        text.split_inclusive(' ')
            .map(|w| MockToken::new(w, p))
            .collect()
    }

    fn bins10() -> BinMap {
        let vals: Vec<f64> = (1..=50).map(|i| i as f64 / 10.0).collect();
        BinMap::fit(crate::uncertainty::EstimatorKind::LogSum, &vals, 10).unwrap()
    }

    fn mock_gateway(script: MockScript) -> Gateway {
        Gateway::new(
            Arc::new(MockBackend::new(script).unwrap()),
            RetryPolicy {
                attempts: 3,
                initial_backoff: Duration::from_millis(1),
            },
            2,
        )
    }

    #[test]
    fn answer_set_sizes() {
        let qs = synthetic_questions(3, 1, "q");
        let c = synthetic_config();
        let g = c.build_gateway(&qs).unwrap();
        let (sets, failures) = generate_answer_sets(&qs, &c, 5, &g);
        assert!(failures.is_empty());
        assert_eq!(sets.len(), 3);
        for s in &sets {
            let idx: Vec<usize> = s.responses.iter().map(|r| r.response_index).collect();
            assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        }
        let (sets, _) = generate_answer_sets(&qs[..1], &c, 1, &g);
        assert_eq!(sets[0].len(), 1);
    }

    #[test]
    fn unreachable_backend_isolates_questions() {
        let qs = synthetic_questions(2, 1, "q");
        let mut script = MockScript::default();
        for i in 0..2 {
            script.insert(&RequestKey::answer("q0", i), words("The answer.", 0.9));
        }
        // q1 has no script entries at all; q0 is fine
        let g = mock_gateway(script);
        let (sets, failures) = generate_answer_sets(&qs, &RunConfig::default(), 2, &g);
        assert_eq!(sets.len(), 1);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].question_id, "q1");
        assert!(failures[0].error.contains("all 2 completions failed"));
    }

    #[test]
    fn partial_failure_excludes_question() {
        let qs = synthetic_questions(1, 1, "q");
        let mut script = MockScript::default();
        script.insert(&RequestKey::answer("q0", 0), words("The answer.", 0.9));
        let g = mock_gateway(script);
        let (sets, failures) = generate_answer_sets(&qs, &RunConfig::default(), 2, &g);
        assert!(sets.is_empty());
        assert_eq!(failures.len(), 1);
    }

    fn correction_fixture(correction_text: &str) -> (QuestionRecord, ResponseRecord, MockScript) {
        let q = motor_question();
        let mut script = MockScript::default();
        script.insert(
            &RequestKey::answer(&q.id, 0).with_stage(Stage::Correction),
            words(correction_text, 0.95),
        );
        let original = ResponseRecord::from_token_logprobs(
            &q.id,
            0,
            &[("The correct answer is an action potential.", -2.0, -1.5)],
        )
        .unwrap();
        (q, original, script)
    }

    #[test]
    fn correction_to_right_answer() {
        let (q, original, script) = correction_fixture("The correct answer is: a motor response.");
        let (out, failures) = correct_all(
            &[q],
            &[original],
            &bins10(),
            &RunConfig::default(),
            &mock_gateway(script),
            &Judge::Heuristic,
        )
        .unwrap();
        assert!(failures.is_empty());
        let o = &out[0];
        assert_eq!(o.refined.text, "The correct answer is: a motor response.");
        assert!(!o.is_rejection);
        assert_eq!(o.label_before, CorrectnessLabel::Incorrect);
        assert_eq!(o.decision_after, Decision::Correct);
        assert!(o.refined_score.is_some());
        // 1.5 nats with boundaries at 0.59..4.51 -> between the 2nd and 3rd cut
        assert_eq!(o.original_score, bins10().map(1.5).unwrap());
    }

    #[test]
    fn correction_to_rejection() {
        let (q, original, script) = correction_fixture(
            "I am unable to answer the question due to a lack of relevant knowledge.",
        );
        let (out, _) = correct_all(
            &[q],
            &[original],
            &bins10(),
            &RunConfig::default(),
            &mock_gateway(script),
            &Judge::Heuristic,
        )
        .unwrap();
        assert!(out[0].is_rejection);
        assert_eq!(out[0].decision_after, Decision::Rejected);
        assert_eq!(out[0].refined_score, None);
    }

    #[test]
    fn fixed_point_correction_is_unchanged() {
        let (q, original, script) =
            correction_fixture("The correct answer is an action potential.");
        let (out, _) = correct_all(
            &[q],
            &[original],
            &bins10(),
            &RunConfig::default(),
            &mock_gateway(script),
            &Judge::Heuristic,
        )
        .unwrap();
        assert!(out[0].unchanged());
        assert_eq!(out[0].decision_after, Decision::Incorrect);
    }

    #[test]
    fn failed_correction_keeps_original() {
        let (q, original, _) = correction_fixture("");
        let (out, _) = correct_all(
            &[q],
            std::slice::from_ref(&original),
            &bins10(),
            &RunConfig::default(),
            &mock_gateway(MockScript::default()),
            &Judge::Heuristic,
        )
        .unwrap();
        assert_eq!(out[0].refined, original);
        assert!(out[0]
            .error
            .as_deref()
            .unwrap()
            .contains("no scripted response"));
    }

    #[test]
    fn gate_rejects_without_calling_backend() {
        let (q, original, script) = correction_fixture("The correct answer is: a motor response.");
        let backend = Arc::new(Counting {
            inner: MockBackend::new(script).unwrap(),
            calls: AtomicUsize::new(0),
        });
        let g = Gateway::new(backend.clone(), RetryPolicy::default(), 1);
        let mut c = RunConfig::default();
        c.correction.reject_above_score = Some(1);
        let (out, _) =
            correct_all(&[q], &[original], &bins10(), &c, &g, &Judge::Heuristic).unwrap();
        assert!(out[0].gated && out[0].is_rejection);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn estimator_mismatch_is_refused() {
        let (q, original, script) = correction_fixture("x");
        let mut c = RunConfig::default();
        c.estimator.kind = crate::uncertainty::EstimatorKind::Min;
        assert!(correct_all(
            &[q],
            &[original],
            &bins10(),
            &c,
            &mock_gateway(script),
            &Judge::Heuristic
        )
        .is_err());
    }

    #[test]
    fn test_mode_makes_two_calls_per_question() {
        let qs = synthetic_questions(7, 3, "t");
        let c = synthetic_config();
        let backend = Arc::new(Counting {
            inner: crate::synthetic::SyntheticBackend::new(c.backend.synthetic, &qs).unwrap(),
            calls: AtomicUsize::new(0),
        });
        let g = Gateway::new(backend.clone(), c.backend.retry, 3);
        let dir = tempfile::tempdir().unwrap();
        let s = run_test(&qs, &c, &bins10(), &g, &Judge::Heuristic, dir.path()).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 14);
        assert_eq!(s.n_completed, 7);
        for f in [
            TRACES_FILE,
            SCORES_FILE,
            BINMAP_FILE,
            OUTCOMES_FILE,
            REPORT_FILE,
            CONFIG_SNAPSHOT_FILE,
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn test_mode_on_no_questions() {
        let c = synthetic_config();
        let g = c.build_gateway(&[]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = run_test(&[], &c, &bins10(), &g, &Judge::Heuristic, dir.path()).unwrap();
        let r = s.report.clone().unwrap();
        assert_eq!(r.n_questions, 0);
        assert!(r.accuracy.is_none());
        assert!(!s.partial());
    }

    #[test]
    fn calibrate_writes_one_sft_record_per_response() {
        let qs = synthetic_questions(4, 2, "c");
        let c = synthetic_config();
        let g = c.build_gateway(&qs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let s = run_calibrate(&qs, &c, &g, &Judge::Heuristic, dir.path()).unwrap();
        assert_eq!(s.sft_records, Some(20));
        let lines: Vec<SftLine> = io::read_jsonl(&dir.path().join(SFT_FILE)).unwrap();
        assert_eq!(lines.len(), 20);
        assert!(lines
            .iter()
            .all(|l| l.prompt.contains("Uncertainty score:")));
        let traces = trace::parse_traces(&dir.path().join(TRACES_FILE)).unwrap();
        assert_eq!(traces.len(), 20);
        let bins = BinMap::load(&dir.path().join(BINMAP_FILE)).unwrap();
        assert_eq!(bins.boundaries.len(), 9);
        assert!(lines.iter().any(|l| l.provenance != Provenance::Rejected));
    }

    #[test]
    fn rejection_prefix_match() {
        let t = "I am unable to answer.";
        assert!(is_rejection("I  am unable\nto answer. Sorry.", t));
        assert!(!is_rejection("Yes, I am unable to answer.", t));
        assert!(!is_rejection("anything", "   "));
    }
}
