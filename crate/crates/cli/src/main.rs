use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use uacorrect_core::config::BackendKind;
use uacorrect_core::orchestrator::{self, Failure, RunSummary};
use uacorrect_core::trace::{self, QuestionFormat};
use uacorrect_core::{io, BinMap, Error, Result, RunConfig};

mod report;

pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const TABLE_FILE: &str = "table.csv";
pub const SHIFT_FILE: &str = "behavior_shift.csv";

#[derive(Parser, Debug)]
#[command(
    name = "uacorrect",
    version,
    about = "Uncertainty-aware answer correction pipeline"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding the run's artifacts.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Command-line overrides; each wins over the config file.
#[derive(clap::Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// min | avg | norm | log-sum
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// decision_sentence | full
    #[arg(long, global = true)]
    scope: Option<String>,
    /// top | chosen
    #[arg(long, global = true)]
    source: Option<String>,
    /// Number of bins.
    #[arg(long, global = true)]
    k: Option<u32>,
    /// mock | synthetic | http
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Responses per question during calibration.
    #[arg(long, global = true)]
    num_responses: Option<usize>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    max_tokens: Option<usize>,
    #[arg(long, global = true)]
    in_flight: Option<usize>,
    /// Reject without a correction call when the score exceeds this value.
    #[arg(long, global = true)]
    reject_above: Option<u32>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a SciQ-style question file and copy it into the run directory.
    Ingest {
        #[arg(long)]
        questions: PathBuf,
    },
    /// Sample answers for every question and record token traces.
    Generate {
        #[arg(long)]
        questions: Option<PathBuf>,
    },
    /// Compute one uncertainty value per traced response.
    Score {
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Fit the score bin map on a scores file.
    FitBins {
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Label answer sets and write the fine-tuning file.
    BuildSft {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        bins: Option<PathBuf>,
    },
    /// Run one correction round on the first response of each question.
    Correct {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        bins: Option<PathBuf>,
    },
    /// Compute accuracy, answer rate, AUROC and behavior shift from outcomes.
    Evaluate {
        #[arg(long)]
        outcomes: Option<PathBuf>,
    },
    /// Render report.json as a results table and a behavior-shift table (CSV).
    Report {
        #[arg(long)]
        report: Option<PathBuf>,
        /// Row label in the results table.
        #[arg(long, default_value = "uacorrect")]
        method: String,
    },
    /// Run a whole pipeline end to end.
    Run {
        #[arg(long, value_enum)]
        mode: RunMode,
        #[arg(long)]
        questions: PathBuf,
        /// Bin map from a calibration run (test mode).
        #[arg(long)]
        bins: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RunMode {
    Calibrate,
    Test,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Generate { .. } => "generate",
            Command::Score { .. } => "score",
            Command::FitBins { .. } => "fit-bins",
            Command::BuildSft { .. } => "build-sft",
            Command::Correct { .. } => "correct",
            Command::Evaluate { .. } => "evaluate",
            Command::Report { .. } => "report",
            Command::Run { .. } => "run",
        }
    }
}

fn parse_enum<T: DeserializeOwned>(field: &str, text: &str) -> Result<T> {
    serde_json::from_value(Value::String(text.to_owned()))
        .map_err(|_| Error::Config(format!("{field}: unrecognised value {text:?}")))
}

/// Default < config file < command line.
fn load_config(path: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => {
            let mut c = RunConfig::load(p)?;
            c.resolve_paths(p.parent().unwrap_or(Path::new(".")));
            c
        }
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = &o.estimator {
        c.estimator.kind = v
            .parse()
            .map_err(|_| Error::Config(format!("estimator: unrecognised value {v:?}")))?;
    }
    if let Some(v) = &o.scope {
        c.estimator.scope = parse_enum("scope", v)?;
    }
    if let Some(v) = &o.source {
        c.estimator.source = parse_enum("source", v)?;
    }
    if let Some(v) = o.k {
        c.binning.k = v;
    }
    if let Some(v) = &o.backend {
        c.backend.kind = parse_enum("backend", v)?;
    }
    if let Some(v) = &o.mock_script {
        c.backend.mock_script = Some(v.clone());
    }
    if o.endpoint.is_some() || o.model.is_some() {
        let http = c.backend.http.get_or_insert_with(Default::default);
        if let Some(v) = &o.endpoint {
            http.endpoint = v.clone();
        }
        if let Some(v) = &o.model {
            http.model = v.clone();
        }
    }
    if let Some(v) = o.num_responses {
        c.generation.num_responses = v;
    }
    if let Some(v) = o.temperature {
        c.generation.temperature = v;
    }
    if let Some(v) = o.max_tokens {
        c.generation.max_tokens = v;
    }
    if let Some(v) = o.in_flight {
        c.backend.in_flight = v;
    }
    if let Some(v) = o.reject_above {
        c.correction.reject_above_score = Some(v);
    }
    Ok(c)
}

/// Settles which config a command needs validated: stages that never touch a
/// backend accept configs without one.
fn validate_for(c: &RunConfig, needs_backend: bool) -> Result<()> {
    if needs_backend {
        return c.validate();
    }
    let mut relaxed = c.clone();
    if relaxed.backend.kind == BackendKind::Mock && relaxed.backend.mock_script.is_none() {
        relaxed.backend.kind = BackendKind::Synthetic;
    }
    relaxed.validate()
}

struct Outcome {
    files: Vec<PathBuf>,
    failures: Vec<Failure>,
    details: Value,
    /// Every question failed on the backend.
    backend_down: bool,
}

impl Outcome {
    fn files(files: Vec<PathBuf>, details: Value) -> Self {
        Outcome {
            files,
            failures: Vec::new(),
            details,
            backend_down: false,
        }
    }

    fn from_summary(s: RunSummary) -> Self {
        let backend_down = s.n_questions > 0 && s.n_completed == 0 && !s.failures.is_empty();
        let mut details = json!({"n_questions": s.n_questions, "n_completed": s.n_completed});
        if let Some(n) = s.sft_records {
            details["sft_records"] = json!(n);
        }
        if let Some(r) = &s.report {
            details["report"] = json!(r);
        }
        Outcome {
            files: s.files,
            failures: s.failures,
            details,
            backend_down,
        }
    }
}

struct Ctx {
    config: RunConfig,
    run_dir: PathBuf,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.run_dir.join(default))
    }

    fn require(&self, given: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let p = self.path(given, default);
        if !p.is_file() {
            return Err(Error::invalid(
                "inputs",
                format!("{} not found; run the upstream stage first", p.display()),
            ));
        }
        Ok(p)
    }

    fn snapshot(&self) -> Result<PathBuf> {
        let p = self.run_dir.join(orchestrator::CONFIG_SNAPSHOT_FILE);
        io::write_atomic(&p, self.config.to_toml_string()?.as_bytes())?;
        Ok(p)
    }

    fn questions(&self, given: &Option<PathBuf>) -> Result<Vec<uacorrect_core::QuestionRecord>> {
        trace::parse_questions(&self.require(given, QUESTIONS_FILE)?, QuestionFormat::Sciq)
    }
}

fn execute(cmd: &Command, ctx: &Ctx) -> Result<Outcome> {
    let c = &ctx.config;
    let needs_backend = matches!(
        cmd,
        Command::Generate { .. } | Command::Correct { .. } | Command::Run { .. }
    );
    validate_for(c, needs_backend)?;
    std::fs::create_dir_all(&ctx.run_dir).map_err(|e| Error::io(&ctx.run_dir, e))?;

    match cmd {
        Command::Ingest { questions } => {
            let qs = trace::parse_questions(questions, QuestionFormat::Sciq)?;
            for q in &qs {
                q.validate()?;
            }
            let out = ctx.run_dir.join(QUESTIONS_FILE);
            let rows: Vec<Value> = qs.iter().map(|q| q.to_sciq_value()).collect();
            io::write_jsonl(&out, &rows)?;
            Ok(Outcome::files(vec![out], json!({"n_questions": qs.len()})))
        }
        Command::Generate { questions } => {
            let qs = ctx.questions(questions)?;
            let gateway = c.build_gateway(&qs)?;
            let (sets, failures) =
                orchestrator::generate_answer_sets(&qs, c, c.generation.num_responses, &gateway);
            let responses: Vec<_> = sets
                .iter()
                .flat_map(|s| s.responses.iter().cloned())
                .collect();
            let out = ctx.run_dir.join(orchestrator::TRACES_FILE);
            trace::write_traces(&out, &responses)?;
            let backend_down = !qs.is_empty() && sets.is_empty();
            Ok(Outcome {
                files: vec![ctx.snapshot()?, out],
                details: json!({"n_questions": qs.len(), "n_completed": sets.len(), "n_responses": responses.len()}),
                failures,
                backend_down,
            })
        }
        Command::Score { traces } => {
            let responses = trace::parse_traces(&ctx.require(traces, orchestrator::TRACES_FILE)?)?;
            // refuses gapped or duplicated answer sets
            trace::group_answer_sets(responses.clone())?;
            let values = orchestrator::score_responses(&responses, &c.estimator)?;
            let out = ctx.run_dir.join(orchestrator::SCORES_FILE);
            io::write_jsonl(&out, &values)?;
            Ok(Outcome::files(
                vec![ctx.snapshot()?, out],
                json!({"estimator": c.estimator.kind, "n_values": values.len()}),
            ))
        }
        Command::FitBins { scores } => {
            let values = io::read_jsonl(&ctx.require(scores, orchestrator::SCORES_FILE)?)?;
            let bins = orchestrator::fit_bins(&values, c)?;
            let out = ctx.run_dir.join(orchestrator::BINMAP_FILE);
            bins.save(&out)?;
            Ok(Outcome::files(
                vec![ctx.snapshot()?, out],
                json!({"k": bins.k, "boundaries": bins.boundaries.len(), "fit_count": bins.fit_count}),
            ))
        }
        Command::BuildSft {
            questions,
            traces,
            scores,
            bins,
        } => {
            let qs = ctx.questions(questions)?;
            let responses = trace::parse_traces(&ctx.require(traces, orchestrator::TRACES_FILE)?)?;
            let sets = trace::group_answer_sets(responses)?;
            let values = io::read_jsonl(&ctx.require(scores, orchestrator::SCORES_FILE)?)?;
            let bins = BinMap::load(&ctx.require(bins, orchestrator::BINMAP_FILE)?)?;
            let judge = c.build_judge()?;
            let (records, failures) =
                orchestrator::build_sft_dataset(&qs, &sets, &values, &bins, &judge, c)?;
            let out = ctx.run_dir.join(orchestrator::SFT_FILE);
            io::write_jsonl(&out, &orchestrator::sft_lines(&records, &c.prompt_template))?;
            Ok(Outcome {
                files: vec![ctx.snapshot()?, out],
                details: json!({"sft_records": records.len()}),
                failures,
                backend_down: false,
            })
        }
        Command::Correct {
            questions,
            traces,
            bins,
        } => {
            let qs = ctx.questions(questions)?;
            let responses = trace::parse_traces(&ctx.require(traces, orchestrator::TRACES_FILE)?)?;
            let originals: Vec<_> = trace::group_answer_sets(responses)?
                .into_iter()
                .filter_map(|s| s.responses.into_iter().next())
                .collect();
            let bins = BinMap::load(&ctx.require(bins, orchestrator::BINMAP_FILE)?)?;
            let gateway = c.build_gateway(&qs)?;
            let judge = c.build_judge()?;
            let (outcomes, mut failures) =
                orchestrator::correct_all(&qs, &originals, &bins, c, &gateway, &judge)?;
            failures.extend(outcomes.iter().filter_map(|o| {
                o.error.as_ref().map(|e| Failure {
                    question_id: o.question_id.clone(),
                    stage: "correct".into(),
                    error: e.clone(),
                })
            }));
            let out = ctx.run_dir.join(orchestrator::OUTCOMES_FILE);
            io::write_jsonl(&out, &outcomes)?;
            let backend_down = !outcomes.is_empty() && outcomes.iter().all(|o| o.error.is_some());
            Ok(Outcome {
                files: vec![ctx.snapshot()?, out],
                details: json!({"n_outcomes": outcomes.len()}),
                failures,
                backend_down,
            })
        }
        Command::Evaluate { outcomes } => {
            let outcomes =
                orchestrator::read_outcomes(&ctx.require(outcomes, orchestrator::OUTCOMES_FILE)?)?;
            let report = orchestrator::evaluate_outcomes(&outcomes, c.eval)?;
            let out = ctx.run_dir.join(orchestrator::REPORT_FILE);
            io::write_json(&out, &report)?;
            Ok(Outcome::files(vec![out], json!({"report": report})))
        }
        Command::Report { report, method } => {
            let r = io::read_json(&ctx.require(report, orchestrator::REPORT_FILE)?)?;
            let table = ctx.run_dir.join(TABLE_FILE);
            io::write_atomic(&table, report::results_csv(&r, method)?.as_bytes())?;
            let shift = ctx.run_dir.join(SHIFT_FILE);
            io::write_atomic(&shift, report::shift_csv(&r, method)?.as_bytes())?;
            Ok(Outcome::files(
                vec![table, shift],
                json!({"method": method}),
            ))
        }
        Command::Run {
            mode,
            questions,
            bins,
        } => {
            let qs = trace::parse_questions(questions, QuestionFormat::Sciq)?;
            let gateway = c.build_gateway(&qs)?;
            let judge = c.build_judge()?;
            let summary = match mode {
                RunMode::Calibrate => {
                    orchestrator::run_calibrate(&qs, c, &gateway, &judge, &ctx.run_dir)?
                }
                RunMode::Test => {
                    let path = bins
                        .as_ref()
                        .ok_or_else(|| Error::Config("--bins is required in test mode".into()))?;
                    let bins = BinMap::load(path)?;
                    orchestrator::run_test(&qs, c, &bins, &gateway, &judge, &ctx.run_dir)?
                }
            };
            Ok(Outcome::from_summary(summary))
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    let cli = Cli::parse();
    let name = cli.command.name();
    let result = load_config(cli.config.as_deref(), &cli.overrides).and_then(|config| {
        let ctx = Ctx {
            config,
            run_dir: cli.run_dir.clone(),
        };
        execute(&cli.command, &ctx)
    });

    let (code, summary) = match result {
        Ok(o) => {
            let (code, status) = if o.backend_down {
                (2, "backend_failure")
            } else if o.failures.is_empty() {
                (0, "ok")
            } else {
                (3, "partial")
            };
            (
                code,
                json!({
                    "command": name,
                    "status": status,
                    "files": o.files,
                    "failures": o.failures,
                    "details": o.details,
                }),
            )
        }
        Err(e) => {
            eprintln!("error: {e}");
            let (code, status) = if e.is_backend() {
                (2, "backend_failure")
            } else {
                (1, "invalid")
            };
            (
                code,
                json!({"command": name, "status": status, "error": e.to_string()}),
            )
        }
    };
    println!("{summary}");
    ExitCode::from(code)
}
