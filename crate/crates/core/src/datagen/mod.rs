//! Two-stage construction of curricular training data.
//!
//! Stage one prompts the generator as a student with the restricted action
//! set (no Verify, no Backtrack) and keeps the problems it solves correctly.
//! Stage two hands each wrong case back to the generator as a teacher —
//! with the reference answer and the full action set — and pairs every
//! successful correction with the original wrong trace. The right cases
//! feed `sft.jsonl`, the pairs feed `dpo.jsonl`, and `manifest.json`
//! records counts plus the training defaults the corpus is built for.

mod client;
mod prompts;

pub use client::{
    ChatMessage, GenerationRequest, GeneratorClient, GeneratorError, HttpGeneratorClient,
    MockGeneratorClient, MockScriptEntry,
};
pub use prompts::{action_list, PromptTemplates};

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::codec::{self, to_record, write_jsonl, TraceRecord};
use crate::eval::{normalize_answer, NormalizedAnswer};
use crate::state_space::Trace;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid rules: {0}")]
    InvalidRules(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
}

/// One training problem with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInstance {
    pub id: String,
    pub question: String,
    pub reference_answer: String,
}

/// Which construction stage produced a case's outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    StageI,
    StageII,
}

#[derive(Debug, Clone)]
pub enum AttemptVerdict {
    /// The response did not parse as a trace.
    ParseError(String),
    /// The trace parsed but broke the transition rules.
    Invalid(Vec<String>),
    /// The trace was legal but its answer missed the reference.
    WrongAnswer,
    Accepted,
    /// The generator itself failed (transport, protocol, exhausted script).
    Generator(String),
}

#[derive(Debug, Clone)]
pub struct AttemptRecord {
    pub raw_text: String,
    pub verdict: AttemptVerdict,
    pub extracted_answer: Option<String>,
}

/// Accepted/rejected solutions for the same question, ready for preference
/// training: the accepted trace is valid and answers correctly, the
/// rejected one is invalid or wrong.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub question: String,
    pub accepted: Trace,
    pub rejected: Trace,
}

#[derive(Debug, Clone)]
pub enum CaseOutcome {
    /// A legal stage-one trace whose answer matched the reference.
    Right(Trace),
    /// Best wrong attempt kept for stage-two correction.
    Wrong(Trace),
    /// Teacher correction succeeded; the pair is ready for training.
    Corrected(PreferencePair),
    Failed { cause: String },
}

/// One problem's passage through the pipeline.
#[derive(Debug, Clone)]
pub struct ConstructionCase {
    pub problem: ProblemInstance,
    pub stage: Stage,
    pub attempts: Vec<AttemptRecord>,
    pub outcome: CaseOutcome,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_max_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_timeout_secs() -> u64 {
    120
}

/// Connection and sampling settings for the generator. The credential is
/// deliberately absent: it comes from the environment, never from files or
/// flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default)]
    pub endpoint_url: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub student_template: Option<PathBuf>,
    #[serde(default)]
    pub teacher_template: Option<PathBuf>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_name: String::new(),
            temperature: default_temperature(),
            max_retries: default_max_retries(),
            parallelism: default_parallelism(),
            timeout_secs: default_timeout_secs(),
            student_template: None,
            teacher_template: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_retries < 1 {
            return Err(PipelineError::InvalidInput(
                "max_retries must be at least 1".to_string(),
            ));
        }
        if self.parallelism < 1 {
            return Err(PipelineError::InvalidInput(
                "parallelism must be at least 1".to_string(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(PipelineError::InvalidInput(
                "temperature must be a non-negative number".to_string(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)?;
        let config: Self = toml::from_str(&text)
            .map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// Run `f` over `items` with at most `parallelism` worker threads, returning
/// results in input order regardless of scheduling.
fn parallel_map_ordered<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                slots.lock().expect("slot lock never poisoned")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|slot| slot.expect("every index visited"))
        .collect()
}

fn normalized_gold(problem: &ProblemInstance) -> Result<NormalizedAnswer, String> {
    normalize_answer(&problem.reference_answer)
        .map_err(|e| format!("reference answer for {}: {e}", problem.id))
}

struct AttemptLoop<'a> {
    gen: &'a dyn GeneratorClient,
    config: &'a GeneratorConfig,
    rules: &'a crate::state_space::TransitionRules,
    gold: NormalizedAnswer,
}

struct AttemptResult {
    attempts: Vec<AttemptRecord>,
    accepted: Option<Trace>,
    last_parsed: Option<Trace>,
    generator_failure: Option<String>,
}

impl<'a> AttemptLoop<'a> {
    /// Up to `max_retries` independent attempts; stops early on acceptance
    /// or on a generator failure (which aborts this problem only).
    fn run(&self, problem_id: &str, prompt: &str, question: &str) -> AttemptResult {
        let mut result = AttemptResult {
            attempts: Vec::new(),
            accepted: None,
            last_parsed: None,
            generator_failure: None,
        };
        for _ in 0..self.config.max_retries {
            let request = GenerationRequest {
                problem_id: problem_id.to_string(),
                messages: vec![ChatMessage::user(prompt)],
                temperature: self.config.temperature,
            };
            let raw = match self.gen.complete(&request) {
                Ok(raw) => raw,
                Err(e) => {
                    result.attempts.push(AttemptRecord {
                        raw_text: String::new(),
                        verdict: AttemptVerdict::Generator(e.to_string()),
                        extracted_answer: None,
                    });
                    result.generator_failure = Some(e.to_string());
                    return result;
                }
            };
            let trace = match codec::parse_tagged(&raw, question) {
                Ok(trace) => trace,
                Err(e) => {
                    result.attempts.push(AttemptRecord {
                        raw_text: raw,
                        verdict: AttemptVerdict::ParseError(e.to_string()),
                        extracted_answer: None,
                    });
                    continue;
                }
            };
            let extracted = trace
                .final_answer
                .as_deref()
                .and_then(|a| normalize_answer(a).ok());
            let extracted_canonical = extracted.as_ref().map(|a| a.canonical());
            let verdict = crate::state_space::validate(&trace, self.rules);
            if !verdict.valid() {
                result.attempts.push(AttemptRecord {
                    raw_text: raw,
                    verdict: AttemptVerdict::Invalid(
                        verdict.violations.iter().map(|v| v.to_string()).collect(),
                    ),
                    extracted_answer: extracted_canonical,
                });
                result.last_parsed = Some(trace);
                continue;
            }
            if extracted.as_ref() == Some(&self.gold) {
                result.attempts.push(AttemptRecord {
                    raw_text: raw,
                    verdict: AttemptVerdict::Accepted,
                    extracted_answer: extracted_canonical,
                });
                result.accepted = Some(trace);
                return result;
            }
            result.attempts.push(AttemptRecord {
                raw_text: raw,
                verdict: AttemptVerdict::WrongAnswer,
                extracted_answer: extracted_canonical,
            });
            result.last_parsed = Some(trace);
        }
        result
    }
}

/// Stage one: the generator solves each problem as a student under the
/// restricted action set. Correct legal traces become `Right` cases; the
/// last parseable failure is kept as the `Wrong` case for stage two;
/// problems with no parseable attempt (or a generator failure) are `Failed`.
pub fn run_stage1(
    problems: &[ProblemInstance],
    gen: &dyn GeneratorClient,
    rules: &crate::state_space::TransitionRules,
    config: &GeneratorConfig,
    templates: &PromptTemplates,
) -> Result<Vec<ConstructionCase>, PipelineError> {
    if rules.allow_verify_backtrack {
        return Err(PipelineError::InvalidRules(
            "stage one requires the restricted action set (allow_verify_backtrack = false)"
                .to_string(),
        ));
    }
    config.validate()?;

    let cases = parallel_map_ordered(problems, config.parallelism, |problem| {
        let gold = match normalized_gold(problem) {
            Ok(gold) => gold,
            Err(cause) => {
                return ConstructionCase {
                    problem: problem.clone(),
                    stage: Stage::StageI,
                    attempts: Vec::new(),
                    outcome: CaseOutcome::Failed { cause },
                }
            }
        };
        let prompt = templates.render_student(&problem.question, rules);
        let looper = AttemptLoop { gen, config, rules, gold };
        let result = looper.run(&problem.id, &prompt, &problem.question);
        let outcome = if let Some(trace) = result.accepted {
            CaseOutcome::Right(trace)
        } else if let Some(cause) = result.generator_failure {
            CaseOutcome::Failed { cause }
        } else if let Some(trace) = result.last_parsed {
            CaseOutcome::Wrong(trace)
        } else {
            CaseOutcome::Failed {
                cause: "no attempt parsed as a trace".to_string(),
            }
        };
        ConstructionCase {
            problem: problem.clone(),
            stage: Stage::StageI,
            attempts: result.attempts,
            outcome,
        }
    });
    Ok(cases)
}

/// Stage two: each wrong case goes back to the generator as a teacher
/// prompt carrying the wrong trace, the reference answer, and the full
/// action list. A valid, correct correction yields a `Corrected` case
/// holding the preference pair; anything else is `Failed`.
pub fn run_stage2(
    wrong_cases: Vec<ConstructionCase>,
    gen: &dyn GeneratorClient,
    rules: &crate::state_space::TransitionRules,
    config: &GeneratorConfig,
    templates: &PromptTemplates,
) -> Result<Vec<ConstructionCase>, PipelineError> {
    if !rules.allow_verify_backtrack {
        return Err(PipelineError::InvalidRules(
            "stage two requires the full action set (allow_verify_backtrack = true)".to_string(),
        ));
    }
    config.validate()?;
    for case in &wrong_cases {
        if !matches!(case.outcome, CaseOutcome::Wrong(_)) {
            return Err(PipelineError::InvalidInput(format!(
                "stage two only consumes Wrong cases; {} is not one",
                case.problem.id
            )));
        }
    }

    let cases = parallel_map_ordered(&wrong_cases, config.parallelism, |case| {
        let wrong_trace = match &case.outcome {
            CaseOutcome::Wrong(trace) => trace,
            _ => unreachable!("checked above"),
        };
        let problem = &case.problem;
        let gold = match normalized_gold(problem) {
            Ok(gold) => gold,
            Err(cause) => {
                return ConstructionCase {
                    problem: problem.clone(),
                    stage: Stage::StageII,
                    attempts: Vec::new(),
                    outcome: CaseOutcome::Failed { cause },
                }
            }
        };
        let prompt = templates.render_teacher(
            &problem.question,
            rules,
            &crate::codec::serialize_tagged(wrong_trace),
            &gold.canonical(),
        );
        let looper = AttemptLoop { gen, config, rules, gold };
        let result = looper.run(&problem.id, &prompt, &problem.question);
        let outcome = if let Some(accepted) = result.accepted {
            CaseOutcome::Corrected(PreferencePair {
                question: problem.question.clone(),
                accepted,
                rejected: wrong_trace.clone(),
            })
        } else if let Some(cause) = result.generator_failure {
            CaseOutcome::Failed { cause }
        } else {
            CaseOutcome::Failed {
                cause: "no attempt produced a valid, correct correction".to_string(),
            }
        };
        ConstructionCase {
            problem: problem.clone(),
            stage: Stage::StageII,
            attempts: result.attempts,
            outcome,
        }
    });
    Ok(cases)
}

/// Wrap externally produced model predictions whose answer misses the
/// reference — or whose trace is illegal — as `Wrong` cases ready for
/// stage-two correction. Correct, legal predictions are dropped.
pub fn harvest_model_errors(
    predictions: Vec<(ProblemInstance, Trace)>,
    rules: &crate::state_space::TransitionRules,
) -> Vec<ConstructionCase> {
    predictions
        .into_iter()
        .filter_map(|(problem, trace)| {
            let gold = normalized_gold(&problem).ok()?;
            let answer = trace
                .final_answer
                .as_deref()
                .and_then(|a| normalize_answer(a).ok());
            let valid = crate::state_space::validate(&trace, rules).valid();
            if valid && answer.as_ref() == Some(&gold) {
                return None;
            }
            Some(ConstructionCase {
                problem,
                stage: Stage::StageI,
                attempts: Vec::new(),
                outcome: CaseOutcome::Wrong(trace),
            })
        })
        .collect()
}

/// One `dpo.jsonl` line: the question with its accepted and rejected traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub question: String,
    pub accepted: TraceRecord,
    pub rejected: TraceRecord,
}

/// Counts and provenance for one emitted dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub right_count: usize,
    pub pair_count: usize,
    pub failed_count: usize,
    pub hyperparameters: Map<String, Value>,
    pub generator: String,
    pub created_at: DateTime<Utc>,
}

/// Training defaults recorded alongside every dataset, so a corpus always
/// carries the configuration it was built for.
pub fn recorded_hyperparameters() -> Map<String, Value> {
    let mut map = Map::new();
    map.insert("lora_rank".to_string(), json!(16));
    map.insert("learning_rate".to_string(), json!(1.0e-4));
    map.insert("epochs".to_string(), json!(10));
    map.insert("optimizer".to_string(), json!("AdamW"));
    map.insert("lr_scheduler".to_string(), json!("cosine decay"));
    map.insert("batch_size".to_string(), json!(32));
    map
}

/// Write `sft.jsonl` (one trace record per `Right` case), `dpo.jsonl` (one
/// pair record per `Corrected` case), and `manifest.json` into `out_dir`,
/// preserving case order. Returns the manifest.
pub fn emit_datasets(
    cases: &[ConstructionCase],
    out_dir: &Path,
    generator: &str,
    created_at: DateTime<Utc>,
) -> Result<DatasetManifest, PipelineError> {
    fs::create_dir_all(out_dir)?;
    let mut sft_records = Vec::new();
    let mut pair_records = Vec::new();
    let mut failed_count = 0usize;
    for case in cases {
        match &case.outcome {
            CaseOutcome::Right(trace) => sft_records.push(to_record(trace)),
            CaseOutcome::Corrected(pair) => pair_records.push(PairRecord {
                question: pair.question.clone(),
                accepted: to_record(&pair.accepted),
                rejected: to_record(&pair.rejected),
            }),
            CaseOutcome::Failed { .. } => failed_count += 1,
            // Uncorrected Wrong cases belong in stage two, not in output files.
            CaseOutcome::Wrong(_) => {}
        }
    }
    write_jsonl(&out_dir.join("sft.jsonl"), &sft_records)?;
    write_jsonl(&out_dir.join("dpo.jsonl"), &pair_records)?;
    let manifest = DatasetManifest {
        right_count: sft_records.len(),
        pair_count: pair_records.len(),
        failed_count,
        hyperparameters: recorded_hyperparameters(),
        generator: generator.to_string(),
        created_at,
    };
    let mut manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| PipelineError::InvalidInput(e.to_string()))?;
    manifest_json.push('\n');
    fs::write(out_dir.join("manifest.json"), manifest_json)?;
    Ok(manifest)
}
