//! Converts generator text to traces and traces to dataset records.
//!
//! The interchange text format is line-oriented: every state opens with a
//! header line and owns the free text up to the next header.
//!
//! ```text
//! [ACTION: Formalize]
//! let x be the number of eggs
//! [ACTION: SolveSubques 2]
//! ...
//! [ACTION: Verify -> PASS]
//! ...
//! [ACTION: Backtrack -> 3]
//! ...
//! [ACTION: Summarize]
//! #### 72
//! ```
//!
//! Header kinds are case-sensitive and the spacing is fixed; anything that
//! starts with `[ACTION:` but does not match the grammar is a syntax error
//! with a 1-based line number. Parsing is purely structural — whether the
//! action order is legal is the validator's business, not the codec's.
//!
//! The JSON record format is the lossless image of a trace used in JSONL
//! dataset files; unknown fields are rejected rather than ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state_space::{build_trace, Action, ActionKind, StateNode, Trace, Verdict};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: [ACTION: {kind}] block has no content")]
    EmptyBlock { line: usize, kind: ActionKind },
    #[error("record schema: {0}")]
    Schema(String),
    #[error("{path}:{line}: {source}")]
    JsonLine {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const HEADER_PREFIX: &str = "[ACTION: ";

fn parse_header(line: &str, line_no: usize) -> Result<Action, CodecError> {
    let syntax = |message: String| CodecError::Syntax {
        line: line_no,
        message,
    };
    let inner = line
        .strip_prefix(HEADER_PREFIX)
        .and_then(|rest| rest.strip_suffix(']'))
        .ok_or_else(|| syntax(format!("malformed action header {line:?}")))?;
    match inner {
        "Formalize" => return Ok(Action::Formalize),
        "Decompose" => return Ok(Action::Decompose),
        "SolveParent" => return Ok(Action::SolveParent),
        "Summarize" => return Ok(Action::Summarize),
        "Verify -> PASS" => return Ok(Action::Verify { verdict: Verdict::Pass }),
        "Verify -> FAIL" => return Ok(Action::Verify { verdict: Verdict::Fail }),
        _ => {}
    }
    if let Some(rest) = inner.strip_prefix("SolveSubques ") {
        let subquestion_index: usize = rest
            .parse()
            .map_err(|_| syntax(format!("bad subquestion index {rest:?}")))?;
        if subquestion_index == 0 {
            return Err(syntax("subquestion indices start at 1".to_string()));
        }
        return Ok(Action::SolveSubques { subquestion_index });
    }
    if let Some(rest) = inner.strip_prefix("Backtrack -> ") {
        let target_index: usize = rest
            .parse()
            .map_err(|_| syntax(format!("bad backtrack target {rest:?}")))?;
        return Ok(Action::Backtrack { target_index });
    }
    Err(syntax(format!("unknown action {inner:?}")))
}

/// Parse tagged generator text into a trace for `question`.
///
/// Block contents are whitespace-trimmed; states are numbered in order of
/// appearance starting at 1. Fails with a located `Syntax` error on any
/// malformed header and with `EmptyBlock` when a header owns no text.
pub fn parse_tagged(raw: &str, question: &str) -> Result<Trace, CodecError> {
    let mut steps: Vec<(Action, String)> = Vec::new();
    let mut current: Option<(Action, usize, Vec<&str>)> = None;

    for (offset, line) in raw.lines().enumerate() {
        let line_no = offset + 1;
        if line.trim_start().starts_with(HEADER_PREFIX.trim_end()) {
            let action = parse_header(line.trim(), line_no)?;
            if let Some((prev_action, prev_line, body)) = current.take() {
                let content = body.join("\n").trim().to_string();
                if content.is_empty() {
                    return Err(CodecError::EmptyBlock {
                        line: prev_line,
                        kind: prev_action.kind(),
                    });
                }
                steps.push((prev_action, content));
            }
            current = Some((action, line_no, Vec::new()));
        } else if let Some((_, _, body)) = current.as_mut() {
            body.push(line);
        } else if !line.trim().is_empty() {
            return Err(CodecError::Syntax {
                line: line_no,
                message: format!("expected an [ACTION: ...] header, found {line:?}"),
            });
        }
    }

    match current.take() {
        Some((action, line_no, body)) => {
            let content = body.join("\n").trim().to_string();
            if content.is_empty() {
                return Err(CodecError::EmptyBlock {
                    line: line_no,
                    kind: action.kind(),
                });
            }
            steps.push((action, content));
        }
        None => {
            return Err(CodecError::Syntax {
                line: 1,
                message: "no action blocks found".to_string(),
            })
        }
    }

    build_trace(question, steps)
        .map_err(|e| CodecError::Schema(e.to_string()))
}

/// Render a trace in the canonical tagged-text form.
///
/// `parse_tagged(serialize_tagged(t), &t.question)` reproduces `t` for any
/// trace whose contents are trimmed, non-empty, and free of lines that look
/// like action headers — which is everything `build_trace` and
/// `parse_tagged` produce.
pub fn serialize_tagged(trace: &Trace) -> String {
    let mut blocks = Vec::with_capacity(trace.states.len());
    for state in &trace.states {
        if let Some(action) = state.action {
            blocks.push(format!("[ACTION: {action}]\n{}", state.content));
        }
    }
    blocks.join("\n")
}

/// JSON image of one state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_kind: Option<ActionKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subquestion_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_index: Option<usize>,
    pub content: String,
}

/// JSON image of a whole trace; one of these per line in JSONL files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub question: String,
    pub states: Vec<StateRecord>,
    pub final_answer: Option<String>,
}

pub fn to_record(trace: &Trace) -> TraceRecord {
    let states = trace
        .states
        .iter()
        .map(|state| {
            let mut record = StateRecord {
                index: state.index,
                action_kind: state.action.map(Action::kind),
                verdict: None,
                subquestion_index: None,
                target_index: None,
                content: state.content.clone(),
            };
            match state.action {
                Some(Action::Verify { verdict }) => record.verdict = Some(verdict),
                Some(Action::SolveSubques { subquestion_index }) => {
                    record.subquestion_index = Some(subquestion_index)
                }
                Some(Action::Backtrack { target_index }) => {
                    record.target_index = Some(target_index)
                }
                _ => {}
            }
            record
        })
        .collect();
    TraceRecord {
        question: trace.question.clone(),
        states,
        final_answer: trace.final_answer.clone(),
    }
}

fn action_from_record(record: &StateRecord) -> Result<Action, CodecError> {
    let schema = |message: String| CodecError::Schema(message);
    let kind = record.action_kind.ok_or_else(|| {
        schema(format!("state {} is missing action_kind", record.index))
    })?;
    let forbid = |field: &str, present: bool| -> Result<(), CodecError> {
        if present {
            Err(schema(format!(
                "state {}: {field} is not legal on {kind}",
                record.index
            )))
        } else {
            Ok(())
        }
    };
    forbid("verdict", kind != ActionKind::Verify && record.verdict.is_some())?;
    forbid(
        "subquestion_index",
        kind != ActionKind::SolveSubques && record.subquestion_index.is_some(),
    )?;
    forbid(
        "target_index",
        kind != ActionKind::Backtrack && record.target_index.is_some(),
    )?;
    match kind {
        ActionKind::Formalize => Ok(Action::Formalize),
        ActionKind::Decompose => Ok(Action::Decompose),
        ActionKind::SolveParent => Ok(Action::SolveParent),
        ActionKind::Summarize => Ok(Action::Summarize),
        ActionKind::Verify => {
            let verdict = record.verdict.ok_or_else(|| {
                schema(format!("state {}: Verify requires a verdict", record.index))
            })?;
            Ok(Action::Verify { verdict })
        }
        ActionKind::SolveSubques => {
            let subquestion_index = record.subquestion_index.ok_or_else(|| {
                schema(format!(
                    "state {}: SolveSubques requires subquestion_index",
                    record.index
                ))
            })?;
            if subquestion_index == 0 {
                return Err(schema(format!(
                    "state {}: subquestion indices start at 1",
                    record.index
                )));
            }
            Ok(Action::SolveSubques { subquestion_index })
        }
        ActionKind::Backtrack => {
            let target_index = record.target_index.ok_or_else(|| {
                schema(format!(
                    "state {}: Backtrack requires target_index",
                    record.index
                ))
            })?;
            Ok(Action::Backtrack { target_index })
        }
    }
}

/// Rebuild a trace from its record. Inverse of [`to_record`]; rejects
/// records whose shape cannot come from a well-formed trace.
pub fn from_record(record: &TraceRecord) -> Result<Trace, CodecError> {
    let schema = |message: String| CodecError::Schema(message);
    if record.states.is_empty() {
        return Err(schema("a trace record needs at least state 0".to_string()));
    }
    let mut states = Vec::with_capacity(record.states.len());
    for (i, state) in record.states.iter().enumerate() {
        if state.index != i {
            return Err(schema(format!(
                "state indices must be consecutive from 0; position {i} holds {}",
                state.index
            )));
        }
        let action = if i == 0 {
            if state.action_kind.is_some()
                || state.verdict.is_some()
                || state.subquestion_index.is_some()
                || state.target_index.is_some()
            {
                return Err(schema("state 0 carries no action".to_string()));
            }
            None
        } else {
            let action = action_from_record(state)?;
            if state.content.trim().is_empty() {
                return Err(schema(format!("state {i}: content must be non-empty")));
            }
            Some(action)
        };
        states.push(StateNode {
            index: i,
            action,
            content: state.content.clone(),
        });
    }
    Ok(Trace {
        question: record.question.clone(),
        states,
        final_answer: record.final_answer.clone(),
    })
}

/// Read a JSONL file: one record per line, blank lines rejected.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CodecError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (offset, line) in reader.lines().enumerate() {
        let line = line?;
        items.push(
            serde_json::from_str(&line).map_err(|source| CodecError::JsonLine {
                path: path.display().to_string(),
                line: offset + 1,
                source,
            })?,
        );
    }
    Ok(items)
}

/// Write items as JSONL: UTF-8, `\n` separators, no BOM.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CodecError> {
    let mut file = File::create(path)?;
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| CodecError::Schema(e.to_string()))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}
