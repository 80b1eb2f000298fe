//! The reasoning state space: actions, traces, and transition legality.
//!
//! A trace starts at state 0 (the question) and grows by one action per
//! state. Transition order follows a fixed automaton:
//!
//! - `Formalize` is the mandatory first action;
//! - an optional single `Decompose` may follow it, declaring subquestions
//!   as numbered lines in its content;
//! - zero or more `SolveSubques` steps answer declared subquestions;
//! - `SolveParent` answers the original question and must precede
//!   `Summarize`, the terminal action;
//! - `Verify` may follow any solving action and checks it; a failing
//!   `Verify` must be followed immediately by `Backtrack`, whose target is
//!   the most recent confirmed state (see [`backtrack_target`]); after a
//!   backtrack the walk resumes from that state's successors, and the
//!   abandoned states no longer constrain what comes next.
//!
//! Verify/Backtrack availability is gated by [`TransitionRules`], which is
//! how the restricted student action set differs from the full teacher set.

use std::collections::BTreeSet;
use std::fmt;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;

/// The seven action kinds, without their parameters.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum ActionKind {
    Formalize,
    Decompose,
    SolveSubques,
    SolveParent,
    Verify,
    Backtrack,
    Summarize,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::Formalize,
        ActionKind::Decompose,
        ActionKind::SolveSubques,
        ActionKind::SolveParent,
        ActionKind::Verify,
        ActionKind::Backtrack,
        ActionKind::Summarize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Formalize => "Formalize",
            ActionKind::Decompose => "Decompose",
            ActionKind::SolveSubques => "SolveSubques",
            ActionKind::SolveParent => "SolveParent",
            ActionKind::Verify => "Verify",
            ActionKind::Backtrack => "Backtrack",
            ActionKind::Summarize => "Summarize",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Outcome of a `Verify` action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
}

/// One action, with its parameter where the kind carries one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Formalize,
    Decompose,
    SolveSubques { subquestion_index: usize },
    SolveParent,
    Verify { verdict: Verdict },
    Backtrack { target_index: usize },
    Summarize,
}

impl Action {
    pub fn kind(self) -> ActionKind {
        match self {
            Action::Formalize => ActionKind::Formalize,
            Action::Decompose => ActionKind::Decompose,
            Action::SolveSubques { .. } => ActionKind::SolveSubques,
            Action::SolveParent => ActionKind::SolveParent,
            Action::Verify { .. } => ActionKind::Verify,
            Action::Backtrack { .. } => ActionKind::Backtrack,
            Action::Summarize => ActionKind::Summarize,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::SolveSubques { subquestion_index } => {
                write!(f, "SolveSubques {subquestion_index}")
            }
            Action::Verify { verdict: Verdict::Pass } => write!(f, "Verify -> PASS"),
            Action::Verify { verdict: Verdict::Fail } => write!(f, "Verify -> FAIL"),
            Action::Backtrack { target_index } => write!(f, "Backtrack -> {target_index}"),
            other => f.write_str(other.kind().name()),
        }
    }
}

/// One point in the solving process. State 0 carries the question and no
/// action; every later state records the action that produced it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateNode {
    pub index: usize,
    pub action: Option<Action>,
    pub content: String,
}

/// An ordered walk from the question to (when complete) a summarized answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub question: String,
    pub states: Vec<StateNode>,
    /// Canonical answer string, present iff a `Summarize` state exists.
    pub final_answer: Option<String>,
}

impl Trace {
    /// Number of action-bearing states (state 0 does not count).
    pub fn action_count(&self) -> usize {
        self.states.iter().filter(|s| s.action.is_some()).count()
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        self.states.iter().filter_map(|s| s.action)
    }

    /// True when the last state is a `Summarize`.
    pub fn is_complete(&self) -> bool {
        matches!(
            self.states.last().and_then(|s| s.action),
            Some(Action::Summarize)
        )
    }
}

pub const DEFAULT_MAX_SUBQUESTIONS: usize = 8;
pub const DEFAULT_MAX_STATES: usize = 64;

/// Which transitions are admissible. The restricted rule set (stage one of
/// data construction) removes `Verify` and `Backtrack` from play.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRules {
    pub allow_verify_backtrack: bool,
    /// Cap on `SolveSubques` indices when the `Decompose` content does not
    /// declare a parseable subquestion count.
    pub max_subquestions: usize,
    /// Cap on the number of action states; longer traces are runaway output.
    pub max_states: usize,
}

impl TransitionRules {
    /// Restricted action set: no Verify, no Backtrack.
    pub fn stage1() -> Self {
        Self {
            allow_verify_backtrack: false,
            max_subquestions: DEFAULT_MAX_SUBQUESTIONS,
            max_states: DEFAULT_MAX_STATES,
        }
    }

    /// Full action set.
    pub fn stage2() -> Self {
        Self {
            allow_verify_backtrack: true,
            max_subquestions: DEFAULT_MAX_SUBQUESTIONS,
            max_states: DEFAULT_MAX_STATES,
        }
    }
}

impl Default for TransitionRules {
    fn default() -> Self {
        Self::stage2()
    }
}

/// Why a transition (or the whole trace) is illegal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleCode {
    MissingInitialState,
    InitialStateHasAction,
    MissingAction,
    NonConsecutiveIndex,
    EmptyContent,
    TraceTooLong,
    ActionNotInStageSet,
    PrematureSummarize,
    IllegalTransition,
    UnknownSubquestion,
    BadBacktrackTarget,
    MissingSummarize,
    FinalAnswerInconsistent,
}

impl RuleCode {
    pub fn name(self) -> &'static str {
        match self {
            RuleCode::MissingInitialState => "MISSING_INITIAL_STATE",
            RuleCode::InitialStateHasAction => "INITIAL_STATE_HAS_ACTION",
            RuleCode::MissingAction => "MISSING_ACTION",
            RuleCode::NonConsecutiveIndex => "NON_CONSECUTIVE_INDEX",
            RuleCode::EmptyContent => "EMPTY_CONTENT",
            RuleCode::TraceTooLong => "TRACE_TOO_LONG",
            RuleCode::ActionNotInStageSet => "ACTION_NOT_IN_STAGE_SET",
            RuleCode::PrematureSummarize => "PREMATURE_SUMMARIZE",
            RuleCode::IllegalTransition => "ILLEGAL_TRANSITION",
            RuleCode::UnknownSubquestion => "UNKNOWN_SUBQUESTION",
            RuleCode::BadBacktrackTarget => "BAD_BACKTRACK_TARGET",
            RuleCode::MissingSummarize => "MISSING_SUMMARIZE",
            RuleCode::FinalAnswerInconsistent => "FINAL_ANSWER_INCONSISTENT",
        }
    }
}

impl fmt::Display for RuleCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub state_index: usize,
    pub rule: RuleCode,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "state {}: {} — {}", self.state_index, self.rule, self.message)
    }
}

/// Result of validating a complete trace. Valid iff no violations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationVerdict {
    pub violations: Vec<Violation>,
}

impl ValidationVerdict {
    pub fn valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rule(&self, rule: RuleCode) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateSpaceError {
    #[error("malformed trace prefix: {0}")]
    MalformedPrefix(String),
    #[error("a trace needs at least one step")]
    EmptySteps,
}

static ENUMERATED_LINE_RE: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"^\s*(\d+)\.").expect("static regex"));

/// Count the subquestions a `Decompose` content declares: lines beginning
/// `1.`, `2.`, ... must enumerate 1..=n in order, else the content is
/// unparseable and the rules' cap applies.
pub fn declared_subquestions(decompose_content: &str) -> Option<usize> {
    let mut numbers = Vec::new();
    for line in decompose_content.lines() {
        if let Some(caps) = ENUMERATED_LINE_RE.captures(line) {
            numbers.push(caps[1].parse::<usize>().ok()?);
        }
    }
    if numbers.is_empty() || numbers.iter().enumerate().any(|(i, &n)| n != i + 1) {
        return None;
    }
    Some(numbers.len())
}

/// Build a trace from a question and ordered `(action, content)` steps.
///
/// Contents are stored whitespace-trimmed (the canonical form the codec
/// round-trips). The final answer is extracted from the last `Summarize`
/// content. No validation happens here; callers validate explicitly.
pub fn build_trace(
    question: impl Into<String>,
    steps: Vec<(Action, String)>,
) -> Result<Trace, StateSpaceError> {
    if steps.is_empty() {
        return Err(StateSpaceError::EmptySteps);
    }
    let question = question.into();
    let mut states = Vec::with_capacity(steps.len() + 1);
    states.push(StateNode {
        index: 0,
        action: None,
        content: question.clone(),
    });
    let mut final_answer = None;
    for (offset, (action, content)) in steps.into_iter().enumerate() {
        let content = content.trim().to_string();
        if action == Action::Summarize {
            final_answer = eval::extract_final_answer(&content)
                .ok()
                .map(|a| a.canonical());
        }
        states.push(StateNode {
            index: offset + 1,
            action: Some(action),
            content,
        });
    }
    Ok(Trace {
        question,
        states,
        final_answer,
    })
}

/// Walks a trace left to right, maintaining the live path: the states that
/// are still in effect after backtracks truncated abandoned segments.
struct Walker<'a> {
    trace: &'a Trace,
    rules: &'a TransitionRules,
    live: Vec<usize>,
}

impl<'a> Walker<'a> {
    fn new(trace: &'a Trace, rules: &'a TransitionRules) -> Self {
        Self {
            trace,
            rules,
            live: vec![0],
        }
    }

    fn action_at(&self, state_index: usize) -> Option<Action> {
        self.trace.states[state_index].action
    }

    /// Action kinds that may extend the current live path (full rule set;
    /// stage gating happens in the callers).
    fn successors(&self) -> BTreeSet<ActionKind> {
        use ActionKind::*;
        let last = *self.live.last().expect("live path holds state 0");
        let kinds: &[ActionKind] = match self.action_at(last) {
            None => &[Formalize],
            Some(Action::Formalize) => &[Decompose, SolveParent],
            Some(Action::Decompose) => &[SolveSubques, SolveParent],
            Some(Action::SolveSubques { .. }) => &[SolveSubques, SolveParent, Verify],
            Some(Action::SolveParent) => &[Verify, Summarize],
            Some(Action::Verify { verdict: Verdict::Fail }) => &[Backtrack],
            Some(Action::Verify { verdict: Verdict::Pass }) => {
                let verified = self.live[self.live.len() - 2];
                match self.action_at(verified) {
                    Some(Action::SolveSubques { .. }) => &[SolveSubques, SolveParent],
                    Some(Action::SolveParent) => &[Summarize],
                    _ => &[],
                }
            }
            // Terminal, and backtrack states never stay on the live path.
            Some(Action::Summarize) | Some(Action::Backtrack { .. }) => &[],
        };
        kinds.iter().copied().collect()
    }

    /// Highest live index, below the state a failing Verify just rejected,
    /// whose correctness is established: state 0, a Formalize/Decompose
    /// restatement, or a solving state confirmed by a passing Verify.
    fn anchor(&self) -> Option<usize> {
        let n = self.live.len();
        // live ends [..., wrong_state, failing_verify]
        let mut j = n.checked_sub(3)?;
        loop {
            let s = self.live[j];
            let confirmed = match self.action_at(s) {
                None | Some(Action::Formalize) | Some(Action::Decompose) => true,
                Some(Action::SolveSubques { .. }) | Some(Action::SolveParent) => matches!(
                    self.action_at(self.live[j + 1]),
                    Some(Action::Verify { verdict: Verdict::Pass })
                ),
                _ => false,
            };
            if confirmed {
                return Some(s);
            }
            if j == 0 {
                return None;
            }
            j -= 1;
        }
    }

    /// Subquestion index cap from the live Decompose content, or the
    /// configured fallback when unparseable.
    fn subquestion_capacity(&self) -> usize {
        self.live
            .iter()
            .find(|&&s| matches!(self.action_at(s), Some(Action::Decompose)))
            .and_then(|&d| declared_subquestions(&self.trace.states[d].content))
            .unwrap_or(self.rules.max_subquestions)
    }

    /// Consume the action at `state_index`, reporting the violation when it
    /// cannot legally extend the live path.
    fn step(&mut self, state_index: usize) -> Result<(), Violation> {
        let action = self
            .action_at(state_index)
            .expect("structural scan rejected action-less states");
        let kind = action.kind();
        let legal = self.successors();
        if !legal.contains(&kind) {
            let legal_list = legal
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(", ");
            let rule = if kind == ActionKind::Summarize {
                RuleCode::PrematureSummarize
            } else {
                RuleCode::IllegalTransition
            };
            return Err(Violation {
                state_index,
                rule,
                message: format!("{kind} is not admissible here (legal: [{legal_list}])"),
            });
        }
        match action {
            Action::SolveSubques { subquestion_index } => {
                let capacity = self.subquestion_capacity();
                if subquestion_index == 0 || subquestion_index > capacity {
                    return Err(Violation {
                        state_index,
                        rule: RuleCode::UnknownSubquestion,
                        message: format!(
                            "subquestion {subquestion_index} was never introduced (1..={capacity})"
                        ),
                    });
                }
                self.live.push(state_index);
            }
            Action::Backtrack { target_index } => {
                let anchor = self.anchor().expect("Backtrack is only legal after Verify FAIL");
                if target_index != anchor {
                    return Err(Violation {
                        state_index,
                        rule: RuleCode::BadBacktrackTarget,
                        message: format!(
                            "must return to the last confirmed state {anchor}, not {target_index}"
                        ),
                    });
                }
                let position = self
                    .live
                    .iter()
                    .position(|&s| s == target_index)
                    .expect("anchor lies on the live path");
                self.live.truncate(position + 1);
            }
            _ => self.live.push(state_index),
        }
        Ok(())
    }
}

fn structural_violations(trace: &Trace) -> Vec<Violation> {
    let mut violations = Vec::new();
    if trace.states.is_empty() {
        violations.push(Violation {
            state_index: 0,
            rule: RuleCode::MissingInitialState,
            message: "a trace must start at state 0 (the question)".to_string(),
        });
        return violations;
    }
    for (i, state) in trace.states.iter().enumerate() {
        if state.index != i {
            violations.push(Violation {
                state_index: i,
                rule: RuleCode::NonConsecutiveIndex,
                message: format!("expected index {i}, found {}", state.index),
            });
        }
        if i == 0 {
            if state.action.is_some() {
                violations.push(Violation {
                    state_index: 0,
                    rule: RuleCode::InitialStateHasAction,
                    message: "state 0 holds the question, not an action".to_string(),
                });
            }
        } else if state.action.is_none() {
            violations.push(Violation {
                state_index: i,
                rule: RuleCode::MissingAction,
                message: "every state after 0 records the action that produced it".to_string(),
            });
        } else if state.content.trim().is_empty() {
            violations.push(Violation {
                state_index: i,
                rule: RuleCode::EmptyContent,
                message: "action states must carry reasoning text".to_string(),
            });
        }
    }
    violations
}

/// Validate a complete trace against the rules. Never errors: every problem
/// is reported as a violation in the verdict.
pub fn validate(trace: &Trace, rules: &TransitionRules) -> ValidationVerdict {
    let mut violations = structural_violations(trace);
    if !violations.is_empty() {
        return ValidationVerdict { violations };
    }

    let action_count = trace.states.len() - 1;
    if action_count > rules.max_states {
        violations.push(Violation {
            state_index: rules.max_states + 1,
            rule: RuleCode::TraceTooLong,
            message: format!("{action_count} actions exceed the cap of {}", rules.max_states),
        });
    }

    if !rules.allow_verify_backtrack {
        for state in &trace.states {
            if matches!(
                state.action,
                Some(Action::Verify { .. }) | Some(Action::Backtrack { .. })
            ) {
                violations.push(Violation {
                    state_index: state.index,
                    rule: RuleCode::ActionNotInStageSet,
                    message: format!(
                        "{} is outside the restricted action set",
                        state.action.expect("matched above").kind()
                    ),
                });
            }
        }
    }

    // The transition walk always uses the full rule set; the scan above is
    // the only difference between restricted and unrestricted validation.
    let full_rules = TransitionRules {
        allow_verify_backtrack: true,
        ..rules.clone()
    };
    let mut walker = Walker::new(trace, &full_rules);
    let mut walk_completed = true;
    for i in 1..trace.states.len() {
        if let Err(violation) = walker.step(i) {
            violations.push(violation);
            walk_completed = false;
            break;
        }
    }

    if walk_completed && !trace.is_complete() {
        violations.push(Violation {
            state_index: trace.states.len() - 1,
            rule: RuleCode::MissingSummarize,
            message: "a complete trace ends by stating the final answer".to_string(),
        });
    }

    let has_summarize = trace
        .states
        .iter()
        .any(|s| matches!(s.action, Some(Action::Summarize)));
    if has_summarize != trace.final_answer.is_some() {
        violations.push(Violation {
            state_index: trace.states.len() - 1,
            rule: RuleCode::FinalAnswerInconsistent,
            message: "final_answer must be present exactly when a Summarize state exists"
                .to_string(),
        });
    }

    ValidationVerdict { violations }
}

/// Action kinds that may legally extend `prefix` under `rules`.
///
/// Returns the empty set when the prefix itself is illegal (no extension
/// can repair it) or when it has already reached the state cap. Errors only
/// on structural malformation: non-consecutive indices or an existing
/// `Summarize` (the prefix is complete, nothing may follow).
pub fn legal_next_actions(
    prefix: &Trace,
    rules: &TransitionRules,
) -> Result<BTreeSet<ActionKind>, StateSpaceError> {
    let structural = structural_violations(prefix);
    if let Some(first) = structural.first() {
        return Err(StateSpaceError::MalformedPrefix(first.to_string()));
    }
    if prefix
        .states
        .iter()
        .any(|s| matches!(s.action, Some(Action::Summarize)))
    {
        return Err(StateSpaceError::MalformedPrefix(
            "the prefix already ends in Summarize".to_string(),
        ));
    }
    if prefix.states.len() - 1 >= rules.max_states {
        return Ok(BTreeSet::new());
    }

    let mut walker = Walker::new(prefix, rules);
    for i in 1..prefix.states.len() {
        let kind = prefix.states[i].action.expect("structural scan passed").kind();
        if !rules.allow_verify_backtrack
            && matches!(kind, ActionKind::Verify | ActionKind::Backtrack)
        {
            return Ok(BTreeSet::new());
        }
        if walker.step(i).is_err() {
            return Ok(BTreeSet::new());
        }
    }

    let mut successors = walker.successors();
    if !rules.allow_verify_backtrack {
        successors.remove(&ActionKind::Verify);
        successors.remove(&ActionKind::Backtrack);
    }
    Ok(successors)
}

/// The one legal target for a `Backtrack` extending `prefix`, or `None`
/// when the prefix does not end in a failing `Verify` (or is itself
/// illegal). Useful for generation tooling.
pub fn backtrack_target(prefix: &Trace) -> Option<usize> {
    if !structural_violations(prefix).is_empty() {
        return None;
    }
    let rules = TransitionRules::stage2();
    let mut walker = Walker::new(prefix, &rules);
    for i in 1..prefix.states.len() {
        walker.step(i).ok()?;
    }
    match prefix.states.last()?.action {
        Some(Action::Verify { verdict: Verdict::Fail }) => walker.anchor(),
        _ => None,
    }
}
