//! Toolkit for building and checking state-transition math reasoning data.
//!
//! A reasoning trace is an ordered walk through explicit solution states:
//! the initial state holds the question, every later state is produced by
//! one action from a fixed seven-action set, and a complete trace ends with
//! a `Summarize` state carrying the final answer. On top of that formalism
//! this crate provides:
//!
//! - [`state_space`]: the action set, trace types, and the transition rules
//!   that decide whether a trace is legal;
//! - [`codec`]: the tagged-text grammar generators emit and the JSON record
//!   format datasets are stored in;
//! - [`datagen`]: the two-stage construction pipeline that turns problems
//!   plus a generator endpoint into SFT corpora and DPO preference pairs;
//! - [`losses`]: next-token-prediction and DPO objectives as checked
//!   numerical functions with analytic gradients;
//! - [`eval`]: exact-rational answer normalization, maj@n voting, and
//!   report rendering against published reference accuracies.

pub mod codec;
pub mod datagen;
pub mod eval;
pub mod losses;
pub mod state_space;

pub use codec::{from_record, parse_tagged, serialize_tagged, to_record, TraceRecord};
pub use eval::{extract_final_answer, maj_at_n, normalize_answer, NormalizedAnswer};
pub use state_space::{
    build_trace, legal_next_actions, validate, Action, ActionKind, StateNode, Trace,
    TransitionRules, ValidationVerdict, Verdict,
};
