//! Prompt templates for the two construction stages.
//!
//! Templates are plain text files with `{question}`, `{action_list}`,
//! `{wrong_trace}`, and `{reference_answer}` placeholders, so operators can
//! tune the wording without touching code. The shipped defaults live under
//! `templates/`.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::state_space::{ActionKind, TransitionRules};

const DEFAULT_STUDENT: &str = include_str!("../../templates/student.txt");
const DEFAULT_TEACHER: &str = include_str!("../../templates/teacher.txt");

/// One line per action: what it does and the exact header form to emit.
pub fn action_list(rules: &TransitionRules) -> String {
    let mut out = String::new();
    for kind in ActionKind::ALL {
        if !rules.allow_verify_backtrack
            && matches!(kind, ActionKind::Verify | ActionKind::Backtrack)
        {
            continue;
        }
        let (description, header) = match kind {
            ActionKind::Formalize => (
                "restate the problem as variables, known values, and the relationships between them",
                "[ACTION: Formalize]",
            ),
            ActionKind::Decompose => (
                "split the problem into numbered subquestions",
                "[ACTION: Decompose]",
            ),
            ActionKind::SolveSubques => (
                "work out the answer to one numbered subquestion",
                "[ACTION: SolveSubques <k>]",
            ),
            ActionKind::SolveParent => (
                "work out the answer to the original question",
                "[ACTION: SolveParent]",
            ),
            ActionKind::Verify => (
                "check whether the step you just produced is correct",
                "[ACTION: Verify -> PASS] or [ACTION: Verify -> FAIL]",
            ),
            ActionKind::Backtrack => (
                "return to the last correct state after a failed check",
                "[ACTION: Backtrack -> <state index>]",
            ),
            ActionKind::Summarize => (
                "state the final answer",
                "[ACTION: Summarize]",
            ),
        };
        writeln!(out, "- {kind}: {description}. Header: {header}").expect("writing to String");
    }
    out.trim_end().to_string()
}

#[derive(Debug, Clone)]
pub struct PromptTemplates {
    student: String,
    teacher: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            student: DEFAULT_STUDENT.to_string(),
            teacher: DEFAULT_TEACHER.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Load overrides where given, keeping the shipped default otherwise.
    pub fn load(student: Option<&Path>, teacher: Option<&Path>) -> io::Result<Self> {
        Ok(Self {
            student: match student {
                Some(path) => fs::read_to_string(path)?,
                None => DEFAULT_STUDENT.to_string(),
            },
            teacher: match teacher {
                Some(path) => fs::read_to_string(path)?,
                None => DEFAULT_TEACHER.to_string(),
            },
        })
    }

    pub fn render_student(&self, question: &str, rules: &TransitionRules) -> String {
        self.student
            .replace("{action_list}", &action_list(rules))
            .replace("{question}", question)
    }

    pub fn render_teacher(
        &self,
        question: &str,
        rules: &TransitionRules,
        wrong_trace: &str,
        reference_answer: &str,
    ) -> String {
        self.teacher
            .replace("{action_list}", &action_list(rules))
            .replace("{question}", question)
            .replace("{wrong_trace}", wrong_trace)
            .replace("{reference_answer}", reference_answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restricted_action_list_omits_verify_and_backtrack() {
        let listing = action_list(&TransitionRules::stage1());
        assert!(!listing.contains("Verify"));
        assert!(!listing.contains("Backtrack"));
        assert!(listing.contains("Formalize"));
        assert!(listing.contains("Summarize"));
    }

    #[test]
    fn full_action_list_has_all_seven() {
        let listing = action_list(&TransitionRules::stage2());
        for kind in ActionKind::ALL {
            assert!(listing.contains(kind.name()), "missing {kind}");
        }
    }

    #[test]
    fn student_prompt_substitutes_placeholders() {
        let prompts = PromptTemplates::default();
        let rendered = prompts.render_student("How many eggs?", &TransitionRules::stage1());
        assert!(rendered.contains("How many eggs?"));
        assert!(rendered.contains("[ACTION: Formalize]"));
        assert!(!rendered.contains("{question}"));
        assert!(!rendered.contains("{action_list}"));
    }

    #[test]
    fn teacher_prompt_includes_the_wrong_trace_and_reference() {
        let prompts = PromptTemplates::default();
        let rendered = prompts.render_teacher(
            "How many eggs?",
            &TransitionRules::stage2(),
            "[ACTION: Formalize]\noops",
            "72",
        );
        assert!(rendered.contains("oops"));
        assert!(rendered.contains("72"));
        assert!(rendered.contains("Backtrack"));
    }
}
