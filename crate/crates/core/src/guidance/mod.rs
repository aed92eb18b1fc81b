//! Teacher guidance for failed trajectories.
//!
//! A teacher sees the task, the failed patch and its stacktrace, and
//! answers with three sections: a plan, feedback on the environment's
//! verdict, and the location to edit. The reattempt block appends that hint
//! to a scaffold prompt; it is only ever used at training time.

mod teacher;

use serde::{Deserialize, Serialize};

use crate::evaluator::RewardRecord;
use crate::rollout::{BackendError, Trajectory};
use crate::task::Task;

pub use teacher::{guide_all, oracle_teacher, LlmTeacher, OracleTeacher, Teacher, TeacherBackend, ORACLE_TEACHER_ID};

/// Guidance-request prompt with `{repo}`, `{problem_statement}`, `{patch}`
/// and `{stacktrace_hint}` placeholders.
pub const GUIDANCE_REQUEST_TEMPLATE: &str = include_str!("../../templates/guidance_request.txt");
/// Block appended to a prompt for a guided reattempt; `{hint}` placeholder.
pub const REATTEMPT_TEMPLATE: &str = include_str!("../../templates/reattempt.txt");

pub const HINT_DELIMITER: &str = "### Hint ###";
pub const PLAN_HEADING: &str = "PLAN HINT";
pub const FEEDBACK_HEADING: &str = "ENVIRONMENT FEEDBACK HINT";
pub const INTERACTION_HEADING: &str = "ENVIRONMENT INTERACTION HINT";

pub const NO_STACKTRACE: &str = "(no stacktrace available)";
pub const EMPTY_PATCH: &str = "(empty patch)";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GuidanceError {
    #[error("guidance requested for a trajectory with reward {0}")]
    NotAFailure(u8),
    #[error("teacher response is missing the `{0}` section")]
    MissingHeading(&'static str),
    #[error("teacher response repeats the `{0}` section")]
    DuplicateHeading(&'static str),
    #[error("teacher response has an empty `{0}` section")]
    EmptySection(&'static str),
    #[error("environment interaction hint names no file or line: `{0}`")]
    NoLocation(String),
    #[error("prompt already contains a hint block")]
    AlreadyHinted,
    #[error("oracle teacher needs a synthetic task, got `{0}`")]
    NotSynthetic(String),
    #[error("teacher backend: {0}")]
    Backend(#[from] BackendError),
    #[error("teacher response unusable after retry: {0}")]
    RetriesExhausted(Box<GuidanceError>),
}

/// The three parsed sections of a teacher response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceSections {
    pub plan: String,
    pub env_feedback: String,
    pub env_interaction: String,
}

impl GuidanceSections {
    /// Sections under their headings, in template order.
    pub fn hint_text(&self) -> String {
        format!(
            "{PLAN_HEADING}: {}\n{FEEDBACK_HEADING}: {}\n{INTERACTION_HEADING}: {}",
            self.plan, self.env_feedback, self.env_interaction
        )
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        for (name, text) in [
            (PLAN_HEADING, &self.plan),
            (FEEDBACK_HEADING, &self.env_feedback),
            (INTERACTION_HEADING, &self.env_interaction),
        ] {
            if text.trim().is_empty() {
                return Err(GuidanceError::EmptySection(name));
            }
        }
        if !has_location_token(&self.env_interaction) {
            return Err(GuidanceError::NoLocation(self.env_interaction.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Guidance {
    pub id: String,
    pub task_id: String,
    pub source_trajectory_ref: String,
    pub plan: String,
    pub env_feedback: String,
    pub env_interaction: String,
    pub teacher_id: String,
    /// Whether the teacher was shown a reference patch.
    pub with_reference_patch: bool,
}

impl Guidance {
    pub fn new(
        sections: GuidanceSections,
        task_id: &str,
        source_trajectory_ref: &str,
        teacher_id: &str,
        with_reference_patch: bool,
    ) -> Self {
        Guidance {
            id: format!("guidance:{source_trajectory_ref}"),
            task_id: task_id.to_string(),
            source_trajectory_ref: source_trajectory_ref.to_string(),
            plan: sections.plan,
            env_feedback: sections.env_feedback,
            env_interaction: sections.env_interaction,
            teacher_id: teacher_id.to_string(),
            with_reference_patch,
        }
    }

    pub fn sections(&self) -> GuidanceSections {
        GuidanceSections {
            plan: self.plan.clone(),
            env_feedback: self.env_feedback.clone(),
            env_interaction: self.env_interaction.clone(),
        }
    }
}

/// Whether `text` names a line (`line 12`) or something path-like (`a/b.py`).
pub fn has_location_token(text: &str) -> bool {
    if crate::rollout::prompt::first_line_ref(text).is_some() {
        return true;
    }
    text.split_whitespace().any(|tok| {
        let tok = tok.trim_matches(|c: char| ",;()[]'\"`".contains(c));
        let tok = tok.trim_end_matches(['.', ':']);
        tok.contains('/')
            || tok.split_once('.').is_some_and(|(stem, ext)| {
                !stem.is_empty()
                    && !ext.is_empty()
                    && ext.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                    && stem.chars().all(|c| c.is_alphanumeric() || "_-/".contains(c))
            })
    })
}

/// Substitutes `{name}` placeholders in one left-to-right pass; substituted
/// text is never rescanned. Unknown placeholders are left as-is.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').map(|close| (&after[..close], close)) {
            Some((name, close)) => match values.iter().find(|(k, _)| *k == name) {
                Some((_, v)) => {
                    out.push_str(v);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            },
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Fills the guidance-request template for a failed attempt.
///
/// `{patch}` is the reference patch when one is supplied, otherwise the
/// failed attempt's own patch (or the empty-patch sentinel).
pub fn render_guidance_request(
    task: &Task,
    failed: &Trajectory,
    record: &RewardRecord,
    reference_patch: Option<&str>,
) -> Result<String, GuidanceError> {
    if record.reward != 0 {
        return Err(GuidanceError::NotAFailure(record.reward));
    }
    let attempted = failed.patch.as_ref().map(|p| p.render());
    let patch = reference_patch
        .map(str::to_string)
        .or(attempted)
        .unwrap_or_else(|| EMPTY_PATCH.to_string());
    let stacktrace = record
        .stacktrace
        .as_deref()
        .filter(|s| !s.trim().is_empty())
        .unwrap_or(NO_STACKTRACE);
    Ok(fill_template(
        GUIDANCE_REQUEST_TEMPLATE,
        &[
            ("repo", &task.repo_name),
            ("problem_statement", &task.issue),
            ("patch", &patch),
            ("stacktrace_hint", stacktrace),
        ],
    ))
}

fn heading_at(line: &str) -> Option<(&'static str, &str)> {
    let stripped = line.trim_start_matches(|c: char| c.is_whitespace() || "#*->_".contains(c));
    let upper = stripped.to_ascii_uppercase();
    for name in [FEEDBACK_HEADING, INTERACTION_HEADING, PLAN_HEADING] {
        if upper.starts_with(name) {
            let rest = stripped[name.len()..].trim_start_matches(|c: char| c.is_whitespace() || "*:_-".contains(c));
            return Some((name, rest));
        }
    }
    None
}

/// Splits a teacher response on its three headings (any order, any case).
pub fn parse_guidance(text: &str) -> Result<GuidanceSections, GuidanceError> {
    let mut sections: Vec<(&'static str, String)> = Vec::new();
    for line in text.lines() {
        if let Some((name, inline)) = heading_at(line) {
            if sections.iter().any(|(n, _)| *n == name) {
                return Err(GuidanceError::DuplicateHeading(name));
            }
            sections.push((name, format!("{inline}\n")));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    let take = |name: &'static str| -> Result<String, GuidanceError> {
        sections
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, body)| body.trim().to_string())
            .ok_or(GuidanceError::MissingHeading(name))
    };
    let parsed = GuidanceSections {
        plan: take(PLAN_HEADING)?,
        env_feedback: take(FEEDBACK_HEADING)?,
        env_interaction: take(INTERACTION_HEADING)?,
    };
    parsed.validate()?;
    Ok(parsed)
}

/// First line of the reattempt block; marks where the hint begins.
pub fn reattempt_opening() -> &'static str {
    REATTEMPT_TEMPLATE.lines().next().unwrap_or(REATTEMPT_TEMPLATE)
}

pub fn has_hint_block(text: &str) -> bool {
    text.contains(HINT_DELIMITER)
}

/// Appends the reattempt block to `base`; rejects an already-hinted prompt.
pub fn render_reattempt_prompt(base: &str, guidance: &Guidance) -> Result<String, GuidanceError> {
    if has_hint_block(base) {
        return Err(GuidanceError::AlreadyHinted);
    }
    let block = fill_template(REATTEMPT_TEMPLATE, &[("hint", &guidance.sections().hint_text())]);
    Ok(format!("{base}\n{block}"))
}

/// `prompt` with any appended reattempt block removed.
pub fn strip_reattempt_block(prompt: &str) -> &str {
    let marker = format!("\n{}", reattempt_opening());
    match prompt.find(&marker) {
        Some(at) => &prompt[..at],
        None => prompt,
    }
}
