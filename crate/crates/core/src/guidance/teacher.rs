//! Teachers: the synthetic oracle and an LLM behind a completion endpoint.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{parse_guidance, render_guidance_request, Guidance, GuidanceError, GuidanceSections};
use crate::evaluator::RewardRecord;
use crate::rollout::{BackendError, Capabilities, RemoteBackend, SamplingParams, Trajectory};
use crate::task::{Task, TestOutcome, OUTPUT_TEST};

/// Something that answers a filled guidance-request template with text.
pub trait TeacherBackend: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn generate_guidance_text(&self, filled_template: &str) -> Result<String, BackendError>;
}

impl TeacherBackend for RemoteBackend {
    fn id(&self) -> &str {
        crate::rollout::PolicyBackend::id(self)
    }

    fn capabilities(&self) -> Capabilities {
        crate::rollout::PolicyBackend::capabilities(self)
    }

    fn generate_guidance_text(&self, filled_template: &str) -> Result<String, BackendError> {
        self.complete(filled_template, &SamplingParams::greedy(0))
            .map(|c| c.text)
    }
}

pub trait Teacher: Send + Sync {
    fn id(&self) -> &str;

    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    /// Guidance for one failed trajectory.
    fn guide(&self, task: &Task, failed: &Trajectory, record: &RewardRecord) -> Result<Guidance, GuidanceError>;

    /// Guidance for many failures, at most `workers` at a time; output order
    /// follows input order.
    fn guide_batch(
        &self,
        items: &[(&Task, &Trajectory, &RewardRecord)],
        workers: usize,
    ) -> Vec<Result<Guidance, GuidanceError>>
    where
        Self: Sized,
    {
        guide_all(self, items, workers)
    }
}

/// Batch form usable through `&dyn Teacher`.
pub fn guide_all(
    teacher: &dyn Teacher,
    items: &[(&Task, &Trajectory, &RewardRecord)],
    workers: usize,
) -> Vec<Result<Guidance, GuidanceError>> {
    let threads = teacher.max_concurrency().map_or(workers, |m| m.min(workers)).max(1);
    let run = || {
        items
            .par_iter()
            .map(|(task, traj, rec)| teacher.guide(task, traj, rec))
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(run),
        Err(_) => items.iter().map(|(t, tr, r)| teacher.guide(t, tr, r)).collect(),
    }
}

fn check_failure(record: &RewardRecord) -> Result<(), GuidanceError> {
    if record.reward != 0 {
        return Err(GuidanceError::NotAFailure(record.reward));
    }
    Ok(())
}

/// Reads the synthetic task's ground truth; needs no model.
#[derive(Debug, Clone, Default)]
pub struct OracleTeacher;

pub const ORACLE_TEACHER_ID: &str = "oracle";

/// Oracle guidance for a failed attempt on a synthetic task.
pub fn oracle_teacher(task: &Task, failed: &Trajectory, record: &RewardRecord) -> Result<Guidance, GuidanceError> {
    check_failure(record)?;
    let prog = task
        .synth()
        .ok_or_else(|| GuidanceError::NotSynthetic(task.id.clone()))?;
    let line = prog.buggy_line;
    let plan = format!(
        "Only one statement is wrong. Re-read line {line}, compare it with the expected behavior \
         in the issue, and pick the replacement that makes the final value match."
    );
    let env_feedback = match record.stacktrace.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
        Some(trace) => format!("The previous attempt failed the tests: {trace}"),
        None if record.empty_patch => {
            format!("The previous attempt produced no patch, so {OUTPUT_TEST} still fails.")
        }
        None => {
            let failing: Vec<&str> = record
                .per_test
                .iter()
                .filter(|(_, o)| **o != TestOutcome::Pass)
                .map(|(id, _)| id.as_str())
                .collect();
            format!("The previous attempt failed: {}.", failing.join(", "))
        }
    };
    let sections = GuidanceSections {
        plan,
        env_feedback,
        env_interaction: format!("line {line}"),
    };
    sections.validate()?;
    Ok(Guidance::new(
        sections,
        &task.id,
        &failed.reference(),
        ORACLE_TEACHER_ID,
        false,
    ))
}

impl Teacher for OracleTeacher {
    fn id(&self) -> &str {
        ORACLE_TEACHER_ID
    }

    fn guide(&self, task: &Task, failed: &Trajectory, record: &RewardRecord) -> Result<Guidance, GuidanceError> {
        oracle_teacher(task, failed, record)
    }
}

/// Fills the request template, asks the backend, parses the answer; one
/// re-request on an unparseable answer.
pub struct LlmTeacher<B> {
    backend: B,
    id: String,
    reference_patches: BTreeMap<String, String>,
}

impl<B: TeacherBackend> LlmTeacher<B> {
    pub fn new(backend: B) -> Self {
        let id = format!("llm:{}", backend.id());
        LlmTeacher {
            backend,
            id,
            reference_patches: BTreeMap::new(),
        }
    }

    /// Reference patches by task id; tasks with one are guided in
    /// reference-patch mode.
    pub fn with_reference_patches(mut self, patches: BTreeMap<String, String>) -> Self {
        self.reference_patches = patches;
        self
    }
}

impl<B: TeacherBackend> Teacher for LlmTeacher<B> {
    fn id(&self) -> &str {
        &self.id
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.backend.capabilities().max_concurrency
    }

    fn guide(&self, task: &Task, failed: &Trajectory, record: &RewardRecord) -> Result<Guidance, GuidanceError> {
        check_failure(record)?;
        let reference = self.reference_patches.get(&task.id).map(String::as_str);
        let request = render_guidance_request(task, failed, record, reference)?;
        let mut last = None;
        for _ in 0..2 {
            let text = self.backend.generate_guidance_text(&request)?;
            match parse_guidance(&text) {
                Ok(sections) => {
                    return Ok(Guidance::new(
                        sections,
                        &task.id,
                        &failed.reference(),
                        &self.id,
                        reference.is_some(),
                    ))
                }
                Err(e) => {
                    log::warn!("teacher response for {} unusable: {e}", failed.reference());
                    last = Some(e);
                }
            }
        }
        Err(GuidanceError::RetriesExhausted(Box::new(
            last.expect("loop runs at least once"),
        )))
    }
}
