//! Verifiable reward: apply a patch to a private workspace copy, run the
//! task's tests, and emit a binary reward with per-test diagnostics.

pub mod sandbox;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rollout::{PatchRendering, Trajectory};
use crate::task::{self, Isolation, Task, TestOutcome, Workspace};

/// Characters of combined test output kept as the stacktrace.
pub const STACKTRACE_CHARS: usize = 4000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("trajectory for task `{trajectory_task}` evaluated against task `{task}`")]
    TaskMismatch { task: String, trajectory_task: String },
    /// Infrastructure failure; distinct from a reward of 0.
    #[error("task `{task}`: sandbox provisioning failed: {reason}")]
    Provision { task: String, reason: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub task_id: String,
    pub trajectory_ref: String,
    pub slot: usize,
    pub guided: bool,
    /// 1 iff the patch is non-empty and every test passes.
    pub reward: u8,
    pub per_test: BTreeMap<String, TestOutcome>,
    pub empty_patch: bool,
    pub stacktrace: Option<String>,
    pub wall_time_s: f64,
}

impl RewardRecord {
    pub fn passed(&self) -> bool {
        self.reward == 1
    }

    /// Equality ignoring `wall_time_s`.
    pub fn same_outcome(&self, other: &RewardRecord) -> bool {
        RewardRecord {
            wall_time_s: 0.0,
            ..self.clone()
        } == RewardRecord {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Last `n` characters of `text`.
pub fn tail_chars(text: &str, n: usize) -> &str {
    match text.char_indices().rev().nth(n.saturating_sub(1)) {
        Some((i, _)) if n > 0 => &text[i..],
        _ if n == 0 => "",
        _ => text,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvaluatorConfig {
    pub workers: usize,
    /// OCI runtime binary for container isolation.
    pub container_runtime: String,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            workers: 4,
            container_runtime: "docker".into(),
        }
    }
}

struct RunResult {
    per_test: BTreeMap<String, TestOutcome>,
    output: String,
}

pub struct Evaluator {
    config: EvaluatorConfig,
    pool: rayon::ThreadPool,
}

impl Evaluator {
    pub fn new(config: EvaluatorConfig) -> Result<Self, EvalError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?;
        Ok(Evaluator { config, pool })
    }

    /// Evaluates one trajectory. Never touches the canonical workspace.
    pub fn evaluate(&self, task: &Task, trajectory: &Trajectory) -> Result<RewardRecord, EvalError> {
        if trajectory.task_id != task.id {
            return Err(EvalError::TaskMismatch {
                task: task.id.clone(),
                trajectory_task: trajectory.task_id.clone(),
            });
        }
        let start = Instant::now();
        let mut record = RewardRecord {
            task_id: task.id.clone(),
            trajectory_ref: trajectory.reference(),
            slot: trajectory.slot,
            guided: trajectory.is_guided(),
            reward: 0,
            per_test: BTreeMap::new(),
            empty_patch: trajectory.patch.is_none(),
            stacktrace: None,
            wall_time_s: 0.0,
        };
        let Some(patch) = &trajectory.patch else {
            record.wall_time_s = start.elapsed().as_secs_f64();
            return Ok(record);
        };
        let timeout = Duration::from_secs_f64(task.env_spec.timeout_s);
        let run = match &task.workspace {
            Workspace::Synthetic(prog) => {
                let lines = match patch.rendering {
                    PatchRendering::Synthetic { line, candidate } => prog.patched_lines(line, candidate),
                    PatchRendering::Diff { .. } => None,
                };
                match lines {
                    Some(lines) => {
                        let results = prog.run_suite(&lines, &task.tests);
                        let output = results
                            .iter()
                            .map(|r| match (&r.outcome, &r.message) {
                                (TestOutcome::Pass, _) => format!("PASSED {}", r.test_id),
                                (TestOutcome::Fail, m) => {
                                    format!("FAILED {}: {}", r.test_id, m.as_deref().unwrap_or(""))
                                }
                                (TestOutcome::Error, m) => {
                                    format!("ERROR {}: {}", r.test_id, m.as_deref().unwrap_or(""))
                                }
                            })
                            .collect::<Vec<_>>()
                            .join("\n");
                        let mut per_test = task::outcomes_by_id(&results);
                        if start.elapsed() > timeout {
                            per_test.values_mut().for_each(|o| *o = TestOutcome::Error);
                        }
                        RunResult { per_test, output }
                    }
                    None => not_applied(task, "patch does not address a candidate of this program"),
                }
            }
            Workspace::Directory { path } => self.run_sandboxed(task, path, patch, start + timeout)?,
        };
        record.per_test = run.per_test;
        let all_pass = task
            .tests
            .all()
            .all(|id| record.per_test.get(id) == Some(&TestOutcome::Pass));
        record.reward = u8::from(all_pass);
        if !all_pass {
            record.stacktrace = Some(tail_chars(&run.output, STACKTRACE_CHARS).to_string());
        }
        record.wall_time_s = start.elapsed().as_secs_f64();
        Ok(record)
    }

    fn run_sandboxed(
        &self,
        task: &Task,
        canonical: &Path,
        patch: &crate::rollout::Patch,
        deadline: Instant,
    ) -> Result<RunResult, EvalError> {
        let provision = |reason: String| EvalError::Provision {
            task: task.id.clone(),
            reason,
        };
        let scratch = tempfile::tempdir().map_err(|e| provision(e.to_string()))?;
        let ws = scratch.path().join("workspace");
        std::fs::create_dir(&ws).map_err(|e| provision(e.to_string()))?;
        sandbox::copy_tree(canonical, &ws).map_err(|e| provision(format!("copying workspace: {e}")))?;

        let sections: Vec<(String, String)> = match &patch.rendering {
            PatchRendering::Diff { .. } => patch
                .edits
                .iter()
                .map(|e| (e.location.clone(), e.replacement.clone()))
                .collect(),
            PatchRendering::Synthetic { .. } => {
                return Ok(not_applied(task, "synthetic patch on a directory workspace"))
            }
        };
        if let Err(e) = sandbox::apply_sections(&ws, &sections) {
            return Ok(not_applied(task, &format!("patch failed to apply: {e}")));
        }
        let out = match task.env_spec.isolation {
            Isolation::Container => {
                let argv = sandbox::container_argv(&self.config.container_runtime, &task.env_spec, &ws);
                sandbox::run_until(&argv, &ws, deadline)
            }
            _ => sandbox::run_process(&task.env_spec, &ws, deadline),
        }
        .map_err(|e| provision(format!("spawning test command: {e}")))?;

        let reported = sandbox::parse_test_report(&out.output);
        let mut per_test = BTreeMap::new();
        for id in task.tests.all() {
            let outcome = if out.timed_out {
                TestOutcome::Error
            } else {
                reported.get(id).copied().unwrap_or(TestOutcome::Error)
            };
            per_test.insert(id.to_string(), outcome);
        }
        let mut output = out.output;
        if out.timed_out {
            output.push_str(&format!("\nTIMEOUT after {}s\n", task.env_spec.timeout_s));
        }
        Ok(RunResult { per_test, output })
    }

    /// Evaluates pairs concurrently; output order matches input order and a
    /// failing item never aborts the batch.
    pub fn evaluate_batch(&self, items: &[(&Task, &Trajectory)]) -> Vec<Result<RewardRecord, EvalError>> {
        self.pool
            .install(|| items.par_iter().map(|(task, traj)| self.evaluate(task, traj)).collect())
    }
}

fn not_applied(task: &Task, reason: &str) -> RunResult {
    RunResult {
        per_test: task
            .tests
            .all()
            .map(|id| (id.to_string(), TestOutcome::Error))
            .collect(),
        output: reason.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_chars_is_char_safe() {
        assert_eq!(tail_chars("abcdef", 3), "def");
        assert_eq!(tail_chars("ab", 10), "ab");
        assert_eq!(tail_chars("αβγ", 2), "βγ");
        assert_eq!(tail_chars("abc", 0), "");
    }
}
