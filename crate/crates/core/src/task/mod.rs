//! Task registry: the verifiable environments the training loop runs over.
//!
//! A task bundles an issue description, a workspace (a directory snapshot
//! or an in-memory synthetic program), an execution contract and the test
//! suite whose all-pass outcome defines reward 1. Datasets are stored as
//! JSON lines, one task per line, and are immutable once loaded.

pub mod program;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

pub use synth::{generate_synth_suite, outcomes_by_id, SynthProgram, SynthTestResult, OUTPUT_TEST};

/// Default evaluation timeout for synthetic tasks.
pub const SYNTH_TIMEOUT_S: f64 = 1.0;
/// Default evaluation timeout for container and subprocess tasks.
pub const SANDBOX_TIMEOUT_S: f64 = 300.0;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("duplicate task id `{0}`")]
    DuplicateId(String),
    #[error("task `{id}`: workspace {path} does not resolve to a directory")]
    UnresolvableWorkspace { id: String, path: PathBuf },
    #[error("task `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("invalid synthetic suite dimensions: count={count}, lines={lines}, candidates={candidates} (need count>=1, lines>=2, candidates>=2)")]
    InvalidDimensions {
        count: usize,
        lines: usize,
        candidates: usize,
    },
    #[error("could not generate a valid synthetic task at index {index}")]
    GenerationFailed { index: usize },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    ProcessSandbox,
    Container,
    InMemorySynthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    #[serde(default)]
    pub setup_commands: Vec<String>,
    /// Must print one `PASSED <id>` / `FAILED <id>` / `ERROR <id>` line per test.
    #[serde(default)]
    pub test_command: String,
    pub timeout_s: f64,
    pub isolation: Isolation,
    /// OCI image reference; required for `container` isolation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl EnvSpec {
    pub fn synthetic() -> Self {
        EnvSpec {
            setup_commands: Vec::new(),
            test_command: String::new(),
            timeout_s: SYNTH_TIMEOUT_S,
            isolation: Isolation::InMemorySynthetic,
            image: None,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(format!("timeout_s must be positive, got {}", self.timeout_s));
        }
        match self.isolation {
            Isolation::InMemorySynthetic => {
                if !self.setup_commands.is_empty() || !self.test_command.is_empty() {
                    return Err("in_memory_synthetic tasks take no external commands".into());
                }
            }
            Isolation::ProcessSandbox | Isolation::Container => {
                if self.test_command.trim().is_empty() {
                    return Err("test_command is required".into());
                }
                if self.isolation == Isolation::Container && self.image.is_none() {
                    return Err("container isolation requires an image".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSuite {
    #[serde(default)]
    pub regression: Vec<String>,
    #[serde(default)]
    pub focused: Vec<String>,
}

impl TestSuite {
    /// Regression tests followed by focused tests.
    pub fn all(&self) -> impl Iterator<Item = &str> {
        self.regression.iter().chain(self.focused.iter()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.regression.len() + self.focused.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<(), String> {
        if self.is_empty() {
            return Err("test suite is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for id in self.all() {
            if !seen.insert(id) {
                return Err(format!(
                    "test `{id}` listed twice (regression and focused must be disjoint)"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workspace {
    /// A directory snapshot; relative paths resolve against the dataset file.
    Directory {
        path: PathBuf,
    },
    Synthetic(SynthProgram),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub issue: String,
    pub repo_name: String,
    pub workspace: Workspace,
    pub env_spec: EnvSpec,
    pub tests: TestSuite,
}

impl Task {
    pub fn synth(&self) -> Option<&SynthProgram> {
        match &self.workspace {
            Workspace::Synthetic(p) => Some(p),
            Workspace::Directory { .. } => None,
        }
    }

    pub fn is_synthetic(&self) -> bool {
        self.synth().is_some()
    }

    fn validate(&self) -> Result<(), TaskError> {
        let invalid = |reason: String| TaskError::Invalid {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        self.env_spec.validate().map_err(invalid)?;
        self.tests.validate().map_err(invalid)?;
        match &self.workspace {
            Workspace::Synthetic(prog) => {
                if self.env_spec.isolation != Isolation::InMemorySynthetic {
                    return Err(invalid(
                        "synthetic workspace needs in_memory_synthetic isolation".into(),
                    ));
                }
                prog.validate(&self.tests).map_err(invalid)?;
            }
            Workspace::Directory { path } => {
                if self.env_spec.isolation == Isolation::InMemorySynthetic {
                    return Err(invalid(
                        "directory workspace cannot use in_memory_synthetic isolation".into(),
                    ));
                }
                if !path.is_dir() {
                    return Err(TaskError::UnresolvableWorkspace {
                        id: self.id.clone(),
                        path: path.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A validated, immutable collection of tasks with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskDataset {
    tasks: Vec<Task>,
    index: HashMap<String, usize>,
}

impl TaskDataset {
    /// Validates every task and indexes them by id.
    pub fn new(tasks: Vec<Task>) -> Result<Self, TaskError> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            if index.insert(task.id.clone(), i).is_some() {
                return Err(TaskError::DuplicateId(task.id.clone()));
            }
            task.validate()?;
        }
        Ok(TaskDataset { tasks, index })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Task> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn require(&self, id: &str) -> Result<&Task, TaskError> {
        self.get(id).ok_or_else(|| TaskError::UnknownTask(id.to_string()))
    }

    /// Position of a task in dataset order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// `(lines, candidates)` for every synthetic task, keyed by id.
    pub fn synth_shapes(&self) -> BTreeMap<String, (usize, usize)> {
        self.tasks
            .iter()
            .filter_map(|t| t.synth().map(|p| (t.id.clone(), (p.num_lines(), p.num_candidates()))))
            .collect()
    }
}

/// Loads and validates a task JSONL file.
pub fn load_tasks(path: &Path) -> Result<TaskDataset, TaskError> {
    let mut tasks: Vec<Task> = jsonl::read_jsonl(path)?;
    if tasks.is_empty() {
        log::warn!("{}: task file contains no records", path.display());
    }
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let base = std::path::absolute(dir).unwrap_or_else(|_| dir.to_path_buf());
    for task in &mut tasks {
        if let Workspace::Directory { path: ws } = &mut task.workspace {
            if ws.is_relative() {
                *ws = base.join(&*ws);
            }
        }
    }
    TaskDataset::new(tasks)
}

/// Writes a dataset as task JSONL.
pub fn emit_tasks(dataset: &TaskDataset, path: &Path) -> Result<(), TaskError> {
    Ok(jsonl::write_jsonl(path, dataset.tasks())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir_task(id: &str, path: &str) -> Task {
        Task {
            id: id.into(),
            issue: "fix it".into(),
            repo_name: "demo".into(),
            workspace: Workspace::Directory { path: path.into() },
            env_spec: EnvSpec {
                setup_commands: vec![],
                test_command: "true".into(),
                timeout_s: SANDBOX_TIMEOUT_S,
                isolation: Isolation::ProcessSandbox,
                image: None,
            },
            tests: TestSuite {
                regression: vec!["a".into()],
                focused: vec!["b".into()],
            },
        }
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_tasks(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("ws")).unwrap();
        let path = dir.path().join("tasks.jsonl");
        jsonl::write_jsonl(&path, &[dir_task("t1", "ws"), dir_task("t1", "ws")]).unwrap();
        assert!(matches!(load_tasks(&path), Err(TaskError::DuplicateId(id)) if id == "t1"));
    }

    #[test]
    fn relative_workspace_resolves_against_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("ws")).unwrap();
        let path = dir.path().join("tasks.jsonl");
        jsonl::write_jsonl(&path, &[dir_task("t1", "ws")]).unwrap();
        let ds = load_tasks(&path).unwrap();
        match &ds.tasks()[0].workspace {
            Workspace::Directory { path } => assert_eq!(path, &dir.path().join("ws")),
            _ => unreachable!(),
        }
    }

    #[test]
    fn missing_workspace_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        jsonl::write_jsonl(&path, &[dir_task("t1", "nope")]).unwrap();
        assert!(matches!(
            load_tasks(&path),
            Err(TaskError::UnresolvableWorkspace { .. })
        ));
    }

    #[test]
    fn parse_error_reports_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.jsonl");
        let good = jsonl::to_line(&generate_synth_suite(1, 2, 2, 0).unwrap().tasks()[0]);
        std::fs::write(&path, format!("{good}\n{{\"schema_version\":1,\"id\":\"x\"}}\n")).unwrap();
        match load_tasks(&path) {
            Err(TaskError::Jsonl(JsonlError::Parse { index, .. })) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ws = dir.path().to_str().unwrap();
        let mut t = dir_task("t", ws);
        t.tests = TestSuite::default();
        assert!(TaskDataset::new(vec![t]).is_err());

        let mut t = dir_task("t", ws);
        t.tests.focused = vec!["a".into()];
        assert!(TaskDataset::new(vec![t]).is_err());

        let mut t = dir_task("t", ws);
        t.env_spec.timeout_s = 0.0;
        assert!(TaskDataset::new(vec![t]).is_err());

        let mut t = dir_task("t", ws);
        t.env_spec.isolation = Isolation::Container;
        assert!(TaskDataset::new(vec![t]).is_err());

        let mut synth = generate_synth_suite(1, 3, 3, 5).unwrap().tasks()[0].clone();
        synth.env_spec.test_command = "pytest".into();
        assert!(TaskDataset::new(vec![synth]).is_err());
    }
}
