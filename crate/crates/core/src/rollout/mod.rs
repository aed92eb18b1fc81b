//! Rollout engine: the two-step localization → repair scaffold.
//!
//! `run_scaffold` performs one attempt. [`RolloutEngine`] samples `n`
//! attempts per task (the first greedy, the rest at the sampling
//! temperature) on a bounded worker pool, and runs guided reattempts when
//! in training mode.

pub mod backend;
pub mod extract;
pub mod prompt;

use std::sync::{Condvar, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::guidance::{self, Guidance, GuidanceError};
use crate::seed::derive_seed;
use crate::task::Task;

pub use backend::{BackendError, Capabilities, Completion, PolicyBackend, RemoteBackend, TabularBackend};
pub use prompt::Localization;

/// Temperature for every rollout after the first.
pub const DEFAULT_TEMPERATURE: f64 = 0.6;
pub const DEFAULT_ROLLOUTS: usize = 16;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("guidance for task `{guidance_task}` used on task `{task}`")]
    GuidanceTaskMismatch { task: String, guidance_task: String },
    #[error("guided rollouts are disabled in evaluation mode")]
    GuidanceInEvalMode,
    #[error("all {n} rollouts for task `{task}` failed; last error: {last}")]
    AllFailed { task: String, n: usize, last: String },
    #[error("rollout count must be at least 1")]
    ZeroRollouts,
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// `0` is greedy.
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl SamplingParams {
    pub fn greedy(seed: u64) -> Self {
        SamplingParams {
            temperature: 0.0,
            seed,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    Localization,
    Repair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub role: StepRole,
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    /// File path, or `line <i>` for synthetic programs.
    pub location: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatchRendering {
    Diff { text: String },
    Synthetic { line: usize, candidate: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub edits: Vec<Edit>,
    pub rendering: PatchRendering,
}

impl Patch {
    /// Human-readable patch text.
    pub fn render(&self) -> String {
        match &self.rendering {
            PatchRendering::Diff { text } => text.clone(),
            PatchRendering::Synthetic { line, .. } => {
                let replacement = self.edits.first().map_or("", |e| e.replacement.as_str());
                format!("line {line}: {replacement}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    /// Rollout slot; guided reattempts inherit the slot of their source.
    pub slot: usize,
    pub steps: Vec<Step>,
    /// `None` is the empty patch.
    pub patch: Option<Patch>,
    pub guidance_id: Option<String>,
    pub sampling: SamplingParams,
    pub backend_id: String,
    pub on_policy: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Store key of a trajectory: `(task_id, backend_id, seed)`.
pub fn trajectory_ref(task_id: &str, backend_id: &str, seed: u64) -> String {
    format!("{task_id}@{backend_id}@{seed}")
}

impl Trajectory {
    pub fn reference(&self) -> String {
        trajectory_ref(&self.task_id, &self.backend_id, self.sampling.seed)
    }

    pub fn is_guided(&self) -> bool {
        self.guidance_id.is_some()
    }

    /// The prompt `x` the trajectory answers, with any hint block removed.
    pub fn prompt(&self) -> &str {
        self.steps
            .first()
            .map_or("", |s| guidance::strip_reattempt_block(&s.prompt))
    }

    /// The prompt exactly as the backend saw it.
    pub fn raw_prompt(&self) -> &str {
        self.steps.first().map_or("", |s| s.prompt.as_str())
    }

    /// All completions joined in scaffold order.
    pub fn response(&self) -> String {
        self.steps
            .iter()
            .map(|s| s.completion.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn failed(
        task: &Task,
        slot: usize,
        params: SamplingParams,
        backend_id: &str,
        on_policy: bool,
        guidance_id: Option<String>,
        error: String,
    ) -> Self {
        Trajectory {
            task_id: task.id.clone(),
            slot,
            steps: Vec::new(),
            patch: None,
            guidance_id,
            sampling: params,
            backend_id: backend_id.to_string(),
            on_policy,
            error: Some(error),
        }
    }
}

/// Runs one localization → repair attempt.
///
/// With guidance, both prompts get the reattempt block appended and the
/// trajectory records the guidance id. A completion with no extractable
/// patch yields `patch: None`, not an error.
pub fn run_scaffold(
    task: &Task,
    backend: &dyn PolicyBackend,
    params: &SamplingParams,
    guidance: Option<&Guidance>,
    max_localized_files: usize,
) -> Result<Trajectory, RolloutError> {
    if let Some(g) = guidance {
        if g.task_id != task.id {
            return Err(RolloutError::GuidanceTaskMismatch {
                task: task.id.clone(),
                guidance_task: g.task_id.clone(),
            });
        }
    }
    let augment = |base: String| -> Result<String, RolloutError> {
        match guidance {
            Some(g) => Ok(guidance::render_reattempt_prompt(&base, g)?),
            None => Ok(base),
        }
    };

    let loc_prompt = augment(prompt::localization_prompt(task, max_localized_files))?;
    let loc = backend.generate(&loc_prompt, params)?;
    let localization = extract::parse_localization(task, &loc.text, max_localized_files);

    let repair_prompt = augment(prompt::repair_prompt(task, &localization))?;
    let repair = backend.generate(&repair_prompt, params)?;
    let patch = extract::extract_patch(task, &repair.text);

    Ok(Trajectory {
        task_id: task.id.clone(),
        slot: 0,
        steps: vec![
            Step {
                role: StepRole::Localization,
                prompt: loc_prompt,
                completion: loc.text,
            },
            Step {
                role: StepRole::Repair,
                prompt: repair_prompt,
                completion: repair.text,
            },
        ],
        patch,
        guidance_id: guidance.map(|g| g.id.clone()),
        sampling: *params,
        backend_id: backend.id().to_string(),
        on_policy: true,
        error: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Guided reattempts allowed.
    Train,
    /// Guidance can never reach a prompt.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Extra attempts after a retryable backend failure.
    pub retries: usize,
    pub max_localized_files: usize,
    pub workers: usize,
    /// `false` tags trajectories as off-policy (e.g. sampled from the teacher).
    pub on_policy: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            retries: 2,
            max_localized_files: 5,
            workers: 4,
            on_policy: true,
        }
    }
}

/// Counting semaphore honoring a backend's concurrency declaration.
struct Gate {
    limit: Option<usize>,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: Option<usize>) -> Self {
        Gate {
            limit: limit.map(|l| l.max(1)),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn run<R>(&self, f: impl FnOnce() -> R) -> R {
        let Some(limit) = self.limit else {
            return f();
        };
        {
            let mut n = self.in_flight.lock().expect("gate poisoned");
            while *n >= limit {
                n = self.freed.wait(n).expect("gate poisoned");
            }
            *n += 1;
        }
        let out = f();
        *self.in_flight.lock().expect("gate poisoned") -= 1;
        self.freed.notify_one();
        out
    }
}

/// Backend wrapper adding the concurrency gate and retries.
struct Guarded<'a> {
    inner: &'a dyn PolicyBackend,
    gate: &'a Gate,
    retries: usize,
}

impl PolicyBackend for Guarded<'_> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        let mut attempt = 0;
        loop {
            match self.gate.run(|| self.inner.generate(prompt, params)) {
                Err(e) if e.is_retryable() && attempt < self.retries => {
                    log::debug!("retrying backend call after: {e}");
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

pub struct RolloutEngine<'b> {
    backend: &'b dyn PolicyBackend,
    mode: EngineMode,
    config: RolloutConfig,
    gate: Gate,
    pool: rayon::ThreadPool,
}

impl<'b> RolloutEngine<'b> {
    pub fn new(backend: &'b dyn PolicyBackend, mode: EngineMode, config: RolloutConfig) -> Result<Self, RolloutError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers.max(1))
            .build()
            .map_err(|e| RolloutError::Pool(e.to_string()))?;
        Ok(RolloutEngine {
            gate: Gate::new(backend.capabilities().max_concurrency),
            backend,
            mode,
            config,
            pool,
        })
    }

    pub fn mode(&self) -> EngineMode {
        self.mode
    }

    /// Sampling params of rollout `slot`: slot 0 greedy, the rest at the
    /// configured temperature; seeds hash `(base_seed, task, slot)`.
    pub fn slot_params(&self, task: &Task, slot: usize, base_seed: u64) -> SamplingParams {
        SamplingParams {
            temperature: if slot == 0 { 0.0 } else { self.config.temperature },
            seed: derive_seed(base_seed, &[&task.id, &slot.to_string()]),
            max_tokens: self.config.max_tokens,
        }
    }

    fn attempt(&self, task: &Task, slot: usize, params: SamplingParams, guidance: Option<&Guidance>) -> Trajectory {
        let guarded = Guarded {
            inner: self.backend,
            gate: &self.gate,
            retries: self.config.retries,
        };
        match run_scaffold(task, &guarded, &params, guidance, self.config.max_localized_files) {
            Ok(mut t) => {
                t.slot = slot;
                t.on_policy = self.config.on_policy;
                t
            }
            Err(e) => {
                log::warn!("task {} slot {slot}: rollout failed: {e}", task.id);
                Trajectory::failed(
                    task,
                    slot,
                    params,
                    self.backend.id(),
                    self.config.on_policy,
                    guidance.map(|g| g.id.clone()),
                    e.to_string(),
                )
            }
        }
    }

    /// Exactly `n` rollouts for `task`. Failed slots come back as
    /// empty-patch trajectories; only all-`n` failure is an error.
    pub fn sample_rollouts(&self, task: &Task, n: usize, base_seed: u64) -> Result<Vec<Trajectory>, RolloutError> {
        let mut out = self.sample_suite(&[task], n, base_seed)?;
        Ok(out.pop().expect("one task"))
    }

    /// `n` rollouts for each task, grouped per task in input order.
    pub fn sample_suite(
        &self,
        tasks: &[&Task],
        n: usize,
        base_seed: u64,
    ) -> Result<Vec<Vec<Trajectory>>, RolloutError> {
        if n == 0 {
            return Err(RolloutError::ZeroRollouts);
        }
        let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..n).map(move |s| (t, s))).collect();
        let flat: Vec<Trajectory> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(t, slot)| {
                    let task = tasks[t];
                    self.attempt(task, slot, self.slot_params(task, slot, base_seed), None)
                })
                .collect()
        });
        let mut grouped: Vec<Vec<Trajectory>> = Vec::with_capacity(tasks.len());
        let mut it = flat.into_iter();
        for task in tasks {
            let group: Vec<Trajectory> = it.by_ref().take(n).collect();
            if group.iter().all(|t| t.error.is_some()) {
                return Err(RolloutError::AllFailed {
                    task: task.id.clone(),
                    n,
                    last: group.last().and_then(|t| t.error.clone()).unwrap_or_default(),
                });
            }
            grouped.push(group);
        }
        Ok(grouped)
    }

    /// Reattempts with guidance, one per `(task, failed source, guidance)`.
    ///
    /// The reattempt keeps the source's slot and temperature and derives a
    /// fresh seed from the source seed.
    pub fn reattempt_batch(&self, items: &[(&Task, &Trajectory, &Guidance)]) -> Result<Vec<Trajectory>, RolloutError> {
        if self.mode == EngineMode::Eval {
            return Err(RolloutError::GuidanceInEvalMode);
        }
        for (task, _, g) in items {
            if g.task_id != task.id {
                return Err(RolloutError::GuidanceTaskMismatch {
                    task: task.id.clone(),
                    guidance_task: g.task_id.clone(),
                });
            }
        }
        Ok(self.pool.install(|| {
            items
                .par_iter()
                .map(|&(task, source, g)| {
                    let params = SamplingParams {
                        seed: derive_seed(source.sampling.seed, &["guided"]),
                        ..source.sampling
                    };
                    self.attempt(task, source.slot, params, Some(g))
                })
                .collect()
        }))
    }
}
