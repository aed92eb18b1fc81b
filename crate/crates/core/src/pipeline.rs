//! The training loop as a chain of file-producing phases.
//!
//! Each CLI subcommand calls one phase function and `run_loop` calls them
//! all in order, so a loop run and a hand-driven sequence of commands write
//! the same bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::config::{BackendChoice, ConfigError, DatasetSource, Endpoint, RawConfig, RunConfig, TeacherChoice};
use crate::evaluator::{EvalError, Evaluator, EvaluatorConfig, RewardRecord};
use crate::guidance::{guide_all, Guidance, GuidanceError, LlmTeacher, OracleTeacher, Teacher};
use crate::jsonl::{self, JsonlError};
use crate::metrics::{self, EvalReport, MetricsError};
use crate::pairs::{self, Accounting, PairError, RlvrDataset, Scored};
use crate::policy::{PolicyCheckpoint, PolicyError, ReferencePolicy, TabularPolicy};
use crate::reward_model::{self, PairwiseRm, RmError};
use crate::rollout::{
    BackendError, EngineMode, PolicyBackend, RemoteBackend, RolloutConfig, RolloutEngine, RolloutError, TabularBackend,
    Trajectory,
};
use crate::seed::sha256_hex;
use crate::task::{self, TaskDataset, TaskError};
use crate::train::{self, DpoConfig, SftConfig, TrainError};

/// File names inside a run directory.
pub mod artifacts {
    pub const CONFIG: &str = "config.ini";
    pub const TASKS: &str = "tasks.jsonl";
    pub const POLICY_INIT: &str = "policy_init.json";
    pub const ROLLOUTS: &str = "rollouts.jsonl";
    pub const REWARDS: &str = "rewards.jsonl";
    pub const GUIDANCE: &str = "guidance.jsonl";
    pub const GUIDED_ROLLOUTS: &str = "guided_rollouts.jsonl";
    pub const GUIDED_REWARDS: &str = "guided_rewards.jsonl";
    pub const DATASET: &str = "rlvr_dataset.jsonl";
    pub const POLICY_SFT: &str = "policy_sft.json";
    pub const SFT_LOG: &str = "sft_log.csv";
    pub const POLICY_DPO: &str = "policy_dpo.json";
    pub const DPO_LOG: &str = "dpo_log.csv";
    pub const EVAL_ROLLOUTS: &str = "eval_rollouts.jsonl";
    pub const EVAL_REWARDS: &str = "eval_rewards.jsonl";
    pub const RM: &str = "rm.json";
    pub const RM_LOG: &str = "rm_log.csv";
    pub const RANKING: &str = "ranking.jsonl";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const PROGRESS: &str = "progress.json";
    pub const MANIFEST: &str = "manifest.json";

    /// Artifacts carrying wall-clock timings.
    pub const NONDETERMINISTIC: [&str; 3] = [REWARDS, GUIDED_REWARDS, EVAL_REWARDS];
}

pub const INIT_BACKEND_ID: &str = "tabular:init";
pub const FINAL_BACKEND_ID: &str = "tabular:final";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Pairs(#[from] PairError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rm(#[from] RmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
}

impl PipelineError {
    /// Failures of the machinery (network, sandbox, disk) rather than of a phase's inputs.
    pub fn is_infrastructure(&self) -> bool {
        match self {
            PipelineError::Io { .. } => true,
            PipelineError::Jsonl(JsonlError::Io { .. }) => true,
            PipelineError::Eval(EvalError::Provision { .. } | EvalError::Pool(_)) => true,
            PipelineError::Rollout(e) => matches!(
                e,
                RolloutError::Backend(BackendError::Transport(_))
                    | RolloutError::AllFailed { .. }
                    | RolloutError::Pool(_)
            ),
            PipelineError::Guidance(e) => matches!(e, GuidanceError::Backend(BackendError::Transport(_))),
            _ => false,
        }
    }

    /// 1 usage, 2 phase failure, 3 infrastructure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) | PipelineError::Config(_) => 1,
            e if e.is_infrastructure() => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------- inputs

pub fn load_tasks_from(source: &DatasetSource) -> Result<TaskDataset> {
    Ok(match source {
        DatasetSource::File(p) => task::load_tasks(p)?,
        DatasetSource::Synth {
            count,
            lines,
            candidates,
            seed,
        } => task::generate_synth_suite(*count, *lines, *candidates, *seed)?,
    })
}

/// Materializes the dataset as task JSONL at `out`.
pub fn gen_tasks(source: &DatasetSource, out: &Path) -> Result<TaskDataset> {
    let ds = load_tasks_from(source)?;
    task::emit_tasks(&ds, out)?;
    Ok(ds)
}

/// The checkpoint at `init`, or a fresh uniform policy; covers every task.
pub fn initial_checkpoint(tasks: &TaskDataset, init: Option<&Path>) -> Result<PolicyCheckpoint> {
    let mut ckpt = match init {
        Some(p) => PolicyCheckpoint::load(p)?,
        None => PolicyCheckpoint::untrained(TabularPolicy::default()),
    };
    ckpt.policy.ensure_shapes(&tasks.synth_shapes());
    Ok(ckpt)
}

fn api_key(ep: &Endpoint) -> Option<String> {
    ep.api_key_env.as_deref().and_then(|v| std::env::var(v).ok())
}

fn remote(ep: &Endpoint) -> RemoteBackend {
    let b = RemoteBackend::new(&ep.url, ep.model.clone(), ep.timeout).with_max_concurrency(ep.max_concurrency);
    match api_key(ep) {
        Some(k) => b.with_api_key(k),
        None => b,
    }
}

/// Policy backend for rollouts; `label` names a tabular backend.
pub fn policy_backend(
    choice: &BackendChoice,
    policy: &TabularPolicy,
    tasks: &TaskDataset,
    label: &str,
) -> Box<dyn PolicyBackend> {
    match choice {
        BackendChoice::Tabular => Box::new(TabularBackend::new(label, policy.clone(), &tasks.synth_shapes())),
        BackendChoice::Remote(ep) => Box::new(remote(ep)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferencePatch {
    pub task_id: String,
    pub patch: String,
}

pub fn teacher_from(choice: &TeacherChoice, reference_patches: Option<&Path>) -> Result<Box<dyn Teacher>> {
    Ok(match choice {
        TeacherChoice::Oracle => Box::new(OracleTeacher),
        TeacherChoice::Remote(ep) => {
            let mut t = LlmTeacher::new(remote(ep));
            if let Some(p) = reference_patches {
                let refs: Vec<ReferencePatch> = jsonl::read_jsonl(p)?;
                t = t.with_reference_patches(refs.into_iter().map(|r| (r.task_id, r.patch)).collect());
            }
            Box::new(t)
        }
    })
}

/// Pairs each trajectory with its reward record.
pub fn join_rewards<'a>(trajectories: &'a [Trajectory], rewards: &'a [RewardRecord]) -> Result<Vec<Scored<'a>>> {
    let by_ref: HashMap<&str, &RewardRecord> = rewards.iter().map(|r| (r.trajectory_ref.as_str(), r)).collect();
    trajectories
        .iter()
        .map(|t| {
            let key = t.reference();
            by_ref
                .get(key.as_str())
                .map(|r| (t, *r))
                .ok_or_else(|| PipelineError::Inconsistent(format!("no reward record for {key}")))
        })
        .collect()
}

// ---------------------------------------------------------------- phases

/// `n` rollouts per task, in task order, written to `out`.
pub fn rollout_phase(
    tasks: &TaskDataset,
    backend: &dyn PolicyBackend,
    config: &RolloutConfig,
    mode: EngineMode,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<Trajectory>> {
    let engine = RolloutEngine::new(backend, mode, config.clone())?;
    let refs: Vec<&task::Task> = tasks.tasks().iter().collect();
    let trajectories: Vec<Trajectory> = engine.sample_suite(&refs, n, seed)?.into_iter().flatten().collect();
    jsonl::write_jsonl(out, &trajectories)?;
    Ok(trajectories)
}

/// Rewards for `trajectories`, in the same order.
pub fn evaluate_phase(
    tasks: &TaskDataset,
    trajectories: &[Trajectory],
    config: &EvaluatorConfig,
    out: &Path,
) -> Result<Vec<RewardRecord>> {
    let evaluator = Evaluator::new(config.clone())?;
    let items = trajectories
        .iter()
        .map(|t| Ok((tasks.require(&t.task_id)?, t)))
        .collect::<Result<Vec<_>>>()?;
    let records = evaluator
        .evaluate_batch(&items)
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    jsonl::write_jsonl(out, &records)?;
    Ok(records)
}

/// Teacher guidance for every unguided failure.
pub fn guide_phase(
    tasks: &TaskDataset,
    trajectories: &[Trajectory],
    rewards: &[RewardRecord],
    teacher: &dyn Teacher,
    workers: usize,
    out: &Path,
) -> Result<Vec<Guidance>> {
    let scored = join_rewards(trajectories, rewards)?;
    let items = scored
        .into_iter()
        .filter(|(t, r)| r.reward == 0 && !t.is_guided())
        .map(|(t, r)| Ok((tasks.require(&t.task_id)?, t, r)))
        .collect::<Result<Vec<_>>>()?;
    let guidance = guide_all(teacher, &items, workers)
        .into_iter()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    jsonl::write_jsonl(out, &guidance)?;
    Ok(guidance)
}

/// One guided reattempt per guidance record.
pub fn reattempt_phase(
    tasks: &TaskDataset,
    trajectories: &[Trajectory],
    guidance: &[Guidance],
    backend: &dyn PolicyBackend,
    config: &RolloutConfig,
    out: &Path,
) -> Result<Vec<Trajectory>> {
    let by_ref: HashMap<String, &Trajectory> = trajectories.iter().map(|t| (t.reference(), t)).collect();
    let items = guidance
        .iter()
        .map(|g| {
            let source = by_ref.get(&g.source_trajectory_ref).ok_or_else(|| {
                PipelineError::Inconsistent(format!(
                    "guidance {} names unknown trajectory {}",
                    g.id, g.source_trajectory_ref
                ))
            })?;
            Ok((tasks.require(&g.task_id)?, *source, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let engine = RolloutEngine::new(backend, EngineMode::Train, config.clone())?;
    let guided = engine.reattempt_batch(&items)?;
    jsonl::write_jsonl(out, &guided)?;
    Ok(guided)
}

pub struct AssemblyInputs<'a> {
    pub trajectories: &'a [Trajectory],
    pub rewards: &'a [RewardRecord],
    pub guided: &'a [Trajectory],
    pub guided_rewards: &'a [RewardRecord],
    pub guidance: &'a [Guidance],
}

pub fn assemble_phase(inputs: &AssemblyInputs, config: &pairs::AssemblyConfig, out: &Path) -> Result<RlvrDataset> {
    let unguided = join_rewards(inputs.trajectories, inputs.rewards)?;
    let guided = join_rewards(inputs.guided, inputs.guided_rewards)?;
    let ds = pairs::assemble_dataset(&unguided, &guided, inputs.guidance, config)?;
    pairs::emit_dataset(&ds, out)?;
    Ok(ds)
}

/// SFT on the dataset's subset unless the checkpoint is already fine-tuned.
pub fn sft_phase(
    checkpoint: &PolicyCheckpoint,
    dataset: &RlvrDataset,
    config: &SftConfig,
    out_policy: &Path,
    out_log: &Path,
) -> Result<PolicyCheckpoint> {
    let mut ckpt = checkpoint.clone();
    if checkpoint.sft_done {
        log::info!("policy is already fine-tuned; skipping SFT");
        train::write_log_csv::<train::SftLogRow>(out_log, &[])?;
    } else {
        let targets = train::resolve_sft(&checkpoint.policy, &dataset.sft)?;
        let (policy, log) = train::sft_train(&checkpoint.policy, &targets, config)?;
        train::write_log_csv(out_log, &log)?;
        ckpt.policy = policy;
        ckpt.sft_done = true;
        ckpt.provenance.insert("sft.examples".into(), targets.len().to_string());
        ckpt.provenance.insert("sft.epochs".into(), config.epochs.to_string());
        ckpt.provenance
            .insert("sft.learning_rate".into(), config.learning_rate.to_string());
    }
    ckpt.save(out_policy)?;
    Ok(ckpt)
}

/// DPO against a snapshot of `checkpoint`. Returns the trained checkpoint
/// and the number of pairs dropped as unmappable (always 0 when strict).
pub fn dpo_phase(
    checkpoint: &PolicyCheckpoint,
    dataset: &RlvrDataset,
    config: &DpoConfig,
    strict: bool,
    out_policy: &Path,
    out_log: &Path,
) -> Result<(PolicyCheckpoint, usize)> {
    let reference = ReferencePolicy::snapshot(&checkpoint.policy);
    let (pairs, dropped) = if strict {
        (train::resolve_pairs(&checkpoint.policy, &dataset.pairs)?, 0)
    } else {
        train::resolve_pairs_lenient(&checkpoint.policy, &dataset.pairs)
    };
    let (policy, log) = train::dpo_train(&checkpoint.policy, &reference, &pairs, config)?;
    train::write_log_csv(out_log, &log)?;
    let mut ckpt = checkpoint.clone();
    ckpt.policy = policy;
    ckpt.dpo_done = true;
    ckpt.provenance.insert("dpo.pairs".into(), pairs.len().to_string());
    ckpt.provenance.insert("dpo.dropped_pairs".into(), dropped.to_string());
    ckpt.provenance.insert("dpo.beta".into(), config.beta.to_string());
    ckpt.provenance.insert("dpo.epochs".into(), config.epochs.to_string());
    ckpt.provenance
        .insert("dpo.learning_rate".into(), config.learning_rate.to_string());
    ckpt.provenance
        .insert("dpo.reference".into(), reference.policy().fingerprint());
    ckpt.save(out_policy)?;
    Ok((ckpt, dropped))
}

pub fn rm_phase(
    tasks: &TaskDataset,
    dataset: &RlvrDataset,
    config: &reward_model::RmConfig,
    out_rm: &Path,
    out_log: &Path,
) -> Result<PairwiseRm> {
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = reward_model::rm_pairs_from_preferences(tasks, &dataset.pairs)
        .into_iter()
        .map(|(w, l)| (w.features, l.features))
        .collect();
    let (rm, log) = reward_model::rm_train(&pairs, config);
    train::write_log_csv(out_log, &log)?;
    rm.save(out_rm)?;
    Ok(rm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub task_id: String,
    pub k: usize,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub selected: usize,
    pub selected_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<u8>,
}

/// Best-of-k over the first `k` slots of each task's rollouts.
pub fn rank_phase(
    tasks: &TaskDataset,
    rm: &PairwiseRm,
    trajectories: &[Trajectory],
    rewards: &[RewardRecord],
    k: usize,
    out: &Path,
) -> Result<Vec<RankRecord>> {
    let reward_of: HashMap<&str, u8> = rewards.iter().map(|r| (r.trajectory_ref.as_str(), r.reward)).collect();
    let mut by_task: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories.iter().filter(|t| !t.is_guided()) {
        by_task.entry(&t.task_id).or_default().push(t);
    }
    let mut records = Vec::new();
    for task in tasks.tasks() {
        let Some(mut group) = by_task.remove(task.id.as_str()) else {
            continue;
        };
        group.sort_by_key(|t| t.slot);
        group.truncate(k);
        let patches: Vec<_> = group.iter().map(|t| t.patch.as_ref()).collect();
        let ranking = reward_model::rank_best_of_k(rm, &task.issue, &patches)?;
        let chosen = group[ranking.selected].reference();
        records.push(RankRecord {
            task_id: task.id.clone(),
            k: group.len(),
            candidates: group.iter().map(|t| t.reference()).collect(),
            scores: ranking.scores,
            selected: ranking.selected,
            reward: reward_of.get(chosen.as_str()).copied(),
            selected_ref: chosen,
        });
    }
    jsonl::write_jsonl(out, &records)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Rollouts of the starting policy, with the guidance uplift when guided.
    pub before: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub after: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accounting: Option<Accounting>,
}

#[derive(Default)]
pub struct ReportInputs<'a> {
    pub rewards: &'a [RewardRecord],
    pub guided_rewards: Option<&'a [RewardRecord]>,
    pub eval_rewards: Option<&'a [RewardRecord]>,
    pub ranking: Option<&'a [RankRecord]>,
    pub accounting: Option<&'a Accounting>,
}

pub fn report_phase(inputs: &ReportInputs, bootstrap_seed: u64, out_json: &Path, out_txt: &Path) -> Result<RunReport> {
    let mut before = metrics::aggregate(inputs.rewards, &BTreeMap::new(), bootstrap_seed)?;
    if let Some(g) = inputs.guided_rewards {
        before.guidance_uplift = Some(metrics::guidance_uplift_report(inputs.rewards, g));
    }
    let after = match inputs.eval_rewards {
        Some(eval) => {
            let best: BTreeMap<String, u8> = inputs
                .ranking
                .unwrap_or_default()
                .iter()
                .filter_map(|r| r.reward.map(|x| (r.task_id.clone(), x)))
                .collect();
            Some(metrics::aggregate(eval, &best, bootstrap_seed)?)
        }
        None => None,
    };
    let report = RunReport {
        before,
        after,
        accounting: inputs.accounting.cloned(),
    };
    jsonl::write_json(out_json, &report)?;
    let mut text = format!("Before training\n\n{}", metrics::render_text(&report.before));
    if let Some(a) = &report.after {
        text.push_str(&format!("\nAfter training\n\n{}", metrics::render_text(a)));
    }
    if let Some(acc) = &report.accounting {
        text.push_str(&format!(
            "\nPairs: {} rollout, {} guided repair; SFT examples: {}\n",
            acc.rollout_pairs, acc.guided_repair_pairs, acc.sft_examples
        ));
    }
    std::fs::write(out_txt, text).map_err(io_err(out_txt))?;
    Ok(report)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<ArtifactEntry>,
}

impl Manifest {
    /// Entries expected to be byte-identical across reruns.
    pub fn deterministic(&self) -> impl Iterator<Item = &ArtifactEntry> {
        self.artifacts.iter().filter(|a| a.deterministic)
    }
}

/// Hashes every file under `dir` except the manifest itself.
pub fn write_manifest(dir: &Path) -> Result<Manifest> {
    let mut artifacts = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(dir)
            .expect("walk stays under dir")
            .to_string_lossy()
            .replace('\\', "/");
        if rel == artifacts::MANIFEST {
            continue;
        }
        let bytes = std::fs::read(entry.path()).map_err(io_err(entry.path()))?;
        artifacts.push(ArtifactEntry {
            deterministic: !artifacts::NONDETERMINISTIC.contains(&rel.as_str()),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
            path: rel,
        });
    }
    let manifest = Manifest { artifacts };
    jsonl::write_json(&dir.join(artifacts::MANIFEST), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------- the loop

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: Vec<String>,
}

impl Progress {
    fn done(&self, phase: &str) -> bool {
        self.completed.iter().any(|p| p == phase)
    }
}

struct Tracker {
    path: PathBuf,
    progress: Progress,
}

impl Tracker {
    fn phase<T>(&mut self, name: &str, load: impl FnOnce() -> Result<T>, run: impl FnOnce() -> Result<T>) -> Result<T> {
        if self.progress.done(name) {
            log::info!("{name}: already complete, loading outputs");
            return load();
        }
        log::info!("{name}: running");
        let value = run()?;
        self.progress.completed.push(name.to_string());
        jsonl::write_json(&self.path, &self.progress)?;
        Ok(value)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub manifest: Manifest,
}

fn evaluator_config(cfg: &RunConfig) -> EvaluatorConfig {
    EvaluatorConfig {
        workers: cfg.eval_workers,
        container_runtime: cfg.container_runtime.clone(),
    }
}

/// Config text recorded in a run directory; the output directory is left
/// out so that identical runs in different places match.
pub fn recorded_config(raw: &RawConfig) -> String {
    let mut r = raw.clone();
    r.set("run.out_dir", "").expect("known key");
    r.to_ini()
}

/// One iteration of the loop. With `resume`, phases listed in the run
/// directory's progress file are loaded instead of recomputed.
pub fn run_loop(cfg: &RunConfig, raw: &RawConfig, resume: bool) -> Result<RunOutcome> {
    use artifacts as a;
    let dir = cfg.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = |name: &str| dir.join(name);
    let progress_path = p(a::PROGRESS);
    let progress = if resume && progress_path.exists() {
        jsonl::read_json(&progress_path)?
    } else {
        Progress::default()
    };
    let mut tracker = Tracker {
        path: progress_path,
        progress,
    };
    let config_text = recorded_config(raw);
    std::fs::write(p(a::CONFIG), &config_text).map_err(io_err(&p(a::CONFIG)))?;

    let tasks = tracker.phase(
        "tasks",
        || Ok(task::load_tasks(&p(a::TASKS))?),
        || gen_tasks(&cfg.dataset, &p(a::TASKS)),
    )?;
    let init = tracker.phase(
        "init",
        || Ok(PolicyCheckpoint::load(&p(a::POLICY_INIT))?),
        || {
            let c = initial_checkpoint(&tasks, cfg.init_policy.as_deref())?;
            c.save(&p(a::POLICY_INIT))?;
            Ok(c)
        },
    )?;
    let backend = policy_backend(&cfg.backend, &init.policy, &tasks, INIT_BACKEND_ID);
    let rollouts = tracker.phase(
        "rollout",
        || Ok(jsonl::read_jsonl(&p(a::ROLLOUTS))?),
        || {
            rollout_phase(
                &tasks,
                backend.as_ref(),
                &cfg.rollout,
                EngineMode::Train,
                cfg.rollout_n,
                cfg.rollout_seed,
                &p(a::ROLLOUTS),
            )
        },
    )?;
    let ecfg = evaluator_config(cfg);
    let rewards = tracker.phase(
        "evaluate",
        || Ok(jsonl::read_jsonl(&p(a::REWARDS))?),
        || evaluate_phase(&tasks, &rollouts, &ecfg, &p(a::REWARDS)),
    )?;

    let (guidance, guided, guided_rewards) = if cfg.guidance_enabled {
        let teacher = teacher_from(&cfg.teacher, cfg.reference_patches.as_deref())?;
        let guidance = tracker.phase(
            "guide",
            || Ok(jsonl::read_jsonl(&p(a::GUIDANCE))?),
            || {
                guide_phase(
                    &tasks,
                    &rollouts,
                    &rewards,
                    teacher.as_ref(),
                    cfg.teacher_workers,
                    &p(a::GUIDANCE),
                )
            },
        )?;
        let guided = tracker.phase(
            "reattempt",
            || Ok(jsonl::read_jsonl(&p(a::GUIDED_ROLLOUTS))?),
            || {
                reattempt_phase(
                    &tasks,
                    &rollouts,
                    &guidance,
                    backend.as_ref(),
                    &cfg.rollout,
                    &p(a::GUIDED_ROLLOUTS),
                )
            },
        )?;
        let guided_rewards = tracker.phase(
            "evaluate_guided",
            || Ok(jsonl::read_jsonl(&p(a::GUIDED_REWARDS))?),
            || evaluate_phase(&tasks, &guided, &ecfg, &p(a::GUIDED_REWARDS)),
        )?;
        (guidance, guided, Some(guided_rewards))
    } else {
        (Vec::new(), Vec::new(), None)
    };

    let dataset = tracker.phase(
        "assemble",
        || Ok(pairs::load_dataset(&p(a::DATASET))?),
        || {
            let inputs = AssemblyInputs {
                trajectories: &rollouts,
                rewards: &rewards,
                guided: &guided,
                guided_rewards: guided_rewards.as_deref().unwrap_or_default(),
                guidance: &guidance,
            };
            assemble_phase(&inputs, &cfg.assembly, &p(a::DATASET))
        },
    )?;

    let report_inputs = |eval: Option<&[RewardRecord]>, ranking: Option<&[RankRecord]>| -> Result<RunReport> {
        report_phase(
            &ReportInputs {
                rewards: &rewards,
                guided_rewards: guided_rewards.as_deref(),
                eval_rewards: eval,
                ranking,
                accounting: Some(&dataset.accounting),
            },
            cfg.bootstrap_seed,
            &p(a::REPORT_JSON),
            &p(a::REPORT_TXT),
        )
    };

    if !matches!(cfg.backend, BackendChoice::Tabular) {
        log::info!("remote policy: stopping after dataset export");
        let report = report_inputs(None, None)?;
        let manifest = write_manifest(dir)?;
        return Ok(RunOutcome { report, manifest });
    }

    let sft = tracker.phase(
        "sft",
        || Ok(PolicyCheckpoint::load(&p(a::POLICY_SFT))?),
        || sft_phase(&init, &dataset, &cfg.sft, &p(a::POLICY_SFT), &p(a::SFT_LOG)),
    )?;
    let dpo = tracker.phase(
        "dpo",
        || Ok(PolicyCheckpoint::load(&p(a::POLICY_DPO))?),
        || {
            Ok(dpo_phase(
                &sft,
                &dataset,
                &cfg.dpo,
                cfg.strict_pairs,
                &p(a::POLICY_DPO),
                &p(a::DPO_LOG),
            )?
            .0)
        },
    )?;
    let final_backend = policy_backend(&cfg.backend, &dpo.policy, &tasks, FINAL_BACKEND_ID);
    let eval_rollouts = tracker.phase(
        "eval_rollout",
        || Ok(jsonl::read_jsonl(&p(a::EVAL_ROLLOUTS))?),
        || {
            rollout_phase(
                &tasks,
                final_backend.as_ref(),
                &cfg.rollout,
                EngineMode::Eval,
                cfg.eval_n,
                cfg.eval_seed,
                &p(a::EVAL_ROLLOUTS),
            )
        },
    )?;
    let eval_rewards = tracker.phase(
        "eval_evaluate",
        || Ok(jsonl::read_jsonl(&p(a::EVAL_REWARDS))?),
        || evaluate_phase(&tasks, &eval_rollouts, &ecfg, &p(a::EVAL_REWARDS)),
    )?;
    let rm = tracker.phase(
        "train_rm",
        || Ok(PairwiseRm::load(&p(a::RM))?),
        || rm_phase(&tasks, &dataset, &cfg.rm, &p(a::RM), &p(a::RM_LOG)),
    )?;
    let ranking = tracker.phase(
        "rank",
        || Ok(jsonl::read_jsonl(&p(a::RANKING))?),
        || rank_phase(&tasks, &rm, &eval_rollouts, &eval_rewards, cfg.rm_k, &p(a::RANKING)),
    )?;
    let report = report_inputs(Some(&eval_rewards), Some(&ranking))?;
    let manifest = write_manifest(dir)?;
    Ok(RunOutcome { report, manifest })
}

/// Loads a config the way the CLI does.
pub fn load_config(file: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, RawConfig)> {
    Ok(RunConfig::load(file, overrides)?)
}
