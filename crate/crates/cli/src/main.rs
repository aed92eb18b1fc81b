//! `rlvr`: drives the RLVR loop one phase at a time or end to end.
//!
//! Every path defaults to its standard name inside the run directory
//! (`run.out_dir`), so `rlvr <phase> --config run.ini` chains without flags.
//!
//! Exit codes: 0 success, 1 usage error, 2 phase failure, 3 infrastructure error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rlvr_core::config::{BackendChoice, RawConfig, RunConfig};
use rlvr_core::evaluator::{EvaluatorConfig, RewardRecord};
use rlvr_core::guidance::Guidance;
use rlvr_core::jsonl;
use rlvr_core::pairs::load_dataset;
use rlvr_core::pipeline::{self, artifacts, AssemblyInputs, PipelineError, RankRecord, ReportInputs};
use rlvr_core::policy::PolicyCheckpoint;
use rlvr_core::reward_model::PairwiseRm;
use rlvr_core::rollout::{EngineMode, Trajectory};
use rlvr_core::task::{load_tasks, TaskDataset};

#[derive(Parser)]
#[command(name = "rlvr", version, about = "Agent RLVR training loop")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set dpo.beta=0.2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the task dataset (synthetic suite or task file) as JSONL.
    GenTasks {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample rollouts, or guided reattempts with `--guidance`.
    Rollout {
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Policy checkpoint; uniform when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Evaluation rollouts (eval.n, eval.seed, no guidance).
        #[arg(long, conflicts_with = "guidance")]
        eval: bool,
        /// Guidance records; reattempts each guided failure.
        #[arg(long)]
        guidance: Option<PathBuf>,
        /// Rollouts the guidance refers to.
        #[arg(long, requires = "guidance")]
        source: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score rollouts against their tests.
    Evaluate {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask the teacher for guidance on every failed rollout.
    Guide {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        rewards: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build preference pairs and the SFT subset.
    Assemble {
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        rewards: Option<PathBuf>,
        /// Skip guided inputs even when present.
        #[arg(long)]
        no_guided: bool,
        #[arg(long)]
        guidance: Option<PathBuf>,
        #[arg(long)]
        guided_rollouts: Option<PathBuf>,
        #[arg(long)]
        guided_rewards: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised fine-tuning on the SFT subset.
    TrainSft {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// DPO on the preference pairs against a snapshot of the input policy.
    TrainDpo {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the pairwise reward model.
    TrainRm {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Best-of-k selection with the reward model.
    Rank {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
        #[arg(long)]
        rollouts: Option<PathBuf>,
        #[arg(long)]
        rewards: Option<PathBuf>,
        /// Defaults to rm.k.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a run directory into report.json and report.txt.
    Report,
    /// Hash every file of the run directory into manifest.json.
    Manifest,
    /// One full iteration of the loop.
    RunLoop {
        /// Continue from the run directory's progress file.
        #[arg(long)]
        resume: bool,
    },
}

struct Ctx {
    cfg: RunConfig,
    raw: RawConfig,
}

impl Ctx {
    fn path(&self, given: Option<PathBuf>, name: &str) -> PathBuf {
        given.unwrap_or_else(|| self.cfg.out_dir.join(name))
    }

    /// Output path; its directory is created.
    fn out(&self, given: Option<PathBuf>, name: &str) -> Result<PathBuf, PipelineError> {
        let p = self.path(given, name);
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        Ok(p)
    }

    fn tasks(&self, given: Option<PathBuf>) -> Result<TaskDataset, PipelineError> {
        Ok(load_tasks(&self.path(given, artifacts::TASKS))?)
    }

    fn evaluator(&self) -> EvaluatorConfig {
        EvaluatorConfig {
            workers: self.cfg.eval_workers,
            container_runtime: self.cfg.container_runtime.clone(),
        }
    }
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    Ok(jsonl::read_jsonl(path)?)
}

fn read_if_exists<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<Vec<T>>, PipelineError> {
    if path.exists() {
        read(path).map(Some)
    } else {
        Ok(None)
    }
}

fn require_tabular(cfg: &RunConfig, what: &str) -> Result<(), PipelineError> {
    match cfg.backend {
        BackendChoice::Tabular => Ok(()),
        BackendChoice::Remote(_) => Err(PipelineError::Usage(format!(
            "{what} needs the tabular policy; remote policies stop at dataset export"
        ))),
    }
}

fn run(ctx: &Ctx, command: Command) -> Result<(), PipelineError> {
    use artifacts as a;
    let cfg = &ctx.cfg;
    match command {
        Command::GenTasks { out } => {
            let ds = pipeline::gen_tasks(&cfg.dataset, &ctx.out(out, a::TASKS)?)?;
            println!("{} tasks", ds.len());
        }
        Command::Rollout {
            tasks,
            policy,
            eval,
            guidance,
            source,
            out,
        } => {
            let tasks = ctx.tasks(tasks)?;
            let ckpt = pipeline::initial_checkpoint(&tasks, policy.as_deref())?;
            let label = if eval {
                pipeline::FINAL_BACKEND_ID
            } else {
                pipeline::INIT_BACKEND_ID
            };
            let backend = pipeline::policy_backend(&cfg.backend, &ckpt.policy, &tasks, label);
            let produced = match guidance {
                Some(g) => {
                    let guidance: Vec<Guidance> = read(&g)?;
                    let source: Vec<Trajectory> = read(&ctx.path(source, a::ROLLOUTS))?;
                    let out = ctx.out(out, a::GUIDED_ROLLOUTS)?;
                    pipeline::reattempt_phase(&tasks, &source, &guidance, backend.as_ref(), &cfg.rollout, &out)?
                }
                None if eval => {
                    let out = ctx.out(out, a::EVAL_ROLLOUTS)?;
                    pipeline::rollout_phase(
                        &tasks,
                        backend.as_ref(),
                        &cfg.rollout,
                        EngineMode::Eval,
                        cfg.eval_n,
                        cfg.eval_seed,
                        &out,
                    )?
                }
                None => {
                    let out = ctx.out(out, a::ROLLOUTS)?;
                    pipeline::rollout_phase(
                        &tasks,
                        backend.as_ref(),
                        &cfg.rollout,
                        EngineMode::Train,
                        cfg.rollout_n,
                        cfg.rollout_seed,
                        &out,
                    )?
                }
            };
            println!("{} trajectories", produced.len());
        }
        Command::Evaluate { tasks, rollouts, out } => {
            let tasks = ctx.tasks(tasks)?;
            let trajectories: Vec<Trajectory> = read(&ctx.path(rollouts, a::ROLLOUTS))?;
            let records =
                pipeline::evaluate_phase(&tasks, &trajectories, &ctx.evaluator(), &ctx.out(out, a::REWARDS)?)?;
            let passed = records.iter().filter(|r| r.passed()).count();
            println!("{passed}/{} passed", records.len());
        }
        Command::Guide {
            tasks,
            rollouts,
            rewards,
            out,
        } => {
            let tasks = ctx.tasks(tasks)?;
            let trajectories: Vec<Trajectory> = read(&ctx.path(rollouts, a::ROLLOUTS))?;
            let records: Vec<RewardRecord> = read(&ctx.path(rewards, a::REWARDS))?;
            let teacher = pipeline::teacher_from(&cfg.teacher, cfg.reference_patches.as_deref())?;
            let guidance = pipeline::guide_phase(
                &tasks,
                &trajectories,
                &records,
                teacher.as_ref(),
                cfg.teacher_workers,
                &ctx.out(out, a::GUIDANCE)?,
            )?;
            println!("{} guidance records", guidance.len());
        }
        Command::Assemble {
            rollouts,
            rewards,
            no_guided,
            guidance,
            guided_rollouts,
            guided_rewards,
            out,
        } => {
            let trajectories: Vec<Trajectory> = read(&ctx.path(rollouts, a::ROLLOUTS))?;
            let records: Vec<RewardRecord> = read(&ctx.path(rewards, a::REWARDS))?;
            let (g, gt, gr) = if no_guided {
                (Vec::new(), Vec::new(), Vec::new())
            } else {
                (
                    read_if_exists(&ctx.path(guidance, a::GUIDANCE))?.unwrap_or_default(),
                    read_if_exists(&ctx.path(guided_rollouts, a::GUIDED_ROLLOUTS))?.unwrap_or_default(),
                    read_if_exists(&ctx.path(guided_rewards, a::GUIDED_REWARDS))?.unwrap_or_default(),
                )
            };
            let inputs = AssemblyInputs {
                trajectories: &trajectories,
                rewards: &records,
                guided: &gt,
                guided_rewards: &gr,
                guidance: &g,
            };
            let ds = pipeline::assemble_phase(&inputs, &cfg.assembly, &ctx.out(out, a::DATASET)?)?;
            println!(
                "{} rollout pairs, {} guided repair pairs, {} SFT examples",
                ds.accounting.rollout_pairs, ds.accounting.guided_repair_pairs, ds.accounting.sft_examples
            );
        }
        Command::TrainSft {
            tasks,
            policy,
            dataset,
            out,
            log,
        } => {
            require_tabular(cfg, "train-sft")?;
            let tasks = ctx.tasks(tasks)?;
            let policy = policy.or_else(|| Some(ctx.path(None, a::POLICY_INIT)).filter(|p| p.exists()));
            let ckpt = pipeline::initial_checkpoint(&tasks, policy.as_deref())?;
            let ds = load_dataset(&ctx.path(dataset, a::DATASET))?;
            pipeline::sft_phase(
                &ckpt,
                &ds,
                &cfg.sft,
                &ctx.out(out, a::POLICY_SFT)?,
                &ctx.out(log, a::SFT_LOG)?,
            )?;
        }
        Command::TrainDpo {
            policy,
            dataset,
            out,
            log,
        } => {
            require_tabular(cfg, "train-dpo")?;
            let ckpt = PolicyCheckpoint::load(&ctx.path(policy, a::POLICY_SFT))?;
            let ds = load_dataset(&ctx.path(dataset, a::DATASET))?;
            let (_, dropped) = pipeline::dpo_phase(
                &ckpt,
                &ds,
                &cfg.dpo,
                cfg.strict_pairs,
                &ctx.out(out, a::POLICY_DPO)?,
                &ctx.out(log, a::DPO_LOG)?,
            )?;
            if dropped > 0 {
                println!("{dropped} pairs dropped: responses outside the action space");
            }
        }
        Command::TrainRm {
            tasks,
            dataset,
            out,
            log,
        } => {
            let tasks = ctx.tasks(tasks)?;
            let ds = load_dataset(&ctx.path(dataset, a::DATASET))?;
            pipeline::rm_phase(&tasks, &ds, &cfg.rm, &ctx.out(out, a::RM)?, &ctx.out(log, a::RM_LOG)?)?;
        }
        Command::Rank {
            tasks,
            rm,
            rollouts,
            rewards,
            k,
            out,
        } => {
            let tasks = ctx.tasks(tasks)?;
            let rm = PairwiseRm::load(&ctx.path(rm, a::RM))?;
            let trajectories: Vec<Trajectory> = read(&ctx.path(rollouts, a::EVAL_ROLLOUTS))?;
            let records: Vec<RewardRecord> = read_if_exists(&ctx.path(rewards, a::EVAL_REWARDS))?.unwrap_or_default();
            let k = k.unwrap_or(cfg.rm_k);
            if k == 0 {
                return Err(PipelineError::Usage("--k must be at least 1".into()));
            }
            let ranking = pipeline::rank_phase(&tasks, &rm, &trajectories, &records, k, &ctx.out(out, a::RANKING)?)?;
            println!("{} tasks ranked", ranking.len());
        }
        Command::Report => {
            let dir = &cfg.out_dir;
            let rewards: Vec<RewardRecord> = read(&dir.join(a::REWARDS))?;
            let guided: Option<Vec<RewardRecord>> = read_if_exists(&dir.join(a::GUIDED_REWARDS))?;
            let eval: Option<Vec<RewardRecord>> = read_if_exists(&dir.join(a::EVAL_REWARDS))?;
            let ranking: Option<Vec<RankRecord>> = read_if_exists(&dir.join(a::RANKING))?;
            let dataset_path = dir.join(a::DATASET);
            let accounting = if dataset_path.exists() {
                Some(load_dataset(&dataset_path)?.accounting)
            } else {
                None
            };
            pipeline::report_phase(
                &ReportInputs {
                    rewards: &rewards,
                    guided_rewards: guided.as_deref(),
                    eval_rewards: eval.as_deref(),
                    ranking: ranking.as_deref(),
                    accounting: accounting.as_ref(),
                },
                cfg.bootstrap_seed,
                &dir.join(a::REPORT_JSON),
                &dir.join(a::REPORT_TXT),
            )?;
            print!(
                "{}",
                std::fs::read_to_string(dir.join(a::REPORT_TXT)).unwrap_or_default()
            );
        }
        Command::Manifest => {
            let m = pipeline::write_manifest(&cfg.out_dir)?;
            println!("{} artifacts", m.artifacts.len());
        }
        Command::RunLoop { resume } => {
            let outcome = pipeline::run_loop(cfg, &ctx.raw, resume)?;
            print!(
                "{}",
                std::fs::read_to_string(cfg.out_dir.join(a::REPORT_TXT)).unwrap_or_default()
            );
            println!(
                "{} artifacts in {}",
                outcome.manifest.artifacts.len(),
                cfg.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = pipeline::load_config(cli.common.config.as_deref(), &cli.common.overrides)
        .map(|(cfg, raw)| Ctx { cfg, raw })
        .and_then(|ctx| run(&ctx, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
