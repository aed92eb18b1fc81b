//! Verifiable-reward training loop for code-repair agents.
//!
//! Tasks are sampled with a policy, patches are scored by running tests,
//! failures are reattempted with teacher hints, and the outcomes become
//! preference pairs for SFT and DPO. A small pairwise reward model reranks
//! candidates at test time.

pub mod config;
pub mod evaluator;
pub mod guidance;
pub mod jsonl;
pub mod metrics;
pub mod pairs;
pub mod pipeline;
pub mod policy;
pub mod reward_model;
pub mod rollout;
pub mod seed;
pub mod task;
pub mod train;

pub use evaluator::{Evaluator, RewardRecord};
pub use guidance::{Guidance, GuidanceSections, Teacher};
pub use metrics::{pass_at_k, EvalReport};
pub use pairs::{PreferencePair, Provenance, RlvrDataset};
pub use policy::{Action, PolicyCheckpoint, ReferencePolicy, TabularPolicy};
pub use reward_model::PairwiseRm;
pub use rollout::{Patch, PolicyBackend, RolloutEngine, Trajectory};
pub use task::{generate_synth_suite, load_tasks, Task, TaskDataset};
