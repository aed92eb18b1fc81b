//! Preference pairs and the SFT subset built from scored trajectories.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluator::RewardRecord;
use crate::guidance::{Guidance, HINT_DELIMITER};
use crate::jsonl::{self, JsonlError};
use crate::rollout::Trajectory;

pub const DEFAULT_MAX_PAIRS_PER_TASK: usize = 4;
pub const DEFAULT_SFT_FRACTION: f64 = 0.2;

/// A trajectory together with its reward.
pub type Scored<'a> = (&'a Trajectory, &'a RewardRecord);

#[derive(Debug, thiserror::Error)]
pub enum PairError {
    #[error("guided response of {0} contains the hint block")]
    Leakage(String),
    #[error("{trajectory}: expected reward {expected}, found {found}")]
    Reward {
        trajectory: String,
        expected: u8,
        found: u8,
    },
    #[error("{0}: winner of a guided pair must be guided")]
    NotGuided(String),
    #[error("{0}: loser of a guided pair must be unguided")]
    GuidedLoser(String),
    #[error("pair mixes tasks `{0}` and `{1}`")]
    TaskMismatch(String, String),
    #[error("reward record of {record} does not belong to {trajectory}")]
    RecordMismatch { trajectory: String, record: String },
    #[error("sft fraction must be in (0, 1], got {0}")]
    Fraction(f64),
    #[error("dataset file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RolloutPair,
    GuidedRepairPair,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRef {
    pub trajectory_ref: String,
    pub response: String,
}

impl ResponseRef {
    fn of(t: &Trajectory) -> Self {
        ResponseRef {
            trajectory_ref: t.reference(),
            response: t.response(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task_id: String,
    pub prompt: String,
    pub winner: ResponseRef,
    pub loser: ResponseRef,
    pub provenance: Provenance,
    pub winner_on_policy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub task_id: String,
    pub trajectory_ref: String,
    pub prompt: String,
    pub target: String,
    pub reward: u8,
}

/// Counts kept alongside the dataset so totals reconcile with reward files.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub tasks: usize,
    pub unguided_trajectories: usize,
    pub unguided_positives: usize,
    pub unguided_negatives: usize,
    pub guided_trajectories: usize,
    pub guided_positives: usize,
    pub rollout_pairs: usize,
    pub guided_repair_pairs: usize,
    /// Guided successes with no unguided failure to pair against.
    pub guided_without_loser: usize,
    pub dropped_duplicate_responses: usize,
    pub dropped_leakage: usize,
    pub dropped_off_policy_winners: usize,
    pub sft_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    pub max_pairs_per_task: usize,
    pub sft_fraction: f64,
    /// Keep the hint block in guided winners' prompts (ablation).
    pub keep_guidance_in_prompt: bool,
    pub allow_off_policy_winners: bool,
    pub seed: u64,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            max_pairs_per_task: DEFAULT_MAX_PAIRS_PER_TASK,
            sft_fraction: DEFAULT_SFT_FRACTION,
            keep_guidance_in_prompt: false,
            allow_off_policy_winners: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RlvrDataset {
    pub pairs: Vec<PreferencePair>,
    pub sft: Vec<SftExample>,
    pub accounting: Accounting,
}

impl RlvrDataset {
    pub fn pairs_by(&self, provenance: Provenance) -> impl Iterator<Item = &PreferencePair> {
        self.pairs.iter().filter(move |p| p.provenance == provenance)
    }
}

fn check_record((t, r): Scored) -> Result<(), PairError> {
    if t.reference() != r.trajectory_ref {
        return Err(PairError::RecordMismatch {
            trajectory: t.reference(),
            record: r.trajectory_ref.clone(),
        });
    }
    Ok(())
}

fn group_by_task<'a>(scored: &[Scored<'a>]) -> BTreeMap<&'a str, Vec<Scored<'a>>> {
    let mut groups: BTreeMap<&str, Vec<Scored>> = BTreeMap::new();
    for &(t, r) in scored {
        groups.entry(t.task_id.as_str()).or_default().push((t, r));
    }
    groups
}

/// Pairs each positive with distinct negatives of the same task, round-robin.
///
/// Round `r` pairs positive `i` with negative `(i + r) mod |N|`; pairs are
/// emitted until `max_pairs_per_task` is reached. Byte-identical responses
/// are skipped. Output is grouped by task id.
pub fn assemble_rollout_pairs(scored: &[Scored], max_pairs_per_task: usize) -> Vec<PreferencePair> {
    assemble_rollout_pairs_counted(scored, max_pairs_per_task).0
}

fn assemble_rollout_pairs_counted(scored: &[Scored], max_pairs_per_task: usize) -> (Vec<PreferencePair>, usize) {
    let mut pairs = Vec::new();
    let mut duplicates = 0;
    for (task, group) in group_by_task(scored) {
        let pos: Vec<&Trajectory> = group.iter().filter(|(_, r)| r.reward == 1).map(|(t, _)| *t).collect();
        let neg: Vec<&Trajectory> = group.iter().filter(|(_, r)| r.reward == 0).map(|(t, _)| *t).collect();
        let mut emitted = 0;
        'rounds: for round in 0..neg.len() {
            for (i, w) in pos.iter().enumerate() {
                if emitted >= max_pairs_per_task {
                    break 'rounds;
                }
                let l = neg[(i + round) % neg.len()];
                let (winner, loser) = (ResponseRef::of(w), ResponseRef::of(l));
                if winner.response == loser.response {
                    duplicates += 1;
                    continue;
                }
                pairs.push(PreferencePair {
                    task_id: task.to_string(),
                    prompt: w.prompt().to_string(),
                    winner,
                    loser,
                    provenance: Provenance::RolloutPair,
                    winner_on_policy: w.on_policy,
                });
                emitted += 1;
            }
        }
    }
    (pairs, duplicates)
}

/// Pairs a guided success with an unguided failure of the same task.
///
/// The prompt is the unguided one unless `keep_guidance` is set.
pub fn assemble_guided_pair(failed: Scored, guided: Scored, keep_guidance: bool) -> Result<PreferencePair, PairError> {
    let ((lt, lr), (wt, wr)) = (failed, guided);
    check_record(failed)?;
    check_record(guided)?;
    if lt.task_id != wt.task_id {
        return Err(PairError::TaskMismatch(wt.task_id.clone(), lt.task_id.clone()));
    }
    if wr.reward != 1 {
        return Err(PairError::Reward {
            trajectory: wt.reference(),
            expected: 1,
            found: wr.reward,
        });
    }
    if lr.reward != 0 {
        return Err(PairError::Reward {
            trajectory: lt.reference(),
            expected: 0,
            found: lr.reward,
        });
    }
    if !wt.is_guided() {
        return Err(PairError::NotGuided(wt.reference()));
    }
    if lt.is_guided() {
        return Err(PairError::GuidedLoser(lt.reference()));
    }
    let winner = ResponseRef::of(wt);
    if winner.response.contains(HINT_DELIMITER) {
        return Err(PairError::Leakage(wt.reference()));
    }
    let prompt = if keep_guidance { wt.raw_prompt() } else { wt.prompt() };
    Ok(PreferencePair {
        task_id: wt.task_id.clone(),
        prompt: prompt.to_string(),
        winner,
        loser: ResponseRef::of(lt),
        provenance: Provenance::GuidedRepairPair,
        winner_on_policy: wt.on_policy,
    })
}

/// Stratified sample of `fraction` of the unguided positives.
///
/// The target size is `round(fraction * N)`; a seeded shuffle is walked and
/// a positive is taken unless its task already holds
/// `ceil(fraction * task count)` examples. Output keeps input order.
pub fn sample_sft_subset(positives: &[Scored], fraction: f64, seed: u64) -> Result<Vec<SftExample>, PairError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PairError::Fraction(fraction));
    }
    let eligible: Vec<&Trajectory> = positives
        .iter()
        .filter(|(t, r)| r.reward == 1 && !t.is_guided())
        .map(|(t, _)| *t)
        .collect();
    if eligible.is_empty() {
        log::warn!("no positive trajectories; SFT subset is empty");
        return Ok(Vec::new());
    }
    let mut per_task: HashMap<&str, usize> = HashMap::new();
    for t in &eligible {
        *per_task.entry(t.task_id.as_str()).or_default() += 1;
    }
    let cap: HashMap<&str, usize> = per_task
        .iter()
        .map(|(k, &n)| (*k, (fraction * n as f64 - 1e-9).ceil() as usize))
        .collect();
    let target = (fraction * eligible.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken: HashMap<&str, usize> = HashMap::new();
    let mut chosen = Vec::with_capacity(target);
    for i in order {
        if chosen.len() == target {
            break;
        }
        let task = eligible[i].task_id.as_str();
        let n = taken.entry(task).or_default();
        if *n < cap[task] {
            *n += 1;
            chosen.push(i);
        }
    }
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|i| {
            let t = eligible[i];
            SftExample {
                task_id: t.task_id.clone(),
                trajectory_ref: t.reference(),
                prompt: t.prompt().to_string(),
                target: t.response(),
                reward: 1,
            }
        })
        .collect())
}

/// Builds the full dataset: rollout pairs, guided repair pairs, SFT subset.
///
/// A guided success is paired against the failure it was guided from; when
/// that failure is unavailable another unguided failure of the task is drawn
/// with the config seed, and if none exists the success is only counted.
pub fn assemble_dataset(
    unguided: &[Scored],
    guided: &[Scored],
    guidance: &[Guidance],
    config: &AssemblyConfig,
) -> Result<RlvrDataset, PairError> {
    for &s in unguided.iter().chain(guided) {
        check_record(s)?;
    }
    let mut acc = Accounting {
        tasks: unguided
            .iter()
            .chain(guided)
            .map(|(t, _)| t.task_id.as_str())
            .collect::<HashSet<_>>()
            .len(),
        unguided_trajectories: unguided.len(),
        unguided_positives: unguided.iter().filter(|(_, r)| r.reward == 1).count(),
        unguided_negatives: unguided.iter().filter(|(_, r)| r.reward == 0).count(),
        guided_trajectories: guided.len(),
        guided_positives: guided.iter().filter(|(_, r)| r.reward == 1).count(),
        ..Accounting::default()
    };

    let rollout_pool: Vec<Scored> = unguided
        .iter()
        .copied()
        .filter(|(t, r)| {
            let keep = r.reward == 0 || t.on_policy || config.allow_off_policy_winners;
            if !keep {
                acc.dropped_off_policy_winners += 1;
            }
            keep
        })
        .collect();
    let (mut pairs, dups) = assemble_rollout_pairs_counted(&rollout_pool, config.max_pairs_per_task);
    acc.dropped_duplicate_responses += dups;

    let source_of: HashMap<&str, &str> = guidance
        .iter()
        .map(|g| (g.id.as_str(), g.source_trajectory_ref.as_str()))
        .collect();
    let failures: BTreeMap<&str, Vec<Scored>> = group_by_task(
        &unguided
            .iter()
            .copied()
            .filter(|(t, r)| r.reward == 0 && !t.is_guided())
            .collect::<Vec<_>>(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive_seed(config.seed, &["guided-losers"]));
    for &(wt, wr) in guided {
        if wr.reward != 1 {
            continue;
        }
        if !wt.on_policy && !config.allow_off_policy_winners {
            acc.dropped_off_policy_winners += 1;
            continue;
        }
        let Some(candidates) = failures.get(wt.task_id.as_str()) else {
            acc.guided_without_loser += 1;
            continue;
        };
        let source = wt.guidance_id.as_deref().and_then(|g| source_of.get(g)).copied();
        let loser = source
            .and_then(|src| candidates.iter().find(|(t, _)| t.reference() == src))
            .or_else(|| candidates.choose(&mut rng))
            .copied()
            .expect("failure groups are non-empty");
        match assemble_guided_pair(loser, (wt, wr), config.keep_guidance_in_prompt) {
            Ok(p) if p.winner.response == p.loser.response => acc.dropped_duplicate_responses += 1,
            Ok(p) => pairs.push(p),
            Err(PairError::Leakage(r)) => {
                log::warn!("dropping guided pair: response of {r} leaks the hint");
                acc.dropped_leakage += 1;
            }
            Err(e) => return Err(e),
        }
    }

    let mut seen = HashSet::new();
    pairs.retain(|p| seen.insert((p.winner.trajectory_ref.clone(), p.loser.trajectory_ref.clone())));
    acc.rollout_pairs = pairs.iter().filter(|p| p.provenance == Provenance::RolloutPair).count();
    acc.guided_repair_pairs = pairs.len() - acc.rollout_pairs;

    let positives: Vec<Scored> = unguided.iter().copied().filter(|(_, r)| r.reward == 1).collect();
    let sft = sample_sft_subset(&positives, config.sft_fraction, config.seed)?;
    acc.sft_examples = sft.len();
    Ok(RlvrDataset {
        pairs,
        sft,
        accounting: acc,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DatasetRecord {
    Header { accounting: Accounting },
    Pair(PreferencePair),
    Sft(SftExample),
}

/// Writes a header record with the accounting, then pairs, then SFT examples.
pub fn emit_dataset(dataset: &RlvrDataset, path: &Path) -> Result<(), PairError> {
    let records: Vec<DatasetRecord> = std::iter::once(DatasetRecord::Header {
        accounting: dataset.accounting.clone(),
    })
    .chain(dataset.pairs.iter().cloned().map(DatasetRecord::Pair))
    .chain(dataset.sft.iter().cloned().map(DatasetRecord::Sft))
    .collect();
    jsonl::write_jsonl(path, &records)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<RlvrDataset, PairError> {
    let records: Vec<DatasetRecord> = jsonl::read_jsonl(path)?;
    let mut iter = records.into_iter();
    let Some(DatasetRecord::Header { accounting }) = iter.next() else {
        return Err(PairError::Malformed(format!(
            "{}: first record is not a header",
            path.display()
        )));
    };
    let mut ds = RlvrDataset {
        accounting,
        ..RlvrDataset::default()
    };
    for rec in iter {
        match rec {
            DatasetRecord::Pair(p) => ds.pairs.push(p),
            DatasetRecord::Sft(s) => ds.sft.push(s),
            DatasetRecord::Header { .. } => {
                return Err(PairError::Malformed(format!(
                    "{}: second header record",
                    path.display()
                )))
            }
        }
    }
    Ok(ds)
}
