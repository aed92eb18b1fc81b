//! pass@1, pass@k, best@1 and guidance-uplift reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluator::RewardRecord;

pub const PASS_AT_K: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
/// Slot holding the greedy rollout.
pub const GREEDY_SLOT: usize = 0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("pass@k needs 1 <= k <= n, got n={n}, k={k}")]
    K { n: usize, k: usize },
    #[error("success count {c} exceeds rollout count {n}")]
    Count { n: usize, c: usize },
    #[error("task `{0}` has no greedy rollout (slot {GREEDY_SLOT})")]
    NoGreedy(String),
    #[error("task `{0}`: duplicate record for slot {1}")]
    DuplicateSlot(String, usize),
    #[error("guided record {0} passed to an evaluation aggregate")]
    Guided(String),
    #[error("no records")]
    Empty,
}

/// Unbiased estimator `1 − C(n−c, k) / C(n, k)`, as a running product.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, MetricsError> {
    if k == 0 || k > n {
        return Err(MetricsError::K { n, k });
    }
    if c > n {
        return Err(MetricsError::Count { n, c });
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n−c, k)/C(n, k) = Π_{i=n−c+1}^{n} (1 − k/i)
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub task_id: String,
    pub n: usize,
    pub c: usize,
    pub greedy_reward: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_reward: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Bootstrap standard deviation over tasks.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub attempts: usize,
    pub successes: usize,
    pub empty_patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub per_round: Vec<RoundStats>,
    pub attempts: usize,
    pub successes: usize,
    pub empty_patches: usize,
    /// Successes per round, averaged over rounds.
    pub mean_successes: f64,
    pub success_rate: f64,
    pub empty_patch_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftReport {
    pub unguided: ArmStats,
    pub guided: ArmStats,
    pub delta_mean_successes: f64,
    pub delta_success_rate: f64,
    pub delta_empty_patch_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_tasks: usize,
    pub total_rollouts: usize,
    pub total_successes: usize,
    pub pass_at_1: MeanStd,
    /// Estimator values, for each k not exceeding the smallest per-task n.
    pub pass_at_k: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_at_1: Option<MeanStd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_uplift: Option<UpliftReport>,
    pub per_task: Vec<TaskCounts>,
}

/// Mean of `values` and the standard deviation of the mean under
/// `resamples` seeded bootstrap draws.
pub fn bootstrap_mean_std(values: &[f64], resamples: usize, seed: u64) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if resamples < 2 {
        return MeanStd { mean, std: 0.0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let m = means.iter().sum::<f64>() / resamples as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    MeanStd { mean, std: var.sqrt() }
}

/// Per-task counts from unguided evaluation records.
pub fn task_counts(records: &[RewardRecord], best: &BTreeMap<String, u8>) -> Result<Vec<TaskCounts>, MetricsError> {
    let mut by_task: BTreeMap<&str, BTreeMap<usize, &RewardRecord>> = BTreeMap::new();
    for r in records {
        if r.guided {
            return Err(MetricsError::Guided(r.trajectory_ref.clone()));
        }
        if by_task.entry(&r.task_id).or_default().insert(r.slot, r).is_some() {
            return Err(MetricsError::DuplicateSlot(r.task_id.clone(), r.slot));
        }
    }
    by_task
        .into_iter()
        .map(|(task, slots)| {
            let greedy = slots
                .get(&GREEDY_SLOT)
                .ok_or_else(|| MetricsError::NoGreedy(task.to_string()))?;
            Ok(TaskCounts {
                task_id: task.to_string(),
                n: slots.len(),
                c: slots.values().filter(|r| r.reward == 1).count(),
                greedy_reward: greedy.reward,
                best_reward: best.get(task).copied(),
            })
        })
        .collect()
}

/// Builds the report. `best` maps task ids to the reward of the
/// RM-selected patch; best@1 is reported only when every task has one.
pub fn aggregate(
    records: &[RewardRecord],
    best: &BTreeMap<String, u8>,
    bootstrap_seed: u64,
) -> Result<EvalReport, MetricsError> {
    let per_task = task_counts(records, best)?;
    if per_task.is_empty() {
        return Err(MetricsError::Empty);
    }
    let greedy: Vec<f64> = per_task.iter().map(|t| f64::from(t.greedy_reward)).collect();
    let pass_at_1 = bootstrap_mean_std(&greedy, BOOTSTRAP_RESAMPLES, bootstrap_seed);
    let min_n = per_task.iter().map(|t| t.n).min().unwrap_or(0);
    let mut table = BTreeMap::new();
    for k in PASS_AT_K.into_iter().filter(|&k| k <= min_n) {
        let mut sum = 0.0;
        for t in &per_task {
            sum += pass_at_k(t.n, t.c, k)?;
        }
        table.insert(k, sum / per_task.len() as f64);
    }
    let best_at_1 = per_task
        .iter()
        .map(|t| t.best_reward.map(f64::from))
        .collect::<Option<Vec<f64>>>()
        .map(|v| {
            bootstrap_mean_std(
                &v,
                BOOTSTRAP_RESAMPLES,
                crate::seed::derive_seed(bootstrap_seed, &["best"]),
            )
        });
    Ok(EvalReport {
        num_tasks: per_task.len(),
        total_rollouts: per_task.iter().map(|t| t.n).sum(),
        total_successes: per_task.iter().map(|t| t.c).sum(),
        pass_at_1,
        pass_at_k: table,
        best_at_1,
        guidance_uplift: None,
        per_task,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Statistics of one arm, with rounds keyed by rollout slot.
pub fn arm_stats(records: &[RewardRecord]) -> ArmStats {
    let mut rounds: BTreeMap<usize, RoundStats> = BTreeMap::new();
    for r in records {
        let s = rounds.entry(r.slot).or_insert(RoundStats {
            round: r.slot,
            attempts: 0,
            successes: 0,
            empty_patches: 0,
        });
        s.attempts += 1;
        s.successes += usize::from(r.reward == 1);
        s.empty_patches += usize::from(r.empty_patch);
    }
    let per_round: Vec<RoundStats> = rounds.into_values().collect();
    let attempts = per_round.iter().map(|r| r.attempts).sum();
    let successes = per_round.iter().map(|r| r.successes).sum();
    let empty_patches = per_round.iter().map(|r| r.empty_patches).sum();
    ArmStats {
        mean_successes: ratio(successes, per_round.len()),
        success_rate: ratio(successes, attempts),
        empty_patch_rate: ratio(empty_patches, attempts),
        per_round,
        attempts,
        successes,
        empty_patches,
    }
}

pub fn guidance_uplift_report(unguided: &[RewardRecord], guided: &[RewardRecord]) -> UpliftReport {
    let u = arm_stats(unguided);
    let g = arm_stats(guided);
    UpliftReport {
        delta_mean_successes: g.mean_successes - u.mean_successes,
        delta_success_rate: g.success_rate - u.success_rate,
        delta_empty_patch_rate: g.empty_patch_rate - u.empty_patch_rate,
        unguided: u,
        guided: g,
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// Plain-text tables of a report.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Tasks: {}   Rollouts: {}   Successes: {}",
        report.num_tasks, report.total_rollouts, report.total_successes
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<10} {:>10} {:>8}", "Metric", "Value", "STD");
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>8}",
        "Pass@1",
        pct(report.pass_at_1.mean),
        pct(report.pass_at_1.std)
    );
    if let Some(b) = &report.best_at_1 {
        let _ = writeln!(out, "{:<10} {:>10} {:>8}", "Best@1", pct(b.mean), pct(b.std));
    }
    for (k, v) in &report.pass_at_k {
        let _ = writeln!(out, "{:<10} {:>10} {:>8}", format!("pass@{k}*"), pct(*v), "");
    }
    if !report.pass_at_k.is_empty() {
        let _ = writeln!(
            out,
            "* unbiased estimator over all rollouts; Pass@1 is the greedy rollout"
        );
    }
    if let Some(u) = &report.guidance_uplift {
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<18} {:>24} {:>12}", "Method", "# Successful (avg)", "% Empty");
        for (name, arm) in [("Without guidance", &u.unguided), ("With guidance", &u.guided)] {
            let cell = format!("{:.0} ({})", arm.mean_successes, pct(arm.success_rate));
            let _ = writeln!(
                out,
                "{:<18} {:>24} {:>12}",
                name,
                cell,
                format!("{:.2}%", 100.0 * arm.empty_patch_rate)
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimator_edges() {
        assert_eq!(pass_at_k(16, 0, 8).unwrap(), 0.0);
        assert_eq!(pass_at_k(16, 16, 1).unwrap(), 1.0);
        assert!(matches!(pass_at_k(4, 1, 5), Err(MetricsError::K { .. })));
        assert!(matches!(pass_at_k(4, 1, 0), Err(MetricsError::K { .. })));
        assert!(matches!(pass_at_k(4, 5, 1), Err(MetricsError::Count { .. })));
    }

    #[test]
    fn bootstrap_of_constant_has_zero_std() {
        let s = bootstrap_mean_std(&[1.0; 10], 1000, 3);
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.std, 0.0);
    }
}
