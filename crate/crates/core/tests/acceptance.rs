//! The eight end-to-end criteria. Each prints one PASS/FAIL line; the
//! process exits non-zero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlvr_core::config::{RawConfig, RunConfig};
use rlvr_core::evaluator::{EvaluatorConfig, RewardRecord};
use rlvr_core::guidance::{OracleTeacher, HINT_DELIMITER};
use rlvr_core::jsonl;
use rlvr_core::metrics::pass_at_k;
use rlvr_core::pairs::{self, Provenance};
use rlvr_core::pipeline::{self, artifacts, RunOutcome};
use rlvr_core::policy::{Action, ReferencePolicy, TabularPolicy};
use rlvr_core::reward_model::{pairwise_accuracy, rm_train, RmConfig};
use rlvr_core::rollout::{EngineMode, Trajectory};
use rlvr_core::seed::derive_seed;
use rlvr_core::task;
use rlvr_core::train::{dpo_grad, dpo_loss, sft_grad, sft_loss, ActionPair, ActionTarget};

type Outcome = Result<String, String>;

fn config(dir: &Path, extra: &[String]) -> (RunConfig, RawConfig) {
    let mut sets = vec![format!("run.out_dir={}", dir.display())];
    sets.extend_from_slice(extra);
    pipeline::load_config(None, &sets).expect("config")
}

fn run(dir: &Path, extra: &[String]) -> RunOutcome {
    let (cfg, raw) = config(dir, extra);
    pipeline::run_loop(&cfg, &raw, false).expect("run loop")
}

// ---------------------------------------------------------------- 1

struct Instance {
    policy: TabularPolicy,
    reference: ReferencePolicy,
    pairs: Vec<(String, Action, Action)>,
    beta: f64,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let shapes: BTreeMap<String, (usize, usize)> = (0..rng.random_range(1..=3))
        .map(|i| (format!("t{i}"), (rng.random_range(2..=5), rng.random_range(2..=5))))
        .collect();
    let random_policy = |rng: &mut ChaCha8Rng| {
        let mut p = TabularPolicy::uniform(&shapes);
        let theta: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
        p.set_params(&theta).expect("length matches");
        p
    };
    let policy = random_policy(rng);
    let reference = ReferencePolicy::snapshot(&random_policy(rng));
    let ids: Vec<&String> = shapes.keys().collect();
    let pairs = (0..rng.random_range(1..=8))
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            let (lines, cands) = shapes[id];
            let mut pick = || Action {
                line: rng.random_range(0..lines),
                candidate: rng.random_range(0..cands),
            };
            let w = pick();
            let mut l = pick();
            while l == w {
                l = pick();
            }
            (id.clone(), w, l)
        })
        .collect();
    Instance {
        policy,
        reference,
        pairs,
        beta: rng.random_range(0.01..2.0),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn central(policy: &TabularPolicy, f: impl Fn(&TabularPolicy) -> f64) -> Vec<f64> {
    const H: f64 = 1e-5;
    let theta = policy.params();
    let mut p = policy.clone();
    let mut t = theta.clone();
    (0..theta.len())
        .map(|i| {
            t[i] = theta[i] + H;
            p.set_params(&t).expect("length matches");
            let up = f(&p);
            t[i] = theta[i] - H;
            p.set_params(&t).expect("length matches");
            let down = f(&p);
            t[i] = theta[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_ln2, mut worst_dpo, mut worst_sft) = (0.0f64, 0.0f64, 0.0f64);
    let instances = 150;
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let pairs: Vec<ActionPair> = inst
            .pairs
            .iter()
            .map(|(id, w, l)| ActionPair {
                task_id: id,
                winner: *w,
                loser: *l,
            })
            .collect();
        let at_ref = ReferencePolicy::snapshot(&inst.policy);
        let loss = dpo_loss(&inst.policy, &at_ref, &pairs, inst.beta).map_err(|e| e.to_string())?;
        worst_ln2 = worst_ln2.max((loss - std::f64::consts::LN_2).abs());

        let analytic = dpo_grad(&inst.policy, &inst.reference, &pairs, inst.beta).map_err(|e| e.to_string())?;
        let numeric = central(&inst.policy, |p| {
            dpo_loss(p, &inst.reference, &pairs, inst.beta).expect("valid pairs")
        });
        worst_dpo = worst_dpo.max(rel_err(&analytic, &numeric));

        let targets: Vec<ActionTarget> = pairs
            .iter()
            .map(|p| ActionTarget {
                task_id: p.task_id,
                action: p.winner,
            })
            .collect();
        let analytic = sft_grad(&inst.policy, &targets).map_err(|e| e.to_string())?;
        let numeric = central(&inst.policy, |p| sft_loss(p, &targets).expect("valid targets"));
        worst_sft = worst_sft.max(rel_err(&analytic, &numeric));
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "|loss-ln2| {worst_ln2:.1e}, dpo grad rel err {worst_dpo:.1e}, sft grad rel err {worst_sft:.1e} over {instances} instances in {secs:.2}s"
    );
    if worst_ln2 < 1e-9 && worst_dpo < 1e-4 && worst_sft < 1e-4 && secs < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=8usize {
        for c in 0..=n {
            for k in 1..=n {
                let (mut hit, mut total) = (0u32, 0u32);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize == k {
                        total += 1;
                        hit += u32::from(mask & ((1 << c) - 1) != 0);
                    }
                }
                let got = pass_at_k(n, c, k).map_err(|e| e.to_string())?;
                worst = worst.max((got - f64::from(hit) / f64::from(total)).abs());
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("max |delta| {worst:.1e} over {cases} (n, c, k) cases in {secs:.3}s");
    if worst < 1e-12 && secs < 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 3

fn criterion_3(outcome: &RunOutcome, secs: f64) -> Outcome {
    let before = outcome.report.before.pass_at_1.mean;
    let after = outcome.report.after.as_ref().map_or(0.0, |r| r.pass_at_1.mean);
    let detail = format!(
        "greedy pass@1 {:.1}% -> {:.1}% in {secs:.1}s",
        100.0 * before,
        100.0 * after
    );
    if after >= 0.5 && after > before && secs < 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 4

/// Unguided and guided (successes, attempts) for one suite under the
/// uniform policy.
fn uplift_counts(seed: u64, dir: &Path) -> Result<((usize, usize), (usize, usize)), pipeline::PipelineError> {
    let (cfg, _) = config(dir, &[format!("run.seed={seed}")]);
    let tasks = task::generate_synth_suite(64, 6, 8, seed)?;
    let backend = pipeline::policy_backend(
        &cfg.backend,
        &TabularPolicy::default(),
        &tasks,
        pipeline::INIT_BACKEND_ID,
    );
    let ecfg = EvaluatorConfig::default();
    let rollouts = pipeline::rollout_phase(
        &tasks,
        backend.as_ref(),
        &cfg.rollout,
        EngineMode::Train,
        16,
        derive_seed(seed, &["rollout"]),
        &dir.join("r.jsonl"),
    )?;
    let rewards = pipeline::evaluate_phase(&tasks, &rollouts, &ecfg, &dir.join("rw.jsonl"))?;
    let guidance = pipeline::guide_phase(&tasks, &rollouts, &rewards, &OracleTeacher, 4, &dir.join("g.jsonl"))?;
    let guided = pipeline::reattempt_phase(
        &tasks,
        &rollouts,
        &guidance,
        backend.as_ref(),
        &cfg.rollout,
        &dir.join("gr.jsonl"),
    )?;
    let guided_rewards = pipeline::evaluate_phase(&tasks, &guided, &ecfg, &dir.join("grw.jsonl"))?;
    let count = |rs: &[RewardRecord]| (rs.iter().filter(|r| r.reward == 1).count(), rs.len());
    Ok((count(&rewards), count(&guided_rewards)))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seeds = 20;
    let (mut us, mut un, mut gs, mut gn) = (0, 0, 0, 0);
    for seed in 0..seeds {
        let ((a, b), (c, d)) = uplift_counts(seed, dir.path()).map_err(|e| e.to_string())?;
        us += a;
        un += b;
        gs += c;
        gn += d;
    }
    let (pu, pg) = (us as f64 / un as f64, gs as f64 / gn as f64);
    let (eu, eg) = (1.0 / 48.0, 1.0 / 8.0);
    let (su, sg) = (
        (eu * (1.0 - eu) / un as f64).sqrt(),
        (eg * (1.0 - eg) / gn as f64).sqrt(),
    );
    let gap_sigma = (pg - pu) / (su * su + sg * sg).sqrt();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "unguided {pu:.4} (expected {eu:.4}, {:.1} sigma), guided {pg:.4} (expected {eg:.4}, {:.1} sigma), gap {gap_sigma:.1} sigma, {seeds} seeds in {secs:.1}s",
        (pu - eu) / su,
        (pg - eg) / sg,
    );
    if ((pu - eu) / su).abs() < 3.0 && ((pg - eg) / sg).abs() < 3.0 && gap_sigma > 3.0 && secs < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let seeds = 5u64;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let arm = |on: bool| {
            let dir = tempfile::tempdir().expect("tempdir");
            let out = run(
                dir.path(),
                &[format!("run.seed={seed}"), format!("run.guidance_enabled={on}")],
            );
            let after = out.report.after.expect("tabular run evaluates");
            (after.pass_at_1.mean, after.pass_at_k[&8])
        };
        let (g1, g8) = arm(true);
        let (u1, u8) = arm(false);
        if g1 >= u1 && g8 >= u8 {
            wins += 1;
        }
        rows.push(format!("{:.2}/{:.2} vs {:.2}/{:.2}", g1, g8, u1, u8));
    }
    // One-sided sign test: chance of this many wins out of `seeds` at p = 1/2.
    let p: f64 = (wins..=seeds as usize)
        .map(|w| binomial(seeds as usize, w) * 0.5f64.powi(seeds as i32))
        .sum();
    let detail = format!(
        "guided >= unguided on {wins}/{seeds} seeds (sign test p = {p:.4}); pass@1/pass@8 {}",
        rows.join(", ")
    );
    if p < 0.05 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

// ---------------------------------------------------------------- 6

fn separable_accuracy() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let truth: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dot = |x: &[f64]| truth.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let mut pairs = Vec::new();
    while pairs.len() < 400 {
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let margin = dot(&a) - dot(&b);
        if margin.abs() < 0.3 {
            continue;
        }
        pairs.push(if margin > 0.0 { (a, b) } else { (b, a) });
    }
    let (train, test) = pairs.split_at(300);
    let (rm, _) = rm_train(
        train,
        &RmConfig {
            learning_rate: 0.5,
            epochs: 2000,
        },
    );
    pairwise_accuracy(&rm, test)
}

fn criterion_6() -> Outcome {
    let seeds = 5u64;
    let mut ok = 0;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let dir = tempfile::tempdir().expect("tempdir");
        let out = run(
            dir.path(),
            &[format!("run.seed={seed}"), "eval.n=32".into(), "rm.k=32".into()],
        );
        let after = out.report.after.expect("tabular run evaluates");
        let greedy = after.pass_at_1.mean;
        let best = after.best_at_1.map_or(f64::NAN, |b| b.mean);
        if best >= greedy {
            ok += 1;
        }
        rows.push(format!("{:.3} vs {:.3}", best, greedy));
    }
    let acc = separable_accuracy();
    let detail = format!(
        "best-of-32 >= greedy on {ok}/{seeds} seeds ({}); separable held-out accuracy {acc:.3}",
        rows.join(", ")
    );
    if ok == seeds && acc == 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 7

fn criterion_7(dir: &Path) -> Outcome {
    let read = |name: &str| -> Result<Vec<RewardRecord>, String> {
        jsonl::read_jsonl(&dir.join(name)).map_err(|e| e.to_string())
    };
    let rewards = read(artifacts::REWARDS)?;
    let guided_rewards = read(artifacts::GUIDED_REWARDS)?;
    let rollouts: Vec<Trajectory> = jsonl::read_jsonl(&dir.join(artifacts::ROLLOUTS)).map_err(|e| e.to_string())?;
    let ds = pairs::load_dataset(&dir.join(artifacts::DATASET)).map_err(|e| e.to_string())?;
    let (cfg, _) = config(dir, &[]);
    let mut problems = Vec::new();

    let reward_of: HashMap<&str, (&str, u8)> = rewards
        .iter()
        .chain(&guided_rewards)
        .map(|r| (r.trajectory_ref.as_str(), (r.task_id.as_str(), r.reward)))
        .collect();
    let prompt_of: HashMap<String, String> = rollouts
        .iter()
        .map(|t| (t.reference(), t.prompt().to_string()))
        .collect();
    for p in &ds.pairs {
        let w = reward_of.get(p.winner.trajectory_ref.as_str());
        let l = reward_of.get(p.loser.trajectory_ref.as_str());
        if w.map(|w| w.1) != Some(1) || l.map(|l| l.1) != Some(0) {
            problems.push(format!(
                "rewards of {} / {}",
                p.winner.trajectory_ref, p.loser.trajectory_ref
            ));
        }
        if w.map(|w| w.0) != Some(p.task_id.as_str()) || l.map(|l| l.0) != Some(p.task_id.as_str()) {
            problems.push(format!("task of pair in {}", p.task_id));
        }
        if p.prompt.contains(HINT_DELIMITER) || p.winner.response.contains(HINT_DELIMITER) {
            problems.push(format!("hint leaks into pair for {}", p.task_id));
        }
        if prompt_of.get(&p.loser.trajectory_ref) != Some(&p.prompt) {
            problems.push(format!("prompt of pair for {} is not the unguided one", p.task_id));
        }
    }

    let a = &ds.accounting;
    let positives = |rs: &[RewardRecord]| rs.iter().filter(|r| r.reward == 1).count();
    let mut per_task: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &rewards {
        let e = per_task.entry(&r.task_id).or_default();
        if r.reward == 1 {
            e.0 += 1
        } else {
            e.1 += 1
        }
    }
    let expected_rollout_pairs: usize = per_task
        .values()
        .map(|(p, n)| (p * n).min(cfg.assembly.max_pairs_per_task))
        .sum();
    let checks = [
        ("tasks", a.tasks, per_task.len()),
        ("unguided trajectories", a.unguided_trajectories, rewards.len()),
        ("unguided positives", a.unguided_positives, positives(&rewards)),
        (
            "unguided negatives",
            a.unguided_negatives,
            rewards.len() - positives(&rewards),
        ),
        ("guided trajectories", a.guided_trajectories, guided_rewards.len()),
        ("guided positives", a.guided_positives, positives(&guided_rewards)),
        ("rollout pairs", a.rollout_pairs, expected_rollout_pairs),
        (
            "guided pair outcomes",
            a.guided_repair_pairs + a.guided_without_loser + a.dropped_leakage,
            positives(&guided_rewards),
        ),
        (
            "rollout pairs in file",
            ds.pairs_by(Provenance::RolloutPair).count(),
            a.rollout_pairs,
        ),
        (
            "guided pairs in file",
            ds.pairs_by(Provenance::GuidedRepairPair).count(),
            a.guided_repair_pairs,
        ),
        (
            "sft examples",
            ds.sft.len(),
            (cfg.assembly.sft_fraction * positives(&rewards) as f64).round() as usize,
        ),
    ];
    for (name, got, want) in checks {
        if got != want {
            problems.push(format!("{name}: accounting {got}, records {want}"));
        }
    }
    let detail = format!(
        "{} pairs checked, {} accounting fields reconciled against {} reward records",
        ds.pairs.len(),
        checks.len(),
        rewards.len() + guided_rewards.len()
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", problems.join("; ")))
    }
}

// ---------------------------------------------------------------- 8

fn criterion_8(first: &RunOutcome) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = run(dir.path(), &[]);
    let hashes = |o: &RunOutcome| -> Vec<(String, String)> {
        o.manifest
            .deterministic()
            .map(|e| (e.path.clone(), e.sha256.clone()))
            .collect()
    };
    let (a, b) = (hashes(first), hashes(&second));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let detail = format!("{} deterministic artifacts compared", a.len());
    if a.len() == b.len() && differing.is_empty() && !a.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; differing: {differing:?}"))
    }
}

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let default_run = run(dir.path(), &[]);
    let default_secs = start.elapsed().as_secs_f64();

    let results: Vec<(usize, &str, Outcome)> = vec![
        (1, "DPO and SFT gradients", criterion_1()),
        (2, "pass@k estimator", criterion_2()),
        (3, "loop closure", criterion_3(&default_run, default_secs)),
        (4, "guidance uplift", criterion_4()),
        (5, "guidance training gap", criterion_5()),
        (6, "reward-model reranking", criterion_6()),
        (7, "pair assembly", criterion_7(dir.path())),
        (8, "determinism", criterion_8(&default_run)),
    ];
    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS criterion {n} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
