use std::collections::BTreeMap;

use proptest::prelude::*;
use rlvr_core::evaluator::RewardRecord;
use rlvr_core::guidance::{render_reattempt_prompt, Guidance, GuidanceSections, HINT_DELIMITER};
use rlvr_core::pairs::{
    assemble_dataset, assemble_guided_pair, assemble_rollout_pairs, emit_dataset, load_dataset, sample_sft_subset,
    AssemblyConfig, PairError, Provenance, Scored,
};
use rlvr_core::rollout::{SamplingParams, Step, StepRole, Trajectory};

const BASE_PROMPT: &str = "TASK ID: t\nfix the bug";

fn traj(task: &str, slot: usize, seed: u64, response: &str, guidance: Option<&Guidance>) -> Trajectory {
    let prompt = match guidance {
        Some(g) => render_reattempt_prompt(BASE_PROMPT, g).unwrap(),
        None => BASE_PROMPT.to_string(),
    };
    Trajectory {
        task_id: task.into(),
        slot,
        steps: vec![Step {
            role: StepRole::Repair,
            prompt,
            completion: response.into(),
        }],
        patch: None,
        guidance_id: guidance.map(|g| g.id.clone()),
        sampling: SamplingParams::greedy(seed),
        backend_id: if guidance.is_some() { "g".into() } else { "u".into() },
        on_policy: true,
        error: None,
    }
}

fn rec(t: &Trajectory, reward: u8) -> RewardRecord {
    RewardRecord {
        task_id: t.task_id.clone(),
        trajectory_ref: t.reference(),
        slot: t.slot,
        guided: t.is_guided(),
        reward,
        per_test: BTreeMap::new(),
        empty_patch: false,
        stacktrace: None,
        wall_time_s: 0.0,
    }
}

fn guidance_for(source: &Trajectory) -> Guidance {
    Guidance::new(
        GuidanceSections {
            plan: "p".into(),
            env_feedback: "f".into(),
            env_interaction: "line 0".into(),
        },
        &source.task_id,
        &source.reference(),
        "oracle",
        false,
    )
}

/// Every (positive, negative) combination, visited round-robin and capped.
fn round_robin_oracle(rewards: &[u8], cap: usize) -> Vec<(usize, usize)> {
    let pos: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i] == 1).collect();
    let neg: Vec<usize> = (0..rewards.len()).filter(|&i| rewards[i] == 0).collect();
    let mut all = Vec::new();
    for r in 0..neg.len() {
        for (i, &p) in pos.iter().enumerate() {
            all.push((p, neg[(i + r) % neg.len()]));
        }
    }
    // each combination appears exactly once across the rounds
    let mut sorted = all.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), pos.len() * neg.len());
    all.truncate(cap);
    all
}

#[test]
fn capped_round_robin_example() {
    let ts: Vec<Trajectory> = ["a", "b", "c"]
        .iter()
        .enumerate()
        .map(|(i, r)| traj("t", i, i as u64, r, None))
        .collect();
    let rs = [rec(&ts[0], 1), rec(&ts[1], 1), rec(&ts[2], 0)];
    let scored: Vec<Scored> = ts.iter().zip(&rs).collect();
    let pairs = assemble_rollout_pairs(&scored, 2);
    let got: Vec<(&str, &str)> = pairs
        .iter()
        .map(|p| (p.winner.response.as_str(), p.loser.response.as_str()))
        .collect();
    assert_eq!(got, vec![("a", "c"), ("b", "c")]);
}

proptest! {
    #[test]
    fn rollout_pairs_match_oracle(rewards in prop::collection::vec(0u8..=1, 1..16), cap in 0usize..40) {
        let ts: Vec<Trajectory> = (0..rewards.len())
            .map(|i| traj("t", i, i as u64, &format!("response {i}"), None))
            .collect();
        let rs: Vec<RewardRecord> = ts.iter().zip(&rewards).map(|(t, &r)| rec(t, r)).collect();
        let scored: Vec<Scored> = ts.iter().zip(&rs).collect();
        let got: Vec<(usize, usize)> = assemble_rollout_pairs(&scored, cap)
            .iter()
            .map(|p| {
                let idx = |s: &str| s.trim_start_matches("response ").parse::<usize>().unwrap();
                (idx(&p.winner.response), idx(&p.loser.response))
            })
            .collect();
        prop_assert_eq!(got, round_robin_oracle(&rewards, cap));
    }

    #[test]
    fn dataset_invariants(
        tasks in prop::collection::vec(
            (prop::collection::vec(0u8..=1, 1..10), prop::collection::vec(0u8..=1, 0..10)),
            1..6,
        ),
        cap in 1usize..6,
        fraction in 0.05f64..1.0,
        seed in any::<u64>(),
        leak in any::<bool>(),
    ) {
        let mut unguided = Vec::new();
        let mut guided = Vec::new();
        let mut guidance = Vec::new();
        for (k, (ur, gr)) in tasks.iter().enumerate() {
            let id = format!("task{k}");
            let base: Vec<Trajectory> = ur
                .iter()
                .enumerate()
                .map(|(i, _)| traj(&id, i, (k * 100 + i) as u64, &format!("{id} answer {i}"), None))
                .collect();
            let failures: Vec<&Trajectory> = base.iter().zip(ur).filter(|(_, &r)| r == 0).map(|(t, _)| t).collect();
            for (j, &r) in gr.iter().enumerate() {
                let Some(src) = failures.get(j % failures.len().max(1)) else { break };
                let g = guidance_for(src);
                let mut response = format!("{id} guided {j}");
                if leak && j == 0 {
                    response.push_str(HINT_DELIMITER);
                }
                let mut t = traj(&id, src.slot, (k * 100 + 50 + j) as u64, &response, Some(&g));
                t.backend_id = format!("g{j}");
                guided.push((t, r));
                guidance.push(g);
            }
            unguided.extend(base.into_iter().zip(ur.iter().copied()));
        }
        let urec: Vec<RewardRecord> = unguided.iter().map(|(t, r)| rec(t, *r)).collect();
        let grec: Vec<RewardRecord> = guided.iter().map(|(t, r)| rec(t, *r)).collect();
        let us: Vec<Scored> = unguided.iter().map(|(t, _)| t).zip(&urec).collect();
        let gs: Vec<Scored> = guided.iter().map(|(t, _)| t).zip(&grec).collect();
        let config = AssemblyConfig { max_pairs_per_task: cap, sft_fraction: fraction, seed, ..AssemblyConfig::default() };
        let ds = assemble_dataset(&us, &gs, &guidance, &config).unwrap();

        let reward_of: BTreeMap<String, u8> = urec.iter().chain(&grec).map(|r| (r.trajectory_ref.clone(), r.reward)).collect();
        let task_of: BTreeMap<String, String> = unguided.iter().chain(&guided).map(|(t, _)| (t.reference(), t.task_id.clone())).collect();
        for p in &ds.pairs {
            prop_assert_eq!(reward_of[&p.winner.trajectory_ref], 1);
            prop_assert_eq!(reward_of[&p.loser.trajectory_ref], 0);
            prop_assert_eq!(&task_of[&p.winner.trajectory_ref], &p.task_id);
            prop_assert_eq!(&task_of[&p.loser.trajectory_ref], &p.task_id);
            prop_assert_eq!(p.prompt.as_str(), BASE_PROMPT);
            prop_assert!(!p.winner.response.contains(HINT_DELIMITER));
            prop_assert!(!p.prompt.contains(HINT_DELIMITER));
            prop_assert_ne!(&p.winner.response, &p.loser.response);
        }
        let rollout_per_task = ds.pairs.iter().filter(|p| p.provenance == Provenance::RolloutPair).fold(
            BTreeMap::<&str, usize>::new(),
            |mut m, p| { *m.entry(p.task_id.as_str()).or_default() += 1; m },
        );
        prop_assert!(rollout_per_task.values().all(|&n| n <= cap));

        let a = &ds.accounting;
        prop_assert_eq!(a.unguided_trajectories, urec.len());
        prop_assert_eq!(a.unguided_positives + a.unguided_negatives, urec.len());
        prop_assert_eq!(a.unguided_positives, urec.iter().filter(|r| r.reward == 1).count());
        prop_assert_eq!(a.guided_trajectories, grec.len());
        prop_assert_eq!(a.guided_positives, grec.iter().filter(|r| r.reward == 1).count());
        prop_assert_eq!(a.rollout_pairs + a.guided_repair_pairs, ds.pairs.len());
        prop_assert_eq!(
            a.guided_repair_pairs + a.guided_without_loser + a.dropped_leakage,
            a.guided_positives
        );
        prop_assert_eq!(a.sft_examples, ds.sft.len());
        prop_assert_eq!(ds.sft.len(), (fraction * a.unguided_positives as f64).round() as usize);
        for s in &ds.sft {
            prop_assert_eq!(reward_of[&s.trajectory_ref], 1);
        }
    }
}

#[test]
fn guided_pair_validation() {
    let failed = traj("t", 0, 1, "wrong", None);
    let g = guidance_for(&failed);
    let good = traj("t", 0, 2, "right", Some(&g));
    let (fr, gr) = (rec(&failed, 0), rec(&good, 1));
    let pair = assemble_guided_pair((&failed, &fr), (&good, &gr), false).unwrap();
    assert_eq!(pair.prompt, BASE_PROMPT);
    assert_eq!(pair.provenance, Provenance::GuidedRepairPair);
    let kept = assemble_guided_pair((&failed, &fr), (&good, &gr), true).unwrap();
    assert!(kept.prompt.contains(HINT_DELIMITER));

    let leaky = traj("t", 0, 3, &format!("right {HINT_DELIMITER}"), Some(&g));
    let lr = rec(&leaky, 1);
    assert!(matches!(
        assemble_guided_pair((&failed, &fr), (&leaky, &lr), false),
        Err(PairError::Leakage(_))
    ));

    let other = traj("u", 0, 4, "right", Some(&g));
    let or = rec(&other, 1);
    assert!(matches!(
        assemble_guided_pair((&failed, &fr), (&other, &or), false),
        Err(PairError::TaskMismatch(..))
    ));

    let unguided_winner = traj("t", 1, 5, "right", None);
    let ur = rec(&unguided_winner, 1);
    assert!(matches!(
        assemble_guided_pair((&failed, &fr), (&unguided_winner, &ur), false),
        Err(PairError::NotGuided(_))
    ));

    let gr0 = rec(&good, 0);
    assert!(matches!(
        assemble_guided_pair((&failed, &fr), (&good, &gr0), false),
        Err(PairError::Reward { .. })
    ));
    assert!(matches!(
        assemble_guided_pair((&failed, &fr), (&good, &fr), false),
        Err(PairError::RecordMismatch { .. })
    ));
}

#[test]
fn sft_subset_size_at_scale() {
    // 4093 positives spread over 817 tasks.
    let ts: Vec<Trajectory> = (0..4093)
        .map(|i| traj(&format!("task{}", i % 817), i / 817, i as u64, &format!("r{i}"), None))
        .collect();
    let rs: Vec<RewardRecord> = ts.iter().map(|t| rec(t, 1)).collect();
    let scored: Vec<Scored> = ts.iter().zip(&rs).collect();
    let sft = sample_sft_subset(&scored, 0.2, 5).unwrap();
    assert_eq!(sft.len(), 819);
    assert_eq!(sample_sft_subset(&scored, 0.2, 5).unwrap(), sft);
    assert_ne!(sample_sft_subset(&scored, 0.2, 6).unwrap(), sft);
    assert!(matches!(
        sample_sft_subset(&scored, 0.0, 5),
        Err(PairError::Fraction(_))
    ));
}

#[test]
fn dataset_file_round_trip() {
    let ts: Vec<Trajectory> = (0..6).map(|i| traj("t", i, i as u64, &format!("r{i}"), None)).collect();
    let rs: Vec<RewardRecord> = ts
        .iter()
        .enumerate()
        .map(|(i, t)| rec(t, u8::from(i % 3 == 0)))
        .collect();
    let scored: Vec<Scored> = ts.iter().zip(&rs).collect();
    let ds = assemble_dataset(&scored, &[], &[], &AssemblyConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.jsonl");
    emit_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);
}
