use std::collections::BTreeMap;

use rlvr_core::evaluator::RewardRecord;
use rlvr_core::metrics::{aggregate, arm_stats, guidance_uplift_report, pass_at_k, render_text, MetricsError};

/// Fraction of the k-subsets of n rollouts (c successes) containing a success,
/// by listing every subset.
fn enumerate(n: usize, c: usize, k: usize) -> f64 {
    let mut hit = 0u64;
    let mut total = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        // rollouts 0..c are the successes
        if mask & ((1u32 << c) - 1) != 0 {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}

fn record(task: &str, slot: usize, reward: u8, guided: bool, empty: bool) -> RewardRecord {
    RewardRecord {
        task_id: task.to_string(),
        trajectory_ref: format!("{task}@{}@{slot}", if guided { "g" } else { "u" }),
        slot,
        guided,
        reward,
        per_test: BTreeMap::new(),
        empty_patch: empty,
        stacktrace: None,
        wall_time_s: 0.0,
    }
}

#[test]
fn estimator_equals_subset_enumeration() {
    let start = std::time::Instant::now();
    let mut cases = 0;
    for n in 1..=8 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n, c, k).unwrap();
                let want = enumerate(n, c, k);
                assert!((got - want).abs() < 1e-12, "n={n} c={c} k={k}: {got} vs {want}");
                cases += 1;
            }
        }
    }
    assert_eq!(cases, (1..=8).map(|n| (n + 1) * n).sum::<usize>());
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn estimator_examples() {
    assert_eq!(pass_at_k(16, 0, 8).unwrap(), 0.0);
    assert!((pass_at_k(4, 2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(pass_at_k(16, 16, 1).unwrap(), 1.0);
    assert_eq!(pass_at_k(4, 1, 5), Err(MetricsError::K { n: 4, k: 5 }));
}

#[test]
fn estimator_is_monotone() {
    for n in 1..=40 {
        for c in 0..=n {
            for k in 1..=n {
                let v = pass_at_k(n, c, k).unwrap();
                assert!((0.0..=1.0).contains(&v));
                if k < n {
                    assert!(pass_at_k(n, c, k + 1).unwrap() >= v - 1e-15);
                }
                if c < n {
                    assert!(pass_at_k(n, c + 1, k).unwrap() >= v - 1e-15);
                }
            }
        }
    }
    // Large n stays finite.
    let v = pass_at_k(10_000, 3, 5_000).unwrap();
    assert!(v.is_finite() && v > 0.8);
}

#[test]
fn pass_at_1_uses_greedy_slot() {
    // Greedy fails everywhere, samples often pass.
    let mut records = Vec::new();
    for t in 0..64 {
        let id = format!("t{t:02}");
        records.push(record(&id, 0, 0, false, false));
        for slot in 1..8 {
            records.push(record(&id, slot, u8::from(slot % 2 == 0), false, false));
        }
    }
    let report = aggregate(&records, &BTreeMap::new(), 0).unwrap();
    assert_eq!(report.pass_at_1.mean, 0.0);
    assert!(report.pass_at_k[&1] > 0.0);
    assert_eq!(report.num_tasks, 64);
    assert_eq!(report.total_rollouts, records.len());
    assert_eq!(report.total_successes, records.iter().filter(|r| r.reward == 1).count());
    let ks: Vec<&f64> = report.pass_at_k.values().collect();
    assert!(ks.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(report.pass_at_k.keys().copied().collect::<Vec<_>>(), vec![1, 2, 4, 8]);
    assert!(report.best_at_1.is_none());
}

#[test]
fn best_at_1_requires_every_task() {
    let records = vec![record("a", 0, 0, false, false), record("b", 0, 1, false, false)];
    let partial = BTreeMap::from([("a".to_string(), 1u8)]);
    assert!(aggregate(&records, &partial, 0).unwrap().best_at_1.is_none());
    let full = BTreeMap::from([("a".to_string(), 1u8), ("b".to_string(), 1u8)]);
    let report = aggregate(&records, &full, 0).unwrap();
    assert_eq!(report.best_at_1.unwrap().mean, 1.0);
    assert_eq!(report.pass_at_1.mean, 0.5);
}

#[test]
fn aggregate_rejects_bad_inputs() {
    assert_eq!(aggregate(&[], &BTreeMap::new(), 0), Err(MetricsError::Empty));
    let no_greedy = vec![record("a", 1, 1, false, false)];
    assert_eq!(
        aggregate(&no_greedy, &BTreeMap::new(), 0),
        Err(MetricsError::NoGreedy("a".into()))
    );
    let dup = vec![record("a", 0, 1, false, false), record("a", 0, 0, false, false)];
    assert!(matches!(
        aggregate(&dup, &BTreeMap::new(), 0),
        Err(MetricsError::DuplicateSlot(..))
    ));
    let guided = vec![record("a", 0, 1, true, false)];
    assert!(matches!(
        aggregate(&guided, &BTreeMap::new(), 0),
        Err(MetricsError::Guided(_))
    ));
}

#[test]
fn bootstrap_is_seeded() {
    let records: Vec<RewardRecord> = (0..50)
        .map(|t| record(&format!("t{t}"), 0, (t % 3 == 0) as u8, false, false))
        .collect();
    let a = aggregate(&records, &BTreeMap::new(), 11).unwrap();
    let b = aggregate(&records, &BTreeMap::new(), 11).unwrap();
    let c = aggregate(&records, &BTreeMap::new(), 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.pass_at_1.mean, c.pass_at_1.mean);
    assert_ne!(a.pass_at_1.std, c.pass_at_1.std);
    // Standard error of a proportion p = 17/50 is sqrt(p(1−p)/n) ≈ 0.067.
    let se = (0.34f64 * 0.66 / 50.0).sqrt();
    assert!((a.pass_at_1.std - se).abs() < 0.01, "{}", a.pass_at_1.std);
}

/// `rounds` rounds over `tasks` tasks; round r has `successes[r]` passing and
/// `empties[r]` empty-patch records.
fn arm(tasks: usize, successes: &[usize], empties: &[usize], guided: bool) -> Vec<RewardRecord> {
    let mut out = Vec::new();
    for (round, (&s, &e)) in successes.iter().zip(empties).enumerate() {
        for t in 0..tasks {
            let pass = t < s;
            let empty = !pass && t >= tasks - e;
            out.push(record(&format!("t{t:03}"), round, u8::from(pass), guided, empty));
        }
    }
    out
}

#[test]
fn uplift_table_shape_single_round() {
    let u = arm(817, &[138], &[71], false);
    let g = arm(817, &[165], &[59], true);
    let report = guidance_uplift_report(&u, &g);
    assert_eq!(report.unguided.successes, 138);
    assert_eq!(report.guided.successes, 165);
    assert!((report.unguided.success_rate - 138.0 / 817.0).abs() < 1e-15);
    assert!((report.delta_success_rate - 27.0 / 817.0).abs() < 1e-15);
    let text = format!("{:.1}%", 100.0 * report.unguided.success_rate);
    assert_eq!(text, "16.9%");
    // 165/817 is 20.196%, which rounds to 20.2%.
    assert_eq!(format!("{:.1}%", 100.0 * report.guided.success_rate), "20.2%");
}

#[test]
fn uplift_table_averaged_over_rounds() {
    // 100 rounds of 817 attempts each. Per-round counts vary; the averages
    // land on 138 (16.9%) and 165 (20.3%) with 8.71% and 7.20% empty patches.
    let rounds = 100;
    let spread = |total: usize| -> Vec<usize> {
        let base = total / rounds;
        (0..rounds).map(|r| base + usize::from(r < total % rounds)).collect()
    };
    let u = arm(817, &spread(13_800), &spread(7_116), false);
    let g = arm(817, &spread(16_546), &spread(5_882), true);
    let report = guidance_uplift_report(&u, &g);
    assert_eq!(report.unguided.per_round.len(), rounds);
    assert_eq!(report.unguided.attempts, 81_700);
    assert!((report.unguided.mean_successes - 138.0).abs() < 1e-12);
    assert!((report.guided.mean_successes - 165.46).abs() < 1e-9);

    let eval = vec![record("t000", 0, 0, false, false)];
    let mut full = aggregate(&eval, &BTreeMap::new(), 0).unwrap();
    full.guidance_uplift = Some(report);
    let text = render_text(&full);
    let row = |name: &str| text.lines().find(|l| l.starts_with(name)).unwrap().to_string();
    let unguided = row("Without guidance");
    let guided = row("With guidance");
    assert!(unguided.contains("138 (16.9%)"), "{unguided}");
    assert!(unguided.ends_with("8.71%"), "{unguided}");
    assert!(guided.contains("165 (20.3%)"), "{guided}");
    assert!(guided.ends_with("7.20%"), "{guided}");
}

#[test]
fn identical_arms_have_zero_deltas() {
    let u = arm(20, &[3, 5], &[1, 2], false);
    let report = guidance_uplift_report(&u, &u);
    assert_eq!(report.delta_mean_successes, 0.0);
    assert_eq!(report.delta_success_rate, 0.0);
    assert_eq!(report.delta_empty_patch_rate, 0.0);
    let s = arm_stats(&u);
    assert_eq!(s.per_round.iter().map(|r| r.successes).collect::<Vec<_>>(), vec![3, 5]);
    assert_eq!(s.mean_successes, 4.0);
}
