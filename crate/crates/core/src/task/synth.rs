//! Synthetic single-bug programs and their generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::program::{self, Op, Operand, Statement};
use super::{EnvSpec, Task, TaskDataset, TaskError, TestOutcome, TestSuite, Workspace};

/// Test id checking the program's final value.
pub const OUTPUT_TEST: &str = "focused::output";
const REGRESSION_PREFIX: &str = "regression::v";

/// Generation attempts per task before giving up.
const MAX_ATTEMPTS: usize = 10_000;

/// A straight-line program with exactly one wrong statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthProgram {
    pub lines: Vec<String>,
    pub buggy_line: usize,
    /// `candidates[i]` holds the replacement statements offered for line `i`.
    pub candidates: Vec<Vec<String>>,
    pub expected_output: i64,
}

/// Outcome of one synthetic test, with a human-readable message on failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTestResult {
    pub test_id: String,
    pub outcome: TestOutcome,
    pub message: Option<String>,
}

impl SynthProgram {
    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.first().map_or(0, Vec::len)
    }

    /// The program with `candidates[line][candidate]` substituted at `line`.
    pub fn patched_lines(&self, line: usize, candidate: usize) -> Option<Vec<String>> {
        let replacement = self.candidates.get(line)?.get(candidate)?;
        let mut lines = self.lines.clone();
        lines[line] = replacement.clone();
        Some(lines)
    }

    /// Runs `suite` against `lines`.
    ///
    /// Regression tests compare against the unpatched program, which is only
    /// meaningful for variables the bug does not reach; the generator only
    /// emits regression tests for those.
    pub fn run_suite(&self, lines: &[String], suite: &TestSuite) -> Vec<SynthTestResult> {
        let reference = program::execute(&self.lines);
        let exec = program::execute(lines);
        let last = lines.len().saturating_sub(1);
        suite
            .all()
            .map(|test_id| {
                let (var, expected) = if test_id == OUTPUT_TEST {
                    (Some(last), Some(self.expected_output))
                } else if let Some(v) = test_id
                    .strip_prefix(REGRESSION_PREFIX)
                    .and_then(|s| s.parse::<usize>().ok())
                {
                    (Some(v), reference.value(v))
                } else {
                    (None, None)
                };
                let (outcome, message) = match (var, expected) {
                    (Some(var), Some(expected)) => match exec.value(var) {
                        Some(got) if got == expected => (TestOutcome::Pass, None),
                        Some(got) => (
                            TestOutcome::Fail,
                            Some(format!("v{var}: expected {expected} got {got}")),
                        ),
                        None => (
                            TestOutcome::Error,
                            Some(match &exec.failure {
                                Some(e) => format!("v{var} not computed: {e}"),
                                None => format!("v{var} not computed"),
                            }),
                        ),
                    },
                    _ => (TestOutcome::Error, Some(format!("unknown synthetic test `{test_id}`"))),
                };
                SynthTestResult {
                    test_id: test_id.to_string(),
                    outcome,
                    message,
                }
            })
            .collect()
    }

    /// All single-line patches `(line, candidate)` that pass every test.
    pub fn passing_patches(&self, suite: &TestSuite) -> Vec<(usize, usize)> {
        let mut passing = Vec::new();
        for (line, cands) in self.candidates.iter().enumerate() {
            for candidate in 0..cands.len() {
                let lines = self.patched_lines(line, candidate).expect("in range");
                if self
                    .run_suite(&lines, suite)
                    .iter()
                    .all(|r| r.outcome == TestOutcome::Pass)
                {
                    passing.push((line, candidate));
                }
            }
        }
        passing
    }

    /// Checks shape and the single-fix property by exhaustive enumeration.
    pub fn validate(&self, suite: &TestSuite) -> Result<(), String> {
        let l = self.lines.len();
        if l < 2 {
            return Err(format!("program has {l} lines, need at least 2"));
        }
        if self.buggy_line >= l {
            return Err(format!("buggy_line {} out of range", self.buggy_line));
        }
        if self.candidates.len() != l {
            return Err(format!("{} candidate lists for {l} lines", self.candidates.len()));
        }
        let m = self.num_candidates();
        if m < 2 || self.candidates.iter().any(|c| c.len() != m) {
            return Err("every line needs the same number (>= 2) of candidates".into());
        }
        let passing = self.passing_patches(suite);
        match passing.as_slice() {
            [(line, _)] if *line == self.buggy_line => Ok(()),
            [(line, _)] => Err(format!(
                "the only passing patch edits line {line}, not buggy line {}",
                self.buggy_line
            )),
            other => Err(format!("{} passing patches, expected exactly 1", other.len())),
        }
    }
}

fn random_operand(rng: &mut ChaCha8Rng, line: usize) -> Operand {
    if line > 0 && rng.random_bool(0.75) {
        // Lean on the previous line so the bug tends to reach the output.
        if rng.random_bool(0.5) {
            Operand::Var(line - 1)
        } else {
            Operand::Var(rng.random_range(0..line))
        }
    } else {
        Operand::Literal(rng.random_range(1..=9))
    }
}

fn random_statement(rng: &mut ChaCha8Rng, line: usize) -> Statement {
    let lhs = random_operand(rng, line);
    if line == 0 && rng.random_bool(0.3) {
        return Statement {
            target: 0,
            lhs,
            rhs: None,
        };
    }
    let op = [Op::Add, Op::Sub, Op::Mul][rng.random_range(0..3)];
    let rhs = match op {
        // Keep products bounded: multiply by a small literal only.
        Op::Mul => Operand::Literal(rng.random_range(2..=4)),
        _ => random_operand(rng, line),
    };
    Statement {
        target: line,
        lhs,
        rhs: Some((op, rhs)),
    }
}

/// Draws `count` distinct statements for `line` avoiding `exclude`.
fn distinct_statements(rng: &mut ChaCha8Rng, line: usize, count: usize, exclude: &[&str]) -> Option<Vec<String>> {
    let mut out: Vec<String> = Vec::with_capacity(count);
    for _ in 0..count * 50 {
        if out.len() == count {
            break;
        }
        let s = random_statement(rng, line).to_string();
        if !exclude.contains(&s.as_str()) && !out.contains(&s) {
            out.push(s);
        }
    }
    (out.len() == count).then_some(out)
}

struct Draft {
    program: SynthProgram,
    suite: TestSuite,
    correct_line: String,
    buggy_output: i64,
}

fn draft(rng: &mut ChaCha8Rng, l: usize, m: usize) -> Option<Draft> {
    let original: Vec<String> = (0..l).map(|i| random_statement(rng, i).to_string()).collect();
    let exec = program::execute(&original);
    if exec.failure.is_some() {
        return None;
    }
    let expected_output = exec.values[l - 1];
    let buggy_line = rng.random_range(0..l);

    let correct_line = original[buggy_line].clone();
    let bug = distinct_statements(rng, buggy_line, 1, &[&correct_line])?.pop()?;
    let mut lines = original.clone();
    lines[buggy_line] = bug;
    let buggy_exec = program::execute(&lines);
    let buggy_output = *buggy_exec.values.get(l - 1)?;
    if buggy_exec.failure.is_some() || buggy_output == expected_output {
        return None;
    }

    let depends = program::dependents_of(&original, buggy_line).ok()?;
    let regression: Vec<String> = (0..l - 1)
        .filter(|&i| !depends[i])
        .map(|i| format!("{REGRESSION_PREFIX}{i}"))
        .collect();
    let suite = TestSuite {
        regression,
        focused: vec![OUTPUT_TEST.to_string()],
    };

    let mut candidates = Vec::with_capacity(l);
    for i in 0..l {
        if i == buggy_line {
            let mut cands = distinct_statements(rng, i, m - 1, &[&correct_line, &lines[i]])?;
            let slot = rng.random_range(0..m);
            cands.insert(slot, correct_line.clone());
            candidates.push(cands);
        } else {
            candidates.push(distinct_statements(rng, i, m, &[&lines[i]])?);
        }
    }
    let program = SynthProgram {
        lines,
        buggy_line,
        candidates,
        expected_output,
    };
    program.validate(&suite).ok()?;
    Some(Draft {
        program,
        suite,
        correct_line,
        buggy_output,
    })
}

/// Generates `count` synthetic tasks with `lines` statements and `candidates`
/// replacements per line. Deterministic in `seed`.
///
/// Every task is checked by enumerating all `lines × candidates` patches;
/// exactly one passes.
pub fn generate_synth_suite(
    count: usize,
    lines: usize,
    candidates: usize,
    seed: u64,
) -> Result<TaskDataset, TaskError> {
    if count < 1 || lines < 2 || candidates < 2 {
        return Err(TaskError::InvalidDimensions {
            count,
            lines,
            candidates,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::with_capacity(count);
    for k in 0..count {
        let draft = (0..MAX_ATTEMPTS)
            .find_map(|_| draft(&mut rng, lines, candidates))
            .ok_or(TaskError::GenerationFailed { index: k })?;
        let last = lines - 1;
        let repo_name = format!("synth/prog-{k:04}");
        let issue = format!(
            "Running {repo_name} leaves v{last} = {} but v{last} should be {}. \
             Expected behavior: `{}`.",
            draft.buggy_output, draft.program.expected_output, draft.correct_line
        );
        tasks.push(Task {
            id: format!("synth-{seed}-{k:04}"),
            issue,
            repo_name,
            workspace: Workspace::Synthetic(draft.program),
            env_spec: EnvSpec::synthetic(),
            tests: draft.suite,
        });
    }
    TaskDataset::new(tasks)
}

/// Per-test outcomes keyed by id, as stored in reward records.
pub fn outcomes_by_id(results: &[SynthTestResult]) -> BTreeMap<String, TestOutcome> {
    results.iter().map(|r| (r.test_id.clone(), r.outcome)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Isolation;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(generate_synth_suite(0, 6, 8, 0).is_err());
        assert!(generate_synth_suite(1, 1, 8, 0).is_err());
        assert!(generate_synth_suite(1, 6, 1, 0).is_err());
    }

    #[test]
    fn issue_states_expected_behavior() {
        let ds = generate_synth_suite(3, 4, 3, 11).unwrap();
        for task in ds.tasks() {
            let prog = task.synth().unwrap();
            let (line, cand) = prog.passing_patches(&task.tests)[0];
            assert!(task.issue.contains(&prog.candidates[line][cand]));
            assert_eq!(task.env_spec.isolation, Isolation::InMemorySynthetic);
        }
    }

    #[test]
    fn regression_tests_pass_on_buggy_program() {
        let ds = generate_synth_suite(8, 6, 4, 3).unwrap();
        for task in ds.tasks() {
            let prog = task.synth().unwrap();
            let results = prog.run_suite(&prog.lines, &task.tests);
            for r in &results {
                if r.test_id == OUTPUT_TEST {
                    assert_eq!(r.outcome, TestOutcome::Fail);
                } else {
                    assert_eq!(r.outcome, TestOutcome::Pass, "{}", r.test_id);
                }
            }
        }
    }
}
