//! Tabular two-decision policy over synthetic tasks.
//!
//! For every task the policy holds one logit per line (the localization
//! decision) and one logit per `(line, candidate)` (the repair decision,
//! conditioned on the chosen line). The log-probability of a trajectory is
//! `log p(line) + log p(candidate | line)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::seed::sha256_hex;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy has no parameters for task `{0}`")]
    UnknownTask(String),
    #[error("task `{task}`: action (line {line}, candidate {candidate}) is outside the policy's action space")]
    ActionOutOfRange {
        task: String,
        line: usize,
        candidate: usize,
    },
    #[error("parameter vector has {found} entries, policy has {expected}")]
    ParamLength { expected: usize, found: usize },
}

/// One scaffolded decision pair on a synthetic task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Action {
    pub line: usize,
    pub candidate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLogits {
    pub line: Vec<f64>,
    /// `candidate[line][candidate]`
    pub candidate: Vec<Vec<f64>>,
}

impl TaskLogits {
    pub fn zeros(lines: usize, candidates: usize) -> Self {
        TaskLogits {
            line: vec![0.0; lines],
            candidate: vec![vec![0.0; candidates]; lines],
        }
    }

    fn len(&self) -> usize {
        self.line.len() + self.candidate.iter().map(Vec::len).sum::<usize>()
    }

    fn shape(&self) -> (usize, usize) {
        (self.line.len(), self.candidate.first().map_or(0, Vec::len))
    }
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Sampling distribution at `temperature`; `0` puts all mass on the first argmax.
pub fn tempered(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &x) in logits.iter().enumerate() {
            if x > logits[best] {
                best = i;
            }
        }
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return p;
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    softmax(&scaled)
}

/// Offsets of each task's block in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    offsets: BTreeMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn offset(&self, task: &str) -> Option<usize> {
        self.offsets.get(task).copied()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    tasks: BTreeMap<String, TaskLogits>,
}

impl TabularPolicy {
    /// All-zero logits (the uniform policy) for every `(task, (lines, candidates))`.
    pub fn uniform(shapes: &BTreeMap<String, (usize, usize)>) -> Self {
        let mut policy = TabularPolicy::default();
        policy.ensure_shapes(shapes);
        policy
    }

    /// Adds uniform logits for tasks the policy has not seen.
    pub fn ensure_shapes(&mut self, shapes: &BTreeMap<String, (usize, usize)>) {
        for (id, &(lines, candidates)) in shapes {
            self.tasks
                .entry(id.clone())
                .or_insert_with(|| TaskLogits::zeros(lines, candidates));
        }
    }

    pub fn task(&self, id: &str) -> Result<&TaskLogits, PolicyError> {
        self.tasks
            .get(id)
            .ok_or_else(|| PolicyError::UnknownTask(id.to_string()))
    }

    pub fn task_mut(&mut self, id: &str) -> Result<&mut TaskLogits, PolicyError> {
        self.tasks
            .get_mut(id)
            .ok_or_else(|| PolicyError::UnknownTask(id.to_string()))
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn shape(&self, id: &str) -> Result<(usize, usize), PolicyError> {
        Ok(self.task(id)?.shape())
    }

    pub fn check_action(&self, id: &str, action: Action) -> Result<(), PolicyError> {
        let (lines, candidates) = self.shape(id)?;
        if action.line >= lines || action.candidate >= candidates {
            return Err(PolicyError::ActionOutOfRange {
                task: id.to_string(),
                line: action.line,
                candidate: action.candidate,
            });
        }
        Ok(())
    }

    pub fn line_distribution(&self, id: &str, temperature: f64) -> Result<Vec<f64>, PolicyError> {
        Ok(tempered(&self.task(id)?.line, temperature))
    }

    pub fn candidate_distribution(&self, id: &str, line: usize, temperature: f64) -> Result<Vec<f64>, PolicyError> {
        let logits = self
            .task(id)?
            .candidate
            .get(line)
            .ok_or(PolicyError::ActionOutOfRange {
                task: id.to_string(),
                line,
                candidate: 0,
            })?;
        Ok(tempered(logits, temperature))
    }

    /// `log p(line) + log p(candidate | line)` at temperature 1.
    pub fn log_prob(&self, id: &str, action: Action) -> Result<f64, PolicyError> {
        self.check_action(id, action)?;
        let t = self.task(id)?;
        Ok(log_softmax(&t.line)[action.line] + log_softmax(&t.candidate[action.line])[action.candidate])
    }

    pub fn layout(&self) -> ParamLayout {
        let mut offsets = BTreeMap::new();
        let mut total = 0;
        for (id, t) in &self.tasks {
            offsets.insert(id.clone(), total);
            total += t.len();
        }
        ParamLayout { offsets, total }
    }

    pub fn num_params(&self) -> usize {
        self.tasks.values().map(TaskLogits::len).sum()
    }

    /// Flat parameter view: tasks in id order, each as line logits then
    /// candidate logits row by row.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tasks.values() {
            out.extend_from_slice(&t.line);
            for row in &t.candidate {
                out.extend_from_slice(row);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), PolicyError> {
        let expected = self.num_params();
        if params.len() != expected {
            return Err(PolicyError::ParamLength {
                expected,
                found: params.len(),
            });
        }
        let mut it = params.iter().copied();
        for t in self.tasks.values_mut() {
            for x in t.line.iter_mut() {
                *x = it.next().expect("length checked");
            }
            for row in t.candidate.iter_mut() {
                for x in row.iter_mut() {
                    *x = it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    /// Adds `scale * ∇θ log π(action)` into `grad` (laid out as [`Self::params`]).
    pub fn accumulate_grad_log_prob(
        &self,
        layout: &ParamLayout,
        id: &str,
        action: Action,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<(), PolicyError> {
        self.check_action(id, action)?;
        let t = self.task(id)?;
        let base = layout
            .offset(id)
            .ok_or_else(|| PolicyError::UnknownTask(id.to_string()))?;
        let lines = t.line.len();
        let m = t.candidate[0].len();
        for (j, p) in softmax(&t.line).into_iter().enumerate() {
            let indicator = if j == action.line { 1.0 } else { 0.0 };
            grad[base + j] += scale * (indicator - p);
        }
        let row = base + lines + action.line * m;
        for (c, p) in softmax(&t.candidate[action.line]).into_iter().enumerate() {
            let indicator = if c == action.candidate { 1.0 } else { 0.0 };
            grad[row + c] += scale * (indicator - p);
        }
        Ok(())
    }

    /// Greedy action: first argmax line, then first argmax candidate on it.
    pub fn greedy_action(&self, id: &str) -> Result<Action, PolicyError> {
        let argmax = |p: Vec<f64>| p.iter().position(|&x| x == 1.0).unwrap_or(0);
        let line = argmax(self.line_distribution(id, 0.0)?);
        let candidate = argmax(self.candidate_distribution(id, line, 0.0)?);
        Ok(Action { line, candidate })
    }

    /// SHA-256 over the exact bit patterns of all parameters and task ids.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity(self.num_params() * 8);
        for (id, t) in &self.tasks {
            bytes.extend_from_slice(id.as_bytes());
            bytes.push(0);
            for x in t.line.iter().chain(t.candidate.iter().flatten()) {
                bytes.extend_from_slice(&x.to_bits().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Frozen snapshot of a policy; exposes no mutable access.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(TabularPolicy);

impl ReferencePolicy {
    pub fn snapshot(policy: &TabularPolicy) -> Self {
        ReferencePolicy(policy.clone())
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.0
    }

    pub fn log_prob(&self, id: &str, action: Action) -> Result<f64, PolicyError> {
        self.0.log_prob(id, action)
    }
}

/// Policy checkpoint on disk (versioned JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub sft_done: bool,
    pub dpo_done: bool,
    /// Free-form provenance: training config, input hashes.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    pub policy: TabularPolicy,
}

impl PolicyCheckpoint {
    pub fn untrained(policy: TabularPolicy) -> Self {
        PolicyCheckpoint {
            sft_done: false,
            dpo_done: false,
            provenance: BTreeMap::new(),
            policy,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), JsonlError> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        jsonl::read_json(path)
    }
}
