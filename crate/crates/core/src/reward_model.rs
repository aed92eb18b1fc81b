//! Pairwise linear reward model and best-of-k selection.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::pairs::PreferencePair;
use crate::rollout::extract::extract_patch;
use crate::rollout::{Edit, Patch};
use crate::task::{Task, TaskDataset};
use crate::train::{neg_log_sigmoid, sigmoid};

/// Bumped whenever [`featurize`] changes meaning.
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_NAMES: [&str; 6] = [
    "empty_patch",
    "n_edits",
    "added_chars_per_64",
    "location_in_issue",
    "token_jaccard",
    "added_line_in_issue",
];
pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

#[derive(Debug, thiserror::Error)]
pub enum RmError {
    #[error("no candidates to rank")]
    NoCandidates,
    #[error("weights have {found} entries, expected {NUM_FEATURES}")]
    WeightLength { found: usize },
    #[error("checkpoint has feature version {found}, expected {FEATURE_VERSION}")]
    FeatureVersion { found: u32 },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lines an edit adds: `+` lines of a diff section, else the replacement.
fn added_lines(edit: &Edit) -> Vec<&str> {
    let text = edit.replacement.as_str();
    let is_diff = text.starts_with("--- ") || text.contains("\n@@") || text.starts_with("@@");
    if is_diff {
        text.lines()
            .filter(|l| l.starts_with('+') && !l.starts_with("+++"))
            .map(|l| l[1..].trim())
            .filter(|l| !l.is_empty())
            .collect()
    } else {
        text.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
    }
}

fn location_mentioned(issue: &str, location: &str) -> bool {
    let lower = issue.to_lowercase();
    let loc = location.to_lowercase();
    if lower.contains(&loc) {
        return true;
    }
    // A path also counts if its file name appears.
    loc.rsplit('/')
        .next()
        .is_some_and(|name| name.contains('.') && lower.contains(name))
}

/// Fixed-length features of a patch against a problem statement.
pub fn featurize(problem_statement: &str, patch: Option<&Patch>) -> Vec<f64> {
    let Some(patch) = patch.filter(|p| !p.edits.is_empty()) else {
        let mut f = vec![0.0; NUM_FEATURES];
        f[0] = 1.0;
        return f;
    };
    let n = patch.edits.len() as f64;
    let added: Vec<&str> = patch.edits.iter().flat_map(added_lines).collect();
    let added_chars: usize = added.iter().map(|l| l.len()).sum();
    let located = patch
        .edits
        .iter()
        .filter(|e| location_mentioned(problem_statement, &e.location))
        .count() as f64;
    let issue_tokens = tokens(problem_statement);
    let patch_tokens = tokens(&added.join("\n"));
    let union = issue_tokens.union(&patch_tokens).count();
    let jaccard = if union == 0 {
        0.0
    } else {
        issue_tokens.intersection(&patch_tokens).count() as f64 / union as f64
    };
    let verbatim = if added.is_empty() {
        0.0
    } else {
        added.iter().filter(|l| problem_statement.contains(*l)).count() as f64 / added.len() as f64
    };
    vec![0.0, n, added_chars as f64 / 64.0, located / n, jaccard, verbatim]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmExample {
    pub task_id: String,
    pub trajectory_ref: String,
    pub problem_statement: String,
    pub patch_text: String,
    pub features: Vec<f64>,
    pub label_reward: u8,
}

impl RmExample {
    pub fn new(task: &Task, trajectory_ref: &str, patch: Option<&Patch>, label_reward: u8) -> Self {
        RmExample {
            task_id: task.id.clone(),
            trajectory_ref: trajectory_ref.to_string(),
            problem_statement: task.issue.clone(),
            patch_text: patch.map(Patch::render).unwrap_or_default(),
            features: featurize(&task.issue, patch),
            label_reward,
        }
    }
}

/// Winner/loser examples for each preference pair, using the patch of each
/// response's repair step.
pub fn rm_pairs_from_preferences(tasks: &TaskDataset, pairs: &[PreferencePair]) -> Vec<(RmExample, RmExample)> {
    pairs
        .iter()
        .filter_map(|p| {
            let task = tasks.get(&p.task_id)?;
            let w = extract_patch(task, &p.winner.response);
            let l = extract_patch(task, &p.loser.response);
            Some((
                RmExample::new(task, &p.winner.trajectory_ref, w.as_ref(), 1),
                RmExample::new(task, &p.loser.trajectory_ref, l.as_ref(), 0),
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            learning_rate: 0.5,
            epochs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRm {
    pub feature_version: u32,
    pub weights: Vec<f64>,
}

impl Default for PairwiseRm {
    fn default() -> Self {
        PairwiseRm {
            feature_version: FEATURE_VERSION,
            weights: vec![0.0; NUM_FEATURES],
        }
    }
}

impl PairwiseRm {
    pub fn score(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), RmError> {
        Ok(jsonl::write_json(path, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, RmError> {
        let rm: PairwiseRm = jsonl::read_json(path)?;
        if rm.feature_version != FEATURE_VERSION {
            return Err(RmError::FeatureVersion {
                found: rm.feature_version,
            });
        }
        if rm.weights.len() != NUM_FEATURES {
            return Err(RmError::WeightLength {
                found: rm.weights.len(),
            });
        }
        Ok(rm)
    }
}

/// Mean `−ln σ(score_w − score_l)`.
pub fn rm_loss(rm: &PairwiseRm, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|(w, l)| neg_log_sigmoid(rm.score(w) - rm.score(l)))
        .sum::<f64>()
        / pairs.len() as f64
}

pub fn rm_grad(rm: &PairwiseRm, pairs: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
    let mut grad = vec![0.0; rm.weights.len()];
    if pairs.is_empty() {
        return grad;
    }
    let n = pairs.len() as f64;
    for (w, l) in pairs {
        let coef = -sigmoid(-(rm.score(w) - rm.score(l))) / n;
        for (g, (a, b)) in grad.iter_mut().zip(w.iter().zip(l)) {
            *g += coef * (a - b);
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Fraction of pairs with `score_w > score_l`.
pub fn pairwise_accuracy(rm: &PairwiseRm, pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(w, l)| rm.score(w) > rm.score(l)).count() as f64 / pairs.len() as f64
}

/// Full-batch gradient descent from zero weights.
pub fn rm_train(pairs: &[(Vec<f64>, Vec<f64>)], config: &RmConfig) -> (PairwiseRm, Vec<RmLogRow>) {
    let mut rm = PairwiseRm::default();
    let row = |epoch, rm: &PairwiseRm| RmLogRow {
        epoch,
        loss: rm_loss(rm, pairs),
        accuracy: pairwise_accuracy(rm, pairs),
    };
    let mut log = vec![row(0, &rm)];
    if pairs.iter().all(|(w, l)| w == l) {
        log::warn!("reward-model pairs have identical features; gradient is zero");
        return (rm, log);
    }
    for epoch in 1..=config.epochs {
        let grad = rm_grad(&rm, pairs);
        for (w, g) in rm.weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
        log.push(row(epoch, &rm));
    }
    (rm, log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub selected: usize,
    pub scores: Vec<f64>,
}

/// Index of the highest-scoring feature vector; ties go to the lowest index.
pub fn rank_features(rm: &PairwiseRm, candidates: &[Vec<f64>]) -> Result<Ranking, RmError> {
    if candidates.is_empty() {
        return Err(RmError::NoCandidates);
    }
    let scores: Vec<f64> = candidates.iter().map(|f| rm.score(f)).collect();
    let mut selected = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[selected] {
            selected = i;
        }
    }
    Ok(Ranking { selected, scores })
}

pub fn rank_best_of_k(
    rm: &PairwiseRm,
    problem_statement: &str,
    patches: &[Option<&Patch>],
) -> Result<Ranking, RmError> {
    let features: Vec<Vec<f64>> = patches.iter().map(|p| featurize(problem_statement, *p)).collect();
    rank_features(rm, &features)
}
