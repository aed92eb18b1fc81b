//! SFT and DPO over the tabular policy, plus the KL-regularized reward.
//!
//! Both optimizers are plain full-batch gradient descent, accumulated in a
//! fixed order so that results are bit-reproducible.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pairs::{PreferencePair, SftExample};
use crate::policy::{Action, PolicyError, ReferencePolicy, TabularPolicy};
use crate::rollout::extract::synth_action;

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_LEARNING_RATE: f64 = 0.5;
pub const DEFAULT_EPOCHS: usize = 200;
/// DPO aborts once the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{what} {reference}: response does not map to a policy action")]
    Unmappable { what: &'static str, reference: String },
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("DPO diverged at epoch {epoch}: loss {loss} exceeds {DIVERGENCE_FACTOR}x the initial {initial}")]
    Diverged { epoch: usize, loss: f64, initial: f64 },
    #[error("training log {path}: {source}")]
    Log {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: DEFAULT_BETA,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
        }
    }
}

/// A preference pair resolved to policy actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionPair<'a> {
    pub task_id: &'a str,
    pub winner: Action,
    pub loser: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionTarget<'a> {
    pub task_id: &'a str,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLogRow {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoLogRow {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
}

fn action_in(policy: &TabularPolicy, task: &str, response: &str) -> Option<Action> {
    let a = synth_action(response)?;
    policy.check_action(task, a).ok().map(|_| a)
}

/// Maps every pair to actions; any unmappable response is an error.
pub fn resolve_pairs<'a>(
    policy: &TabularPolicy,
    pairs: &'a [PreferencePair],
) -> Result<Vec<ActionPair<'a>>, TrainError> {
    pairs
        .iter()
        .map(|p| {
            let winner = action_in(policy, &p.task_id, &p.winner.response).ok_or_else(|| TrainError::Unmappable {
                what: "winner",
                reference: p.winner.trajectory_ref.clone(),
            })?;
            let loser = action_in(policy, &p.task_id, &p.loser.response).ok_or_else(|| TrainError::Unmappable {
                what: "loser",
                reference: p.loser.trajectory_ref.clone(),
            })?;
            Ok(ActionPair {
                task_id: &p.task_id,
                winner,
                loser,
            })
        })
        .collect()
}

/// Like [`resolve_pairs`] but drops unmappable pairs; returns the drop count.
pub fn resolve_pairs_lenient<'a>(policy: &TabularPolicy, pairs: &'a [PreferencePair]) -> (Vec<ActionPair<'a>>, usize) {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        match (
            action_in(policy, &p.task_id, &p.winner.response),
            action_in(policy, &p.task_id, &p.loser.response),
        ) {
            (Some(winner), Some(loser)) => out.push(ActionPair {
                task_id: &p.task_id,
                winner,
                loser,
            }),
            _ => log::warn!(
                "skipping pair {} > {}: response outside the action space",
                p.winner.trajectory_ref,
                p.loser.trajectory_ref
            ),
        }
    }
    let dropped = pairs.len() - out.len();
    (out, dropped)
}

pub fn resolve_sft<'a>(
    policy: &TabularPolicy,
    examples: &'a [SftExample],
) -> Result<Vec<ActionTarget<'a>>, TrainError> {
    examples
        .iter()
        .map(|e| {
            action_in(policy, &e.task_id, &e.target)
                .map(|action| ActionTarget {
                    task_id: &e.task_id,
                    action,
                })
                .ok_or_else(|| TrainError::Unmappable {
                    what: "sft target",
                    reference: e.trajectory_ref.clone(),
                })
        })
        .collect()
}

/// Mean negative log-likelihood of the targets.
pub fn sft_loss(policy: &TabularPolicy, targets: &[ActionTarget]) -> Result<f64, TrainError> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for t in targets {
        sum -= policy.log_prob(t.task_id, t.action)?;
    }
    Ok(sum / targets.len() as f64)
}

pub fn sft_grad(policy: &TabularPolicy, targets: &[ActionTarget]) -> Result<Vec<f64>, TrainError> {
    let layout = policy.layout();
    let mut grad = vec![0.0; layout.len()];
    if targets.is_empty() {
        return Ok(grad);
    }
    let scale = -1.0 / targets.len() as f64;
    for t in targets {
        policy.accumulate_grad_log_prob(&layout, t.task_id, t.action, scale, &mut grad)?;
    }
    Ok(grad)
}

fn step(policy: &mut TabularPolicy, grad: &[f64], lr: f64) -> Result<(), TrainError> {
    let mut theta = policy.params();
    for (x, g) in theta.iter_mut().zip(grad) {
        *x -= lr * g;
    }
    policy.set_params(&theta)?;
    Ok(())
}

/// Full-batch gradient descent on the SFT loss. Row 0 of the log is the
/// loss before the first step.
pub fn sft_train(
    policy: &TabularPolicy,
    targets: &[ActionTarget],
    config: &SftConfig,
) -> Result<(TabularPolicy, Vec<SftLogRow>), TrainError> {
    let mut p = policy.clone();
    let mut log = vec![SftLogRow {
        epoch: 0,
        loss: sft_loss(&p, targets)?,
    }];
    if targets.is_empty() {
        return Ok((p, log));
    }
    for epoch in 1..=config.epochs {
        let grad = sft_grad(&p, targets)?;
        step(&mut p, &grad, config.learning_rate)?;
        log.push(SftLogRow {
            epoch,
            loss: sft_loss(&p, targets)?,
        });
    }
    Ok((p, log))
}

/// `-ln σ(z)`, stable for large |z|.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))`.
fn log_ratio_gap(policy: &TabularPolicy, reference: &ReferencePolicy, pair: &ActionPair) -> Result<f64, TrainError> {
    let w = policy.log_prob(pair.task_id, pair.winner)? - reference.log_prob(pair.task_id, pair.winner)?;
    let l = policy.log_prob(pair.task_id, pair.loser)? - reference.log_prob(pair.task_id, pair.loser)?;
    Ok(w - l)
}

fn check_beta(beta: f64) -> Result<(), TrainError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Beta(beta))
    }
}

/// Mean DPO loss over `pairs`; 0 for no pairs.
pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    pairs: &[ActionPair],
    beta: f64,
) -> Result<f64, TrainError> {
    check_beta(beta)?;
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += neg_log_sigmoid(beta * log_ratio_gap(policy, reference, p)?);
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean implicit-reward margin `β · gap` over `pairs`.
pub fn dpo_margin(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    pairs: &[ActionPair],
    beta: f64,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for p in pairs {
        sum += beta * log_ratio_gap(policy, reference, p)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Gradient of [`dpo_loss`] with respect to the policy parameters.
pub fn dpo_grad(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    pairs: &[ActionPair],
    beta: f64,
) -> Result<Vec<f64>, TrainError> {
    check_beta(beta)?;
    let layout = policy.layout();
    let mut grad = vec![0.0; layout.len()];
    if pairs.is_empty() {
        return Ok(grad);
    }
    let n = pairs.len() as f64;
    for p in pairs {
        let z = beta * log_ratio_gap(policy, reference, p)?;
        // d/dz −ln σ(z) = −σ(−z)
        let coef = -sigmoid(-z) * beta / n;
        policy.accumulate_grad_log_prob(&layout, p.task_id, p.winner, coef, &mut grad)?;
        policy.accumulate_grad_log_prob(&layout, p.task_id, p.loser, -coef, &mut grad)?;
    }
    Ok(grad)
}

/// Full-batch gradient descent on the DPO loss against a frozen reference.
pub fn dpo_train(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    pairs: &[ActionPair],
    config: &DpoConfig,
) -> Result<(TabularPolicy, Vec<DpoLogRow>), TrainError> {
    check_beta(config.beta)?;
    let mut p = policy.clone();
    let initial = dpo_loss(&p, reference, pairs, config.beta)?;
    let mut log = vec![DpoLogRow {
        epoch: 0,
        loss: initial,
        margin: dpo_margin(&p, reference, pairs, config.beta)?,
    }];
    if pairs.is_empty() {
        return Ok((p, log));
    }
    for epoch in 1..=config.epochs {
        let grad = dpo_grad(&p, reference, pairs, config.beta)?;
        step(&mut p, &grad, config.learning_rate)?;
        let loss = dpo_loss(&p, reference, pairs, config.beta)?;
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial {
            return Err(TrainError::Diverged { epoch, loss, initial });
        }
        log.push(DpoLogRow {
            epoch,
            loss,
            margin: dpo_margin(&p, reference, pairs, config.beta)?,
        });
    }
    Ok((p, log))
}

/// `r − β · log(π(y|x) / π_ref(y|x))`; a diagnostic, never optimized.
pub fn kl_regularized_reward(
    policy: &TabularPolicy,
    reference: &ReferencePolicy,
    task_id: &str,
    action: Action,
    reward: f64,
    beta: f64,
) -> Result<f64, TrainError> {
    let ratio = policy.log_prob(task_id, action)? - reference.log_prob(task_id, action)?;
    Ok(reward - beta * ratio)
}

pub fn write_log_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), TrainError> {
    let err = |source| TrainError::Log {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}
