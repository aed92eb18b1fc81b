//! Policy backends: the text-generation contract and its implementations.

use std::collections::BTreeMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{self, ScaffoldStep};
use super::SamplingParams;
use crate::policy::TabularPolicy;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("prompt not understood: {0}")]
    Prompt(String),
    #[error("no parameters for task `{0}`")]
    UnknownTask(String),
}

impl BackendError {
    /// Transport failures may succeed on a retry; the others will not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_logprobs: bool,
    /// Same prompt and params (temperature 0, fixed seed) give the same text.
    pub deterministic: bool,
    /// `Some(1)` makes the engine serialize calls; `None` means unbounded.
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            token_logprobs: None,
        }
    }
}

/// A text-generation policy.
pub trait PolicyBackend: Send + Sync {
    fn id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError>;
}

impl<B: PolicyBackend + ?Sized> PolicyBackend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        (**self).generate(prompt, params)
    }
}

/// Draws an index from `probs` with one uniform variate.
fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1: take the last index with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Desk-scale backend that answers scaffold prompts for synthetic tasks
/// from a [`TabularPolicy`].
///
/// Localization samples a line from the line logits; repair samples a
/// candidate from the candidate logits of the localized line. A hint whose
/// environment-interaction section names `line b` pins both steps to `b`.
#[derive(Debug, Clone)]
pub struct TabularBackend {
    id: String,
    policy: TabularPolicy,
}

impl TabularBackend {
    /// Tasks in `shapes` the policy has never seen start out uniform.
    pub fn new(id: impl Into<String>, mut policy: TabularPolicy, shapes: &BTreeMap<String, (usize, usize)>) -> Self {
        policy.ensure_shapes(shapes);
        TabularBackend { id: id.into(), policy }
    }

    pub fn policy(&self) -> &TabularPolicy {
        &self.policy
    }

    fn sample_line(&self, task: &str, params: &SamplingParams, rng: &mut ChaCha8Rng) -> Result<usize, BackendError> {
        let probs = self
            .policy
            .line_distribution(task, params.temperature)
            .map_err(|_| BackendError::UnknownTask(task.to_string()))?;
        Ok(sample_index(&probs, rng))
    }
}

impl PolicyBackend for TabularBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_logprobs: true,
            deterministic: true,
            max_concurrency: None,
        }
    }

    fn generate(&self, prompt_text: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        let task = prompt::task_id_of(prompt_text).ok_or_else(|| BackendError::Prompt("missing task id".into()))?;
        let step =
            prompt::step_of(prompt_text).ok_or_else(|| BackendError::Prompt("missing scaffold step heading".into()))?;
        let (lines, _) = self
            .policy
            .shape(task)
            .map_err(|_| BackendError::UnknownTask(task.to_string()))?;
        let hint = prompt::hinted_line(prompt_text).filter(|&l| l < lines);
        match step {
            ScaffoldStep::Localization => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &["localization"]));
                let line = match hint {
                    Some(line) => line,
                    None => self.sample_line(task, params, &mut rng)?,
                };
                let lp = self
                    .policy
                    .line_distribution(task, 1.0)
                    .ok()
                    .map(|p| vec![p[line].ln()]);
                Ok(Completion {
                    text: format!("```\nline {line}\n```\n"),
                    token_logprobs: lp,
                })
            }
            ScaffoldStep::Repair => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &["repair"]));
                let line = match hint.or_else(|| prompt::located_line(prompt_text).filter(|&l| l < lines)) {
                    Some(line) => line,
                    None => self.sample_line(task, params, &mut rng)?,
                };
                let probs = self
                    .policy
                    .candidate_distribution(task, line, params.temperature)
                    .map_err(|_| BackendError::UnknownTask(task.to_string()))?;
                let candidate = sample_index(&probs, &mut rng);
                let lp = self
                    .policy
                    .candidate_distribution(task, line, 1.0)
                    .ok()
                    .map(|p| vec![p[candidate].ln()]);
                Ok(Completion {
                    text: format!("```patch\nline {line}\ncandidate {candidate}\n```\n"),
                    token_logprobs: lp,
                })
            }
        }
    }
}

/// Client for an OpenAI-compatible `/v1/completions` endpoint.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    max_concurrency: Option<usize>,
    agent: ureq::Agent,
    logprobs: bool,
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
    seed: u64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    text: String,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

impl RemoteBackend {
    /// `endpoint` is the server root, e.g. `http://localhost:8000`.
    pub fn new(endpoint: &str, model: impl Into<String>, timeout: Duration) -> Self {
        let model = model.into();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            id: format!("remote:{model}"),
            url: format!("{}/v1/completions", endpoint.trim_end_matches('/')),
            model,
            api_key: None,
            max_concurrency: None,
            agent,
            logprobs: false,
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_max_concurrency(mut self, limit: Option<usize>) -> Self {
        self.max_concurrency = limit;
        self
    }

    pub fn with_logprobs(mut self, enabled: bool) -> Self {
        self.logprobs = enabled;
        self
    }

    pub(crate) fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        let body = serde_json::to_string(&CompletionRequest {
            model: &self.model,
            prompt,
            temperature: params.temperature,
            seed: params.seed,
            max_tokens: params.max_tokens,
            logprobs: self.logprobs.then_some(1),
        })
        .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.as_str())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status >= 500 || status == 429 {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        if status >= 400 {
            return Err(BackendError::Protocol(format!("HTTP {status}: {text}")));
        }
        let parsed: CompletionResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))?;
        let token_logprobs = choice
            .logprobs
            .map(|lp| lp.token_logprobs.into_iter().flatten().collect());
        Ok(Completion {
            text: choice.text,
            token_logprobs,
        })
    }
}

impl PolicyBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_logprobs: self.logprobs,
            deterministic: false,
            max_concurrency: self.max_concurrency,
        }
    }

    fn generate(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        self.complete(prompt, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_index_respects_point_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_index(&[0.0, 1.0, 0.0], &mut rng), 1);
        }
    }

    #[test]
    fn sample_index_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        let draws = 60_000;
        for _ in 0..draws {
            counts[sample_index(&probs, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let freq = *c as f64 / draws as f64;
            // 5 standard errors
            assert!((freq - p).abs() < 5.0 * (p * (1.0 - p) / draws as f64).sqrt());
        }
    }

    #[test]
    fn retryable_classification() {
        assert!(BackendError::Transport("x".into()).is_retryable());
        assert!(!BackendError::Protocol("x".into()).is_retryable());
    }
}
