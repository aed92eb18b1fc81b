//! Run configuration: INI-style `key = value` sections plus
//! `section.key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::pairs::AssemblyConfig;
use crate::reward_model::RmConfig;
use crate::rollout::RolloutConfig;
use crate::seed::derive_seed;
use crate::train::{DpoConfig, SftConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form section.key=value")]
    Override(String),
    #[error("`{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("`{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

/// Every accepted key with its default; an empty default means unset.
const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.out_dir", "run"),
    ("run.guidance_enabled", "true"),
    ("dataset.tasks", ""),
    ("dataset.synth_count", "64"),
    ("dataset.synth_lines", "6"),
    ("dataset.synth_candidates", "8"),
    ("dataset.seed", ""),
    ("policy.backend", "tabular"),
    ("policy.init", ""),
    ("policy.endpoint", ""),
    ("policy.model", ""),
    ("policy.api_key_env", ""),
    ("policy.timeout_s", "120"),
    ("policy.max_concurrency", ""),
    ("teacher.kind", "oracle"),
    ("teacher.endpoint", ""),
    ("teacher.model", ""),
    ("teacher.api_key_env", ""),
    ("teacher.timeout_s", "120"),
    ("teacher.reference_patches", ""),
    ("teacher.workers", "4"),
    ("rollout.n", "16"),
    ("rollout.temperature", "0.6"),
    ("rollout.max_tokens", "2048"),
    ("rollout.retries", "2"),
    ("rollout.max_localized_files", "5"),
    ("rollout.workers", "4"),
    ("rollout.seed", ""),
    ("eval.n", "32"),
    ("eval.seed", ""),
    ("eval.workers", "4"),
    ("eval.container_runtime", "docker"),
    ("eval.bootstrap_seed", ""),
    ("assembly.max_pairs_per_task", "4"),
    ("assembly.sft_fraction", "0.2"),
    ("assembly.keep_guidance_in_prompt", "false"),
    ("assembly.allow_off_policy_winners", "true"),
    ("assembly.strict", "false"),
    ("assembly.seed", ""),
    ("sft.learning_rate", "0.5"),
    ("sft.epochs", "200"),
    ("dpo.beta", "0.1"),
    ("dpo.learning_rate", "0.5"),
    ("dpo.epochs", "200"),
    ("dpo.seed", ""),
    ("rm.learning_rate", "0.5"),
    ("rm.epochs", "200"),
    ("rm.k", "32"),
];

/// Flat `section.key → value` map, before typing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawConfig(BTreeMap<String, String>);

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig(DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.0.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .filter(|(k, _)| k.contains('.'))
            .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
        self.set(key.trim(), value)
    }

    /// Merges an INI file; relative paths in it resolve against its directory.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let ini = ini::Ini::load_from_file(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(ConfigError::UnknownKey(k.to_string()));
                }
                continue;
            };
            for (k, v) in props.iter() {
                let key = format!("{section}.{k}");
                let value =
                    if PATH_KEYS.contains(&key.as_str()) && !v.trim().is_empty() && Path::new(v.trim()).is_relative() {
                        base.join(v.trim()).to_string_lossy().into_owned()
                    } else {
                        v.to_string()
                    };
                self.set(&key, &value)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).expect("key is in DEFAULTS")
    }

    /// INI text of every key, sections in alphabetical order.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in &self.0 {
            let (section, name) = key.split_once('.').expect("keys are dotted");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.0
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let value = self.get(key);
        value.parse().map_err(|_| ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
        })
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    fn seed(&self, key: &str, master: u64, label: &str) -> Result<u64, ConfigError> {
        Ok(self.opt(key)?.unwrap_or_else(|| derive_seed(master, &[label])))
    }
}

const PATH_KEYS: &[&str] = &[
    "run.out_dir",
    "dataset.tasks",
    "policy.init",
    "teacher.reference_patches",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    File(PathBuf),
    Synth {
        count: usize,
        lines: usize,
        candidates: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub max_concurrency: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BackendChoice {
    Tabular,
    Remote(Endpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TeacherChoice {
    Oracle,
    Remote(Endpoint),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub guidance_enabled: bool,
    pub dataset: DatasetSource,
    pub backend: BackendChoice,
    pub init_policy: Option<PathBuf>,
    pub teacher: TeacherChoice,
    pub reference_patches: Option<PathBuf>,
    pub teacher_workers: usize,
    pub rollout: RolloutConfig,
    pub rollout_n: usize,
    pub rollout_seed: u64,
    pub eval_n: usize,
    pub eval_seed: u64,
    pub eval_workers: usize,
    pub container_runtime: String,
    pub bootstrap_seed: u64,
    pub assembly: AssemblyConfig,
    pub strict_pairs: bool,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
    pub rm: RmConfig,
    pub rm_k: usize,
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn endpoint(raw: &RawConfig, section: &str) -> Result<Endpoint, ConfigError> {
    let key = |k: &str| format!("{section}.{k}");
    let url = raw.get(&key("endpoint")).to_string();
    if url.is_empty() {
        return Err(invalid(&key("endpoint"), "required for a remote backend"));
    }
    let model = raw.get(&key("model")).to_string();
    if model.is_empty() {
        return Err(invalid(&key("model"), "required for a remote backend"));
    }
    let timeout_s: f64 = raw.parse(&key("timeout_s"))?;
    if !(timeout_s > 0.0) {
        return Err(invalid(&key("timeout_s"), "must be positive"));
    }
    let max_concurrency = if section == "policy" {
        raw.opt("policy.max_concurrency")?
    } else {
        None
    };
    Ok(Endpoint {
        url,
        model,
        api_key_env: Some(raw.get(&key("api_key_env")).to_string()).filter(|s| !s.is_empty()),
        timeout: Duration::from_secs_f64(timeout_s),
        max_concurrency,
    })
}

impl RunConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let seed: u64 = raw.parse("run.seed")?;
        let dataset = match raw.path("dataset.tasks") {
            Some(p) => DatasetSource::File(p),
            None => DatasetSource::Synth {
                count: raw.parse("dataset.synth_count")?,
                lines: raw.parse("dataset.synth_lines")?,
                candidates: raw.parse("dataset.synth_candidates")?,
                seed: raw.seed("dataset.seed", seed, "dataset")?,
            },
        };
        let backend = match raw.get("policy.backend") {
            "tabular" => BackendChoice::Tabular,
            "remote" => BackendChoice::Remote(endpoint(raw, "policy")?),
            other => return Err(invalid("policy.backend", format!("`{other}` is not tabular or remote"))),
        };
        let teacher = match raw.get("teacher.kind") {
            "oracle" => TeacherChoice::Oracle,
            "remote" => TeacherChoice::Remote(endpoint(raw, "teacher")?),
            other => return Err(invalid("teacher.kind", format!("`{other}` is not oracle or remote"))),
        };
        let temperature: f64 = raw.parse("rollout.temperature")?;
        if !(temperature >= 0.0) {
            return Err(invalid("rollout.temperature", "must be non-negative"));
        }
        let rollout = RolloutConfig {
            temperature,
            max_tokens: raw.parse("rollout.max_tokens")?,
            retries: raw.parse("rollout.retries")?,
            max_localized_files: raw.parse("rollout.max_localized_files")?,
            workers: raw.parse("rollout.workers")?,
            on_policy: true,
        };
        let assembly_seed = raw.seed("assembly.seed", seed, "assembly")?;
        let assembly = AssemblyConfig {
            max_pairs_per_task: raw.parse("assembly.max_pairs_per_task")?,
            sft_fraction: raw.parse("assembly.sft_fraction")?,
            keep_guidance_in_prompt: raw.parse("assembly.keep_guidance_in_prompt")?,
            allow_off_policy_winners: raw.parse("assembly.allow_off_policy_winners")?,
            seed: assembly_seed,
        };
        if !(assembly.sft_fraction > 0.0 && assembly.sft_fraction <= 1.0) {
            return Err(invalid("assembly.sft_fraction", "must be in (0, 1]"));
        }
        let dpo = DpoConfig {
            beta: raw.parse("dpo.beta")?,
            learning_rate: raw.parse("dpo.learning_rate")?,
            epochs: raw.parse("dpo.epochs")?,
            seed: raw.seed("dpo.seed", seed, "dpo")?,
        };
        if !(dpo.beta > 0.0) {
            return Err(invalid("dpo.beta", "must be positive"));
        }
        let rollout_n: usize = raw.parse("rollout.n")?;
        let eval_n: usize = raw.parse("eval.n")?;
        let rm_k: usize = raw.parse("rm.k")?;
        if rollout_n == 0 {
            return Err(invalid("rollout.n", "must be at least 1"));
        }
        if eval_n == 0 {
            return Err(invalid("eval.n", "must be at least 1"));
        }
        if rm_k == 0 || rm_k > eval_n {
            return Err(invalid("rm.k", format!("must be in 1..={eval_n} (eval.n)")));
        }
        Ok(RunConfig {
            seed,
            out_dir: raw.path("run.out_dir").unwrap_or_else(|| PathBuf::from("run")),
            guidance_enabled: raw.parse("run.guidance_enabled")?,
            dataset,
            backend,
            init_policy: raw.path("policy.init"),
            teacher,
            reference_patches: raw.path("teacher.reference_patches"),
            teacher_workers: raw.parse("teacher.workers")?,
            rollout,
            rollout_n,
            rollout_seed: raw.seed("rollout.seed", seed, "rollout")?,
            eval_n,
            eval_seed: raw.seed("eval.seed", seed, "eval")?,
            eval_workers: raw.parse("eval.workers")?,
            container_runtime: raw.get("eval.container_runtime").to_string(),
            bootstrap_seed: raw.seed("eval.bootstrap_seed", seed, "bootstrap")?,
            assembly,
            strict_pairs: raw.parse("assembly.strict")?,
            sft: SftConfig {
                learning_rate: raw.parse("sft.learning_rate")?,
                epochs: raw.parse("sft.epochs")?,
            },
            dpo,
            rm: RmConfig {
                learning_rate: raw.parse("rm.learning_rate")?,
                epochs: raw.parse("rm.epochs")?,
            },
            rm_k,
        })
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<(Self, RawConfig), ConfigError> {
        let mut raw = RawConfig::default();
        if let Some(f) = file {
            raw.merge_file(f)?;
        }
        for o in overrides {
            raw.apply_override(o)?;
        }
        Ok((RunConfig::from_raw(&raw)?, raw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = RunConfig::from_raw(&RawConfig::default()).unwrap();
        assert_eq!(cfg.rollout_n, 16);
        assert_eq!(cfg.eval_n, 32);
        assert_eq!(cfg.assembly.sft_fraction, 0.2);
        assert_eq!(cfg.dpo.beta, 0.1);
        assert!(cfg.guidance_enabled);
        assert_eq!(
            cfg.dataset,
            DatasetSource::Synth {
                count: 64,
                lines: 6,
                candidates: 8,
                seed: derive_seed(0, &["dataset"])
            }
        );
        assert_eq!(cfg.backend, BackendChoice::Tabular);
        assert_eq!(cfg.teacher, TeacherChoice::Oracle);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ini");
        std::fs::write(&path, "[run]\nseed = 7\nout_dir = out\n\n[dpo]\nbeta = 0.2\n").unwrap();
        let (cfg, raw) = RunConfig::load(
            Some(&path),
            &["dpo.epochs=5".into(), "run.guidance_enabled=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(cfg.dpo.beta, 0.2);
        assert_eq!(cfg.dpo.epochs, 5);
        assert!(!cfg.guidance_enabled);
        let reparsed = dir.path().join("again.ini");
        std::fs::write(&reparsed, raw.to_ini()).unwrap();
        let (again, _) = RunConfig::load(Some(&reparsed), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        let mut raw = RawConfig::default();
        assert!(matches!(
            raw.apply_override("dpo.gamma=1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(raw.apply_override("nodot=1"), Err(ConfigError::Override(_))));
        raw.set("dpo.beta", "0").unwrap();
        assert!(matches!(RunConfig::from_raw(&raw), Err(ConfigError::Invalid { .. })));
        let mut raw = RawConfig::default();
        raw.set("policy.backend", "remote").unwrap();
        assert!(matches!(RunConfig::from_raw(&raw), Err(ConfigError::Invalid { .. })));
        let mut raw = RawConfig::default();
        raw.set("rollout.n", "many").unwrap();
        assert!(matches!(RunConfig::from_raw(&raw), Err(ConfigError::Value { .. })));
    }
}
