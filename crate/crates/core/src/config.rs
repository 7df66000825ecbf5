//! Run configuration: the declarative TOML document validated before any
//! side effects, and the immutable snapshot stored in the workflow state.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::RunnerConfig;
use crate::logmine::FragmentBudget;
use crate::stage::StageId;
use crate::state::TargetRef;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    /// One iteration is one Execute → Analyze → repair cycle.
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_max_stage_retries")]
    pub max_stage_retries: u32,
    #[serde(default)]
    pub wall_clock_limit_secs: Option<u64>,
}

fn default_max_iterations() -> u32 {
    5
}
fn default_max_stage_retries() -> u32 {
    3
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_iterations: default_max_iterations(), max_stage_retries: default_max_stage_retries(), wall_clock_limit_secs: None }
    }
}

impl Budget {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_iterations == 0 || self.max_stage_retries == 0 || self.wall_clock_limit_secs == Some(0) {
            return Err(ConfigError::Invalid("budget values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum LlmBackendConfig {
    /// Chat-completion endpoint configured through `ATTEST_LLM_*` variables.
    Live,
    /// Directory of canned responses keyed by stage, iteration and call ordinal.
    Scripted { path: PathBuf },
    /// Previously recorded transcript (JSON lines).
    Replay { path: PathBuf },
}

impl LlmBackendConfig {
    /// Parses `live`, `scripted:<path>` or `replay:<path>`.
    pub fn parse_flag(flag: &str) -> Result<Self, ConfigError> {
        match flag.split_once(':') {
            None if flag == "live" => Ok(LlmBackendConfig::Live),
            Some(("scripted", p)) if !p.is_empty() => Ok(LlmBackendConfig::Scripted { path: p.into() }),
            Some(("replay", p)) if !p.is_empty() => Ok(LlmBackendConfig::Replay { path: p.into() }),
            _ => Err(ConfigError::Invalid(format!("unknown LLM backend `{flag}` (expected live, scripted:PATH or replay:PATH)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSettings {
    #[serde(flatten)]
    pub backend: LlmBackendConfig,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_chars")]
    pub max_output_chars: usize,
}

fn default_max_output_chars() -> usize {
    20_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    #[serde(default)]
    pub budget: Budget,
    #[serde(default = "default_block_limit")]
    pub block_limit: u32,
    #[serde(default = "default_checkpoints")]
    pub checkpoint_stages: BTreeSet<StageId>,
    pub llm: LlmSettings,
    pub runner: RunnerConfig,
    #[serde(default)]
    pub fragment_budget: FragmentBudget,
    /// Maximum characters of target source placed in the dossier.
    #[serde(default = "default_context_chars")]
    pub context_chars: usize,
    #[serde(default = "default_test_suffix")]
    pub test_file_suffix: String,
    /// Directory of prompt template overrides (`<template>.txt`).
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
}

fn default_block_limit() -> u32 {
    3
}
fn default_checkpoints() -> BTreeSet<StageId> {
    BTreeSet::from([StageId::Requirements, StageId::Plan])
}
fn default_context_chars() -> usize {
    8_000
}
fn default_test_suffix() -> String {
    ".py".into()
}

impl ConfigSnapshot {
    /// Checks value ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.budget.validate()?;
        if self.block_limit == 0 {
            return Err(ConfigError::Invalid("block_limit must be positive".into()));
        }
        if self.checkpoint_stages.contains(&StageId::Report) {
            return Err(ConfigError::Invalid("Report cannot be a checkpoint stage".into()));
        }
        if self.llm.max_output_chars == 0 {
            return Err(ConfigError::Invalid("llm.max_output_chars must be positive".into()));
        }
        if !(0.0..=2.0).contains(&self.llm.temperature) {
            return Err(ConfigError::Invalid("llm.temperature must be within [0, 2]".into()));
        }
        match &self.llm.backend {
            LlmBackendConfig::Scripted { path } if !path.is_dir() => {
                return Err(ConfigError::Invalid(format!("playbook directory {} does not exist", path.display())));
            }
            LlmBackendConfig::Replay { path } if !path.is_file() => {
                return Err(ConfigError::Invalid(format!("replay transcript {} does not exist", path.display())));
            }
            _ => {}
        }
        self.runner.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.fragment_budget.validate().map_err(ConfigError::Invalid)?;
        if self.context_chars < 64 {
            return Err(ConfigError::Invalid("context_chars must be at least 64".into()));
        }
        if !self.test_file_suffix.starts_with('.') || self.test_file_suffix.contains('/') {
            return Err(ConfigError::Invalid(format!("test_file_suffix `{}` must look like `.py`", self.test_file_suffix)));
        }
        if let Some(dir) = &self.prompt_dir {
            if !dir.is_dir() {
                return Err(ConfigError::Invalid(format!("prompt_dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.llm.backend {
            LlmBackendConfig::Scripted { path } | LlmBackendConfig::Replay { path } => fix(path),
            LlmBackendConfig::Live => {}
        }
        fix(&mut self.runner.working_dir);
        for f in &mut self.runner.subject_files {
            if f.is_relative() {
                *f = self.runner.working_dir.join(&*f);
            }
        }
        if let Some(p) = &mut self.prompt_dir {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub module_path: String,
    pub function_name: String,
    pub source_file: PathBuf,
}

/// The on-disk configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(default)]
    pub target: Option<TargetSection>,
    #[serde(flatten)]
    pub snapshot: ConfigSnapshot,
}

impl ConfigFile {
    /// Parses `text`, resolving relative paths against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut file: ConfigFile = toml::from_str(text)?;
        file.snapshot.resolve_paths(base_dir);
        if let Some(t) = &mut file.target {
            if t.source_file.is_relative() {
                t.source_file = base_dir.join(&t.source_file);
            }
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
        let base = std::fs::canonicalize(&base).unwrap_or(base);
        Self::parse(&text, &base)
    }

    pub fn target_ref(&self) -> Option<TargetRef> {
        self.target.as_ref().map(|t| TargetRef {
            module_path: t.module_path.clone(),
            function_name: t.function_name.clone(),
            source_file: t.source_file.clone(),
        })
    }
}
