//! The seven workflow stages.
//!
//! Each stage reads its inputs through [`StageCtx`], which records every
//! artifact kind read, and stages its outputs there too. Outputs reach disk
//! only when the orchestrator commits the stage, so an interrupted stage
//! leaves the workspace exactly as it was before the stage started.

mod analyze;
mod codegen;
mod execute;
mod plan;
mod report;
mod requirements;
mod understand;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use crate::artifacts::{AnalysisPlan, ArtifactError};
use crate::blocks::{parse_blocks, BlockedTestFile, BEGIN_PREFIX};
use crate::llm::{LlmError, LlmGateway, LlmRequest};
use crate::prompts::{PromptError, PromptSet};
use crate::stage::{StageId, Transition};
use crate::state::{ArtifactKind, ArtifactRef, StateError, WorkflowState};

pub use analyze::{MAX_FOLLOW_UPS, MAX_FORMAT_RETRIES};
pub use codegen::{repair_targets, GenerationMode};
pub use report::{final_status, render_report};
pub use understand::{inspect_source, SourceInspection, TRUNCATION_MARKER};

/// Services a stage may call besides the artifact store.
pub struct StageServices {
    pub llm: LlmGateway,
    pub prompts: PromptSet,
}

impl StageServices {
    pub fn new(llm: LlmGateway, prompts: PromptSet) -> Self {
        StageServices { llm, prompts }
    }

    /// Gateway and prompts as configured in `state`.
    pub fn for_state(state: &WorkflowState) -> Result<Self, StageError> {
        let llm = LlmGateway::from_settings(&state.config.llm, &state.transcript_path(), &state.calls).map_err(StageError::from)?;
        let prompts = PromptSet::load(state.config.prompt_dir.as_deref()).map_err(StageError::from)?;
        Ok(StageServices { llm, prompts })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    /// Repeating the stage may succeed.
    Recoverable,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageError {
    pub severity: Severity,
    pub message: String,
}

impl StageError {
    pub fn recoverable(message: impl Into<String>) -> Self {
        StageError { severity: Severity::Recoverable, message: message.into() }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        StageError { severity: Severity::Fatal, message: message.into() }
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for StageError {}

impl From<LlmError> for StageError {
    fn from(e: LlmError) -> Self {
        if e.is_transient() {
            StageError::recoverable(e.to_string())
        } else {
            StageError::fatal(e.to_string())
        }
    }
}

impl From<PromptError> for StageError {
    fn from(e: PromptError) -> Self {
        StageError::fatal(e.to_string())
    }
}

impl From<StateError> for StageError {
    fn from(e: StateError) -> Self {
        StageError::fatal(e.to_string())
    }
}

impl From<std::io::Error> for StageError {
    fn from(e: std::io::Error) -> Self {
        StageError::fatal(format!("io: {e}"))
    }
}

/// Artifact kinds each stage is allowed to read.
pub fn declared_inputs(stage: StageId) -> BTreeSet<ArtifactKind> {
    use ArtifactKind::*;
    let kinds: &[ArtifactKind] = match stage {
        StageId::Understand => &[],
        StageId::Requirements => &[Dossier],
        StageId::Plan => &[Requirements, TestPlan, AnalysisPlan],
        StageId::GenerateCode => &[Dossier, TestPlan, TestFile, AnalysisPlan, RunArtifacts],
        StageId::Execute => &[TestFile],
        StageId::Analyze => &[ExecutionReport, RunArtifacts, TestFile, TestPlan],
        StageId::Report => &[ExecutionReport, AnalysisPlan, TestPlan, TestFile],
    };
    kinds.iter().copied().collect()
}

/// What a completed stage hands back to the orchestrator.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub note: String,
    /// Set by Analyze: the plan the transition rules consume.
    pub plan: Option<AnalysisPlan>,
}

impl StageOutput {
    fn note(note: impl Into<String>) -> Self {
        StageOutput { note: note.into(), plan: None }
    }
}

#[derive(Debug, Clone)]
pub struct PendingWrite {
    pub kind: ArtifactKind,
    pub rel: PathBuf,
    pub bytes: Vec<u8>,
}

pub struct StageCtx<'a> {
    pub state: &'a mut WorkflowState,
    pub services: &'a StageServices,
    /// Transition that brought the workflow into this stage.
    pub entry: Option<(StageId, Transition)>,
    stage: StageId,
    reads: BTreeSet<ArtifactKind>,
    pending: Vec<PendingWrite>,
}

impl<'a> StageCtx<'a> {
    pub fn new(state: &'a mut WorkflowState, services: &'a StageServices, stage: StageId) -> Self {
        let entry = entry_transition(state);
        StageCtx { state, services, entry, stage, reads: BTreeSet::new(), pending: Vec::new() }
    }

    pub fn reads(&self) -> &BTreeSet<ArtifactKind> {
        &self.reads
    }

    pub fn into_pending(self) -> (BTreeSet<ArtifactKind>, Vec<PendingWrite>) {
        (self.reads, self.pending)
    }

    fn load(&self, r: &ArtifactRef) -> Result<Vec<u8>, StageError> {
        let bytes = std::fs::read(self.state.abs(&r.path)).map_err(|e| StageError::fatal(format!("reading {} artifact {}: {e}", r.kind, r.path.display())))?;
        if crate::state::sha256_hex(&bytes) != r.content_hash {
            return Err(StageError::fatal(format!("integrity error in {} artifact {}: hash mismatch", r.kind, r.path.display())));
        }
        Ok(bytes)
    }

    /// Latest version of `kind`, including one staged by this stage.
    pub fn read(&mut self, kind: ArtifactKind) -> Result<Option<Vec<u8>>, StageError> {
        self.reads.insert(kind);
        if let Some(p) = self.pending.iter().rev().find(|p| p.kind == kind) {
            return Ok(Some(p.bytes.clone()));
        }
        match self.state.artifacts.get(&kind).cloned() {
            Some(r) => self.load(&r).map(Some),
            None => Ok(None),
        }
    }

    pub fn read_text(&mut self, kind: ArtifactKind) -> Result<Option<String>, StageError> {
        Ok(self.read(kind)?.map(|b| String::from_utf8_lossy(&b).into_owned()))
    }

    pub fn require_text(&mut self, kind: ArtifactKind) -> Result<String, StageError> {
        self.read_text(kind)?.ok_or_else(|| StageError::fatal(format!("{} stage needs a {kind} artifact", self.stage)))
    }

    pub fn require_json<T: serde::de::DeserializeOwned>(&mut self, kind: ArtifactKind) -> Result<T, StageError> {
        let text = self.require_text(kind)?;
        serde_json::from_str(&text).map_err(|e| StageError::fatal(format!("stored {kind} artifact is malformed: {e}")))
    }

    /// Every recorded version of `kind`, ordered by iteration.
    pub fn read_all(&mut self, kind: ArtifactKind) -> Result<Vec<(u32, Vec<u8>)>, StageError> {
        self.reads.insert(kind);
        let mut refs: Vec<ArtifactRef> = self.state.all_artifacts().filter(|r| r.kind == kind).cloned().collect();
        refs.sort_by_key(|r| r.produced_at_iteration);
        refs.iter().map(|r| Ok((r.produced_at_iteration, self.load(r)?))).collect()
    }

    /// Reference of the latest `kind` without reading its content.
    pub fn peek_ref(&mut self, kind: ArtifactKind) -> Option<ArtifactRef> {
        self.reads.insert(kind);
        self.state.artifacts.get(&kind).cloned()
    }

    pub fn read_test_file(&mut self) -> Result<Option<BlockedTestFile>, StageError> {
        match self.read_text(ArtifactKind::TestFile)? {
            Some(text) => parse_blocks(&text).map(Some).map_err(|e| StageError::fatal(format!("stored test file does not parse: {e}"))),
            None => Ok(None),
        }
    }

    pub fn stage_write(&mut self, kind: ArtifactKind, rel: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.pending.push(PendingWrite { kind, rel: rel.into(), bytes: bytes.into() });
    }

    /// Renders `template`, calls the model and feeds the answer to `accept`.
    /// A rejected answer is re-requested with the rejection appended, at most
    /// `retries` more times.
    pub fn ask<T>(&mut self, template: &str, vars: &BTreeMap<&str, String>, retries: u32, mut accept: impl FnMut(&str) -> Result<T, String>) -> Result<Result<T, String>, StageError> {
        let (system_text, user) = self.services.prompts.render(template, vars)?;
        let mut user_text = user.clone();
        let mut last = String::new();
        for _ in 0..=retries {
            let text = self.complete(&system_text, &user_text)?;
            match accept(&text) {
                Ok(v) => return Ok(Ok(v)),
                Err(e) => {
                    user_text = format!("{user}\n\nYour previous answer was rejected: {e}\nAnswer again in the required format.");
                    last = e;
                }
            }
        }
        Ok(Err(last))
    }

    /// Like [`ask`](Self::ask) but a final rejection is a recoverable stage error.
    pub fn ask_valid<T>(&mut self, template: &str, vars: &BTreeMap<&str, String>, accept: impl FnMut(&str) -> Result<T, String>) -> Result<T, StageError> {
        self.ask(template, vars, MAX_FORMAT_RETRIES, accept)?
            .map_err(|e| StageError::recoverable(format!("model output rejected after {} attempts: {e}", MAX_FORMAT_RETRIES + 1)))
    }

    pub fn complete(&mut self, system_text: &str, user_text: &str) -> Result<String, StageError> {
        let request = LlmRequest {
            stage: self.stage,
            iteration: self.state.iteration,
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            max_output_chars: self.state.config.llm.max_output_chars,
        };
        Ok(self.services.llm.complete(&request, &mut self.state.calls)?)
    }
}

/// The last non-Repeat event: the transition that led to the current stage.
pub fn entry_transition(state: &WorkflowState) -> Option<(StageId, Transition)> {
    state.history.iter().rev().find(|e| !matches!(e.transition, Transition::Repeat { .. })).map(|e| (e.stage, e.transition.clone()))
}

pub fn dispatch(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    match ctx.stage {
        StageId::Understand => understand::run(ctx),
        StageId::Requirements => requirements::run(ctx),
        StageId::Plan => plan::run(ctx),
        StageId::GenerateCode => codegen::run(ctx),
        StageId::Execute => execute::run(ctx),
        StageId::Analyze => analyze::run(ctx),
        StageId::Report => report::run(ctx),
    }
}

pub(crate) fn artifact_err(e: ArtifactError) -> String {
    e.to_string()
}

/// Code from a model answer: the first fenced block if any, else the text.
pub fn extract_code(text: &str) -> String {
    if let Some(open) = text.find("```") {
        let after = &text[open + 3..];
        let start = after.find('\n').map_or(after.len(), |i| i + 1);
        if let Some(close) = after[start..].find("```") {
            return after[start..start + close].trim_end_matches('\n').to_string();
        }
    }
    text.trim_matches('\n').to_string()
}

/// The body of one block from a model answer; tolerates the answer
/// wrapping the body in that block's own sentinels.
pub fn extract_block_body(text: &str, block_id: &str) -> Result<String, String> {
    let code = extract_code(text);
    let begin = format!("{BEGIN_PREFIX}{block_id}");
    let body = match code.split('\n').position(|l| l == begin) {
        Some(pos) => {
            let lines: Vec<&str> = code.split('\n').collect();
            let end = lines.iter().skip(pos + 1).position(|l| l.starts_with(crate::blocks::END_PREFIX)).ok_or_else(|| format!("{block_id} is never closed"))?;
            lines[pos + 1..pos + 1 + end].join("\n")
        }
        None => code,
    };
    if body.trim().is_empty() {
        return Err(format!("empty body for {block_id}"));
    }
    if body.split('\n').any(|l| l.starts_with(BEGIN_PREFIX) || l.starts_with(crate::blocks::END_PREFIX)) {
        return Err(format!("answer for {block_id} contains other blocks; return only its body"));
    }
    Ok(body)
}
