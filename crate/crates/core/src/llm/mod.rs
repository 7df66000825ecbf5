//! Provider-agnostic completion interface.
//!
//! Three backends sit behind [`Backend`]: a live chat-completion endpoint, a
//! scripted playbook of canned responses, and replay of a recorded
//! transcript. Every call, whatever the backend, is appended to the
//! workspace transcript.

mod live;
mod replay;
mod scripted;
mod transcript;

use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{LlmBackendConfig, LlmSettings};
use crate::stage::StageId;
use crate::state::CallLedger;

pub use live::{LiveBackend, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};
pub use replay::ReplayBackend;
pub use scripted::{PlaybookManifest, ScriptedBackend};
pub use transcript::{read_transcript, Transcript, TranscriptEntry};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub stage: StageId,
    pub iteration: u32,
    pub system_text: String,
    pub user_text: String,
    pub max_output_chars: usize,
}

impl LlmRequest {
    pub fn key(&self) -> String {
        CallLedger::key(self.stage, self.iteration)
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("llm configuration: {0}")]
    Config(String),
    #[error("llm authentication failed: {0}")]
    Auth(String),
    #[error("llm transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("llm protocol: {0}")]
    Protocol(String),
    #[error("playbook exhausted: no response for {key} call {ordinal}")]
    PlaybookExhausted { key: String, ordinal: u32 },
    #[error("replay divergence at entry {index}: expected {expected}, got {actual}")]
    Divergence { index: u64, expected: String, actual: String },
    #[error("replay transcript exhausted after {0} entries")]
    Exhausted(u64),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transcript: {0}")]
    Io(#[from] std::io::Error),
}

impl LlmError {
    /// Whether repeating the stage could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transport { .. } | LlmError::Protocol(_))
    }
}

/// Position of a call within a run, used by deterministic backends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallSlot {
    /// Per-(stage, iteration) call ordinal.
    pub ordinal: u32,
    /// Zero-based index over every call of the run.
    pub seq: u64,
}

pub trait Backend: Send {
    fn complete(&mut self, request: &LlmRequest, slot: CallSlot) -> Result<String, LlmError>;
}

/// Backend driven by a closure; handy for tests.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: FnMut(&LlmRequest, CallSlot) -> Result<String, LlmError> + Send,
{
    fn complete(&mut self, request: &LlmRequest, slot: CallSlot) -> Result<String, LlmError> {
        (self.0)(request, slot)
    }
}

pub fn truncate_chars(text: String, max_chars: usize) -> String {
    match text.char_indices().nth(max_chars) {
        Some((byte, _)) => text[..byte].to_string(),
        None => text,
    }
}

pub struct LlmGateway {
    backend: Mutex<Box<dyn Backend>>,
    transcript: Mutex<Option<Transcript>>,
}

impl LlmGateway {
    pub fn new(backend: Box<dyn Backend>, transcript: Option<Transcript>) -> Self {
        LlmGateway { backend: Mutex::new(backend), transcript: Mutex::new(transcript) }
    }

    /// Builds the configured backend. The transcript at `transcript_path` is
    /// cut back to the calls already accounted for in `ledger`, so calls
    /// made after the last persisted state are re-issued on resume.
    pub fn from_settings(settings: &LlmSettings, transcript_path: &Path, ledger: &CallLedger) -> Result<Self, LlmError> {
        let backend: Box<dyn Backend> = match &settings.backend {
            LlmBackendConfig::Live => Box::new(LiveBackend::from_env(settings.temperature)?),
            LlmBackendConfig::Scripted { path } => Box::new(ScriptedBackend::open(path)?),
            LlmBackendConfig::Replay { path } => Box::new(ReplayBackend::open(path)?),
        };
        let transcript = Transcript::open(transcript_path, ledger.total)?;
        Ok(Self::new(backend, Some(transcript)))
    }

    pub fn complete(&self, request: &LlmRequest, ledger: &mut CallLedger) -> Result<String, LlmError> {
        if request.system_text.trim().is_empty() || request.user_text.trim().is_empty() {
            return Err(LlmError::InvalidRequest("prompt texts must be non-empty".into()));
        }
        if request.max_output_chars == 0 {
            return Err(LlmError::InvalidRequest("max_output_chars must be positive".into()));
        }
        let slot = CallSlot { ordinal: ledger.next_ordinal(request.stage, request.iteration), seq: ledger.total };
        let started = Instant::now();
        let text = self.backend.lock().unwrap_or_else(|e| e.into_inner()).complete(request, slot)?;
        let text = truncate_chars(text, request.max_output_chars);
        let latency_ms = started.elapsed().as_millis() as u64;
        ledger.record(request.stage, request.iteration);
        if let Some(t) = self.transcript.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            t.append(&TranscriptEntry { request: request.clone(), response_text: text.clone(), latency_ms })?;
        }
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(stage: StageId, iteration: u32, max: usize) -> LlmRequest {
        LlmRequest { stage, iteration, system_text: "sys".into(), user_text: "user".into(), max_output_chars: max }
    }

    #[test]
    fn gateway_truncates_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let gw = LlmGateway::new(Box::new(FnBackend(|_: &LlmRequest, s: CallSlot| Ok(format!("héllo world {}", s.ordinal)))), Some(Transcript::open(&path, 0).unwrap()));
        let mut ledger = CallLedger::default();
        assert_eq!(gw.complete(&req(StageId::Plan, 0, 5), &mut ledger).unwrap(), "héllo");
        assert_eq!(gw.complete(&req(StageId::Plan, 0, 100), &mut ledger).unwrap(), "héllo world 1");
        assert_eq!(ledger.total, 2);
        let entries = read_transcript(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].response_text, "héllo");
    }

    #[test]
    fn empty_prompt_rejected() {
        let gw = LlmGateway::new(Box::new(FnBackend(|_: &LlmRequest, _: CallSlot| Ok(String::new()))), None);
        let mut r = req(StageId::Plan, 0, 10);
        r.user_text = " ".into();
        assert!(matches!(gw.complete(&r, &mut CallLedger::default()), Err(LlmError::InvalidRequest(_))));
    }
}
