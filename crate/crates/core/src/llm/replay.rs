use std::path::Path;

use super::transcript::{read_transcript, TranscriptEntry};
use super::{Backend, CallSlot, LlmError, LlmRequest};

/// Serves responses from a recorded transcript, in order.
#[derive(Debug)]
pub struct ReplayBackend {
    entries: Vec<TranscriptEntry>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let entries = read_transcript(path).map_err(|e| LlmError::Config(format!("replay transcript {}: {e}", path.display())))?;
        Ok(ReplayBackend { entries })
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        ReplayBackend { entries }
    }
}

impl Backend for ReplayBackend {
    fn complete(&mut self, request: &LlmRequest, slot: CallSlot) -> Result<String, LlmError> {
        let entry = self.entries.get(slot.seq as usize).ok_or(LlmError::Exhausted(self.entries.len() as u64))?;
        if entry.request.stage != request.stage || entry.request.iteration != request.iteration {
            return Err(LlmError::Divergence { index: slot.seq, expected: entry.request.key(), actual: request.key() });
        }
        Ok(entry.response_text.clone())
    }
}
