use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Backend, CallSlot, LlmError, LlmRequest};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookManifest {
    pub name: String,
    #[serde(default)]
    pub description: String,
}

/// Canned responses in `<stage>_<iteration>_<ordinal>.txt` files.
#[derive(Debug)]
pub struct ScriptedBackend {
    dir: PathBuf,
    pub manifest: PlaybookManifest,
}

impl ScriptedBackend {
    pub fn open(dir: &Path) -> Result<Self, LlmError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| LlmError::Config(format!("playbook manifest {}: {e}", manifest_path.display())))?;
        let manifest = serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("playbook manifest {}: {e}", manifest_path.display())))?;
        Ok(ScriptedBackend { dir: dir.to_path_buf(), manifest })
    }

    pub fn entry_path(&self, request: &LlmRequest, ordinal: u32) -> PathBuf {
        self.dir.join(format!("{}_{}_{}.txt", request.stage.slug(), request.iteration, ordinal))
    }
}

impl Backend for ScriptedBackend {
    fn complete(&mut self, request: &LlmRequest, slot: CallSlot) -> Result<String, LlmError> {
        let path = self.entry_path(request, slot.ordinal);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(LlmError::PlaybookExhausted { key: request.key(), ordinal: slot.ordinal }),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::StageId;

    #[test]
    fn lookup_by_stage_iteration_ordinal() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), r#"{"name":"t"}"#).unwrap();
        fs::write(dir.path().join("analyze_4_0.txt"), "plan").unwrap();
        let mut b = ScriptedBackend::open(dir.path()).unwrap();
        let req = LlmRequest { stage: StageId::Analyze, iteration: 4, system_text: "s".into(), user_text: "u".into(), max_output_chars: 10 };
        assert_eq!(b.complete(&req, CallSlot { ordinal: 0, seq: 0 }).unwrap(), "plan");
        let err = b.complete(&req, CallSlot { ordinal: 1, seq: 1 }).unwrap_err();
        assert!(err.to_string().contains("playbook exhausted"), "{err}");
    }

    #[test]
    fn manifest_required() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ScriptedBackend::open(dir.path()), Err(LlmError::Config(_))));
    }
}
