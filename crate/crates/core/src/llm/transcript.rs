use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LlmRequest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: LlmRequest,
    pub response_text: String,
    pub latency_ms: u64,
}

/// Append-only JSON-lines transcript.
#[derive(Debug)]
pub struct Transcript {
    path: PathBuf,
    file: File,
}

impl Transcript {
    /// Opens `path` for appending, keeping only its first `keep` entries.
    pub fn open(path: &Path, keep: u64) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        if path.exists() {
            let text = fs::read_to_string(path)?;
            let kept: String = text.split_inclusive('\n').take(keep as usize).collect();
            if kept.len() != text.len() {
                fs::write(path, kept)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Transcript { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, entry: &TranscriptEntry) -> io::Result<()> {
        let mut line = serde_json::to_string(entry).map_err(io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

pub fn read_transcript(path: &Path) -> io::Result<Vec<TranscriptEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("transcript line {}: {e}", i + 1)))?;
        out.push(entry);
    }
    Ok(out)
}
