//! The unified workflow state file and workspace lifecycle.
//!
//! `state.json` is the single source of truth for a run. Artifacts live in
//! separate files referenced by workspace-relative path plus SHA-256, so
//! out-of-band edits are detected on load.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::os::unix::io::AsRawFd;
use std::path::{Component, Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ConfigSnapshot;
use crate::stage::{StageId, Transition};

pub const SCHEMA_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.json";
pub const LOCK_FILE: &str = ".lock";
pub const TRANSCRIPT_FILE: &str = "runs/llm_transcript.jsonl";
const LAYOUT_DIRS: [&str; 4] = ["artifacts", "tests", "runs", "reports"];

#[derive(Debug, Error)]
pub enum StateError {
    #[error("no workspace at {0}")]
    NoWorkspace(PathBuf),
    #[error("workspace exists at {0} (use --force to reinitialize)")]
    Exists(PathBuf),
    #[error("workspace not writable: {path}: {source}")]
    NotWritable { path: PathBuf, source: io::Error },
    #[error("target source not found: {0}")]
    TargetMissing(PathBuf),
    #[error("state file has newer schema version {found} (this build supports {SCHEMA_VERSION})")]
    NewerSchema { found: u64 },
    #[error("state file has unsupported schema version {0}")]
    UnsupportedSchema(u64),
    #[error("integrity error in {kind} artifact {path}: {detail}")]
    Integrity { kind: ArtifactKind, path: PathBuf, detail: String },
    #[error("workflow finished with status {0}")]
    Finished(Status),
    #[error("workspace {0} is locked by another process")]
    Locked(PathBuf),
    #[error("corrupt state file: {0}")]
    Corrupt(String),
    #[error("invalid state: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl StateError {
    /// Short machine-greppable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            StateError::NoWorkspace(_) => "no workspace",
            StateError::Exists(_) => "workspace exists",
            StateError::NotWritable { .. } => "workspace not writable",
            StateError::TargetMissing(_) => "target",
            StateError::NewerSchema { .. } | StateError::UnsupportedSchema(_) => "schema",
            StateError::Integrity { .. } => "integrity",
            StateError::Finished(_) => "workflow finished",
            StateError::Locked(_) => "locked",
            StateError::Corrupt(_) | StateError::Invalid(_) => "state",
            StateError::Io(_) => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRef {
    /// Dotted module path, e.g. `subjects.spectral`.
    pub module_path: String,
    pub function_name: String,
    pub source_file: PathBuf,
}

impl TargetRef {
    pub fn validate(&self) -> Result<(), StateError> {
        let ident = |s: &str| !s.is_empty() && !s.starts_with(|c: char| c.is_ascii_digit()) && s.chars().all(|c| c.is_alphanumeric() || c == '_');
        if !self.module_path.split('.').all(ident) {
            return Err(StateError::Invalid(format!("module path `{}` is not a dotted identifier", self.module_path)));
        }
        if !ident(&self.function_name) {
            return Err(StateError::Invalid(format!("function name `{}` is not an identifier", self.function_name)));
        }
        if !self.source_file.is_file() {
            return Err(StateError::TargetMissing(self.source_file.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    AwaitingCheckpoint,
    Converged,
    BudgetExhausted,
    Aborted,
    Failed,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Status::Running | Status::AwaitingCheckpoint)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Running => "running",
            Status::AwaitingCheckpoint => "awaiting_checkpoint",
            Status::Converged => "converged",
            Status::BudgetExhausted => "budget_exhausted",
            Status::Aborted => "aborted",
            Status::Failed => "failed",
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Dossier,
    Requirements,
    TestPlan,
    TestFile,
    RunArtifacts,
    ExecutionReport,
    AnalysisPlan,
    FinalReport,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 8] = [
        ArtifactKind::Dossier,
        ArtifactKind::Requirements,
        ArtifactKind::TestPlan,
        ArtifactKind::TestFile,
        ArtifactKind::RunArtifacts,
        ArtifactKind::ExecutionReport,
        ArtifactKind::AnalysisPlan,
        ArtifactKind::FinalReport,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Dossier => "dossier",
            ArtifactKind::Requirements => "requirements",
            ArtifactKind::TestPlan => "test_plan",
            ArtifactKind::TestFile => "test_file",
            ArtifactKind::RunArtifacts => "run_artifacts",
            ArtifactKind::ExecutionReport => "execution_report",
            ArtifactKind::AnalysisPlan => "analysis_plan",
            ArtifactKind::FinalReport => "final_report",
        }
    }

    /// Kinds produced once per iteration; older versions are kept.
    pub fn is_versioned(self) -> bool {
        matches!(self, ArtifactKind::RunArtifacts | ArtifactKind::ExecutionReport | ArtifactKind::AnalysisPlan)
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ArtifactKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown artifact kind `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    /// Relative to the workspace root.
    pub path: PathBuf,
    pub content_hash: String,
    pub produced_at_iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub stage: StageId,
    pub transition: Transition,
    pub note: String,
    /// Iteration counter at the time of the event.
    pub iteration: u32,
}

/// Count of model calls issued so far, so a resumed run continues the call
/// numbering (and the replay cursor) exactly where the interrupted run was.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallLedger {
    pub total: u64,
    pub per_key: BTreeMap<String, u32>,
}

impl CallLedger {
    pub fn key(stage: StageId, iteration: u32) -> String {
        format!("{}_{}", stage.slug(), iteration)
    }

    /// Ordinal the next call for `(stage, iteration)` will get.
    pub fn next_ordinal(&self, stage: StageId, iteration: u32) -> u32 {
        self.per_key.get(&Self::key(stage, iteration)).copied().unwrap_or(0)
    }

    pub fn record(&mut self, stage: StageId, iteration: u32) -> u32 {
        let slot = self.per_key.entry(Self::key(stage, iteration)).or_insert(0);
        let ordinal = *slot;
        *slot += 1;
        self.total += 1;
        ordinal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub schema_version: u32,
    pub workspace_root: PathBuf,
    pub target: TargetRef,
    pub config: ConfigSnapshot,
    pub current_stage: StageId,
    pub iteration: u32,
    pub status: Status,
    pub artifacts: BTreeMap<ArtifactKind, ArtifactRef>,
    /// Earlier versions of per-iteration artifacts, oldest first.
    #[serde(default)]
    pub artifact_archive: Vec<ArtifactRef>,
    pub history: Vec<HistoryEvent>,
    pub transcript_refs: Vec<PathBuf>,
    #[serde(default)]
    pub calls: CallLedger,
    /// Wall-clock time spent inside run loops, summed across resumes.
    #[serde(default)]
    pub active_ms: u64,
    /// Note of a stage whose outputs await checkpoint review.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_note: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rejects absolute paths and `..` components.
fn check_relative(path: &Path) -> Result<(), StateError> {
    if path.is_absolute() || path.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(StateError::Invalid(format!("artifact path {} escapes the workspace", path.display())));
    }
    Ok(())
}

impl WorkflowState {
    pub fn abs(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.workspace_root.join(rel)
    }

    pub fn state_path(&self) -> PathBuf {
        self.abs(STATE_FILE)
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.abs(TRANSCRIPT_FILE)
    }

    pub fn test_file_rel(&self) -> PathBuf {
        PathBuf::from("tests").join(format!("test_{}{}", self.target.function_name, self.config.test_file_suffix))
    }

    pub fn run_dir_rel(iteration: u32) -> PathBuf {
        PathBuf::from("runs").join(iteration.to_string())
    }

    /// All recorded references, archived ones first.
    pub fn all_artifacts(&self) -> impl Iterator<Item = &ArtifactRef> {
        self.artifact_archive.iter().chain(self.artifacts.values())
    }

    /// Reference for `kind` produced at `iteration` (latest or archived).
    pub fn artifact_at(&self, kind: ArtifactKind, iteration: u32) -> Option<&ArtifactRef> {
        self.all_artifacts().filter(|r| r.kind == kind && r.produced_at_iteration == iteration).last()
    }

    /// Writes `bytes` to `rel` atomically and records the reference.
    pub fn write_artifact(&mut self, kind: ArtifactKind, rel: impl Into<PathBuf>, bytes: &[u8]) -> Result<ArtifactRef, StateError> {
        let rel = rel.into();
        check_relative(&rel)?;
        let abs = self.abs(&rel);
        if let Some(parent) = abs.parent() {
            fs::create_dir_all(parent)?;
        }
        atomic_write(&FsSink, &abs, bytes)?;
        let r = ArtifactRef { kind, path: rel, content_hash: sha256_hex(bytes), produced_at_iteration: self.iteration };
        self.register(r.clone());
        Ok(r)
    }

    fn register(&mut self, r: ArtifactRef) {
        if let Some(old) = self.artifacts.insert(r.kind, r.clone()) {
            if r.kind.is_versioned() && old.path != r.path {
                self.artifact_archive.push(old);
            }
        }
    }

    /// Re-reads the file behind `kind` (after an external edit) and updates its hash.
    pub fn rehash(&mut self, kind: ArtifactKind) -> Result<(), StateError> {
        let root = self.workspace_root.clone();
        let r = self.artifacts.get_mut(&kind).ok_or_else(|| StateError::Invalid(format!("no {kind} artifact recorded")))?;
        r.content_hash = sha256_hex(&fs::read(root.join(&r.path))?);
        Ok(())
    }

    /// Verifies that every referenced artifact still matches its recorded hash.
    pub fn verify_artifacts(&self) -> Result<(), StateError> {
        for r in self.all_artifacts() {
            check_relative(&r.path).map_err(|e| StateError::Integrity { kind: r.kind, path: r.path.clone(), detail: e.to_string() })?;
            let bytes = fs::read(self.abs(&r.path)).map_err(|e| StateError::Integrity { kind: r.kind, path: r.path.clone(), detail: format!("unreadable: {e}") })?;
            let actual = sha256_hex(&bytes);
            if actual != r.content_hash {
                return Err(StateError::Integrity {
                    kind: r.kind,
                    path: r.path.clone(),
                    detail: format!("hash mismatch (recorded {}, found {})", &r.content_hash[..12.min(r.content_hash.len())], &actual[..12]),
                });
            }
        }
        Ok(())
    }

    /// Appends to history without persisting.
    pub fn push_event(&mut self, stage: StageId, transition: Transition, note: impl Into<String>) -> Result<&HistoryEvent, StateError> {
        if self.status.is_terminal() {
            return Err(StateError::Finished(self.status));
        }
        let seq = self.history.last().map_or(0, |e| e.seq + 1);
        self.history.push(HistoryEvent { seq, timestamp: Utc::now(), stage, transition, note: note.into(), iteration: self.iteration });
        Ok(self.history.last().unwrap())
    }

    /// Appends to history and persists the whole state.
    pub fn append_event(&mut self, stage: StageId, transition: Transition, note: impl Into<String>) -> Result<&HistoryEvent, StateError> {
        self.push_event(stage, transition, note)?;
        save_state(self)?;
        Ok(self.history.last().unwrap())
    }
}

/// The two filesystem steps of an atomic save, separable for fault injection.
pub trait StateSink {
    fn write_temp(&self, path: &Path, bytes: &[u8]) -> io::Result<()>;
    fn rename(&self, from: &Path, to: &Path) -> io::Result<()>;
}

pub struct FsSink;

impl StateSink for FsSink {
    fn write_temp(&self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        let mut f = File::create(path)?;
        f.write_all(bytes)?;
        f.sync_all()
    }

    fn rename(&self, from: &Path, to: &Path) -> io::Result<()> {
        fs::rename(from, to)
    }
}

pub fn atomic_write(sink: &dyn StateSink, path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = sink.write_temp(&tmp, bytes).and_then(|_| sink.rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn save_state(state: &WorkflowState) -> Result<(), StateError> {
    save_state_with(state, &FsSink)
}

pub fn save_state_with(state: &WorkflowState, sink: &dyn StateSink) -> Result<(), StateError> {
    let mut bytes = serde_json::to_vec_pretty(state).map_err(|e| StateError::Invalid(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(sink, &state.state_path(), &bytes)?;
    Ok(())
}

/// Loads without checking artifact hashes (for read-only views of a
/// possibly mid-write workspace).
pub fn load_state_unverified(root: &Path) -> Result<WorkflowState, StateError> {
    let path = root.join(STATE_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StateError::NoWorkspace(root.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| StateError::Corrupt(e.to_string()))?;
    let version = raw.get("schema_version").and_then(serde_json::Value::as_u64).ok_or_else(|| StateError::Corrupt("missing schema_version".into()))?;
    if version > u64::from(SCHEMA_VERSION) {
        return Err(StateError::NewerSchema { found: version });
    }
    if version != u64::from(SCHEMA_VERSION) {
        return Err(StateError::UnsupportedSchema(version));
    }
    let mut state: WorkflowState = serde_json::from_value(raw).map_err(|e| StateError::Corrupt(e.to_string()))?;
    state.workspace_root = fs::canonicalize(root)?;
    Ok(state)
}

pub fn load_state(root: &Path) -> Result<WorkflowState, StateError> {
    let state = load_state_unverified(root)?;
    state.verify_artifacts()?;
    Ok(state)
}

fn not_writable(path: &Path) -> impl FnOnce(io::Error) -> StateError + '_ {
    move |source| StateError::NotWritable { path: path.to_path_buf(), source }
}

/// Creates the workspace layout and the initial state file.
///
/// Everything is first built in a sibling staging directory and moved into
/// place at the end, so a failure leaves nothing behind in `root`.
pub fn init_workspace(root: &Path, target: TargetRef, config: ConfigSnapshot, force: bool) -> Result<WorkflowState, StateError> {
    target.validate()?;
    if root.join(STATE_FILE).exists() && !force {
        return Err(StateError::Exists(root.to_path_buf()));
    }
    if root.exists() && !root.is_dir() {
        return Err(StateError::NotWritable { path: root.to_path_buf(), source: io::Error::other("not a directory") });
    }
    let parent = match root.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "workspace".into());
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(not_writable(&staging))?;
    }
    let built = build_staging(&staging, root, target, config);
    let state = match built {
        Ok(s) => s,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let moved = (|| -> io::Result<()> {
        if !root.exists() {
            return fs::rename(&staging, root);
        }
        for entry in LAYOUT_DIRS.iter().chain([&STATE_FILE]) {
            let dst = root.join(entry);
            if dst.is_dir() {
                fs::remove_dir_all(&dst)?;
            }
        }
        for entry in fs::read_dir(&staging)? {
            let entry = entry?;
            fs::rename(entry.path(), root.join(entry.file_name()))?;
        }
        fs::remove_dir(&staging)
    })();
    if let Err(e) = moved {
        let _ = fs::remove_dir_all(&staging);
        return Err(StateError::NotWritable { path: root.to_path_buf(), source: e });
    }
    let mut state = state;
    state.workspace_root = fs::canonicalize(root)?;
    Ok(state)
}

fn build_staging(staging: &Path, root: &Path, target: TargetRef, config: ConfigSnapshot) -> Result<WorkflowState, StateError> {
    fs::create_dir_all(staging).map_err(not_writable(root))?;
    for d in LAYOUT_DIRS {
        fs::create_dir(staging.join(d)).map_err(not_writable(root))?;
    }
    let target = TargetRef { source_file: fs::canonicalize(&target.source_file)?, ..target };
    let state = WorkflowState {
        schema_version: SCHEMA_VERSION,
        workspace_root: staging.to_path_buf(),
        target,
        config,
        current_stage: StageId::Understand,
        iteration: 0,
        status: Status::Running,
        artifacts: BTreeMap::new(),
        artifact_archive: Vec::new(),
        history: Vec::new(),
        transcript_refs: vec![PathBuf::from(TRANSCRIPT_FILE)],
        calls: CallLedger::default(),
        active_ms: 0,
        checkpoint_note: None,
    };
    save_state(&state).map_err(|e| match e {
        StateError::Io(source) => StateError::NotWritable { path: root.to_path_buf(), source },
        other => other,
    })?;
    Ok(state)
}

/// Exclusive advisory lock on `<root>/.lock`, released on drop or process exit.
#[derive(Debug)]
pub struct WorkspaceLock {
    _file: File,
}

impl WorkspaceLock {
    pub fn acquire(root: &Path) -> Result<Self, StateError> {
        if !root.join(STATE_FILE).is_file() {
            return Err(StateError::NoWorkspace(root.to_path_buf()));
        }
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(root.join(LOCK_FILE))?;
        // SAFETY: flock on a file descriptor we own for the lifetime of `file`.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            let err = io::Error::last_os_error();
            return Err(if err.kind() == io::ErrorKind::WouldBlock { StateError::Locked(root.to_path_buf()) } else { err.into() });
        }
        Ok(WorkspaceLock { _file: file })
    }
}
