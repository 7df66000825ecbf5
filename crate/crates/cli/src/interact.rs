//! Terminal checkpoint prompts and run progress output.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use attest_core::orchestrator::{CheckpointChoice, CheckpointIo, Flow, RunObserver};
use attest_core::stage::StageId;
use attest_core::state::{ArtifactKind, WorkflowState};

/// Prompts on stderr, reads answers line by line from `input`.
pub struct PromptCheckpoint<R: BufRead> {
    input: R,
}

impl<R: BufRead> PromptCheckpoint<R> {
    pub fn new(input: R) -> Self {
        PromptCheckpoint { input }
    }
}

pub fn parse_choice(answer: &str) -> Option<CheckpointChoice> {
    match answer.trim().to_ascii_lowercase().as_str() {
        "a" | "approve" | "y" | "yes" => Some(CheckpointChoice::Approve),
        "e" | "edit" => Some(CheckpointChoice::Edit),
        "b" | "abort" | "q" | "quit" => Some(CheckpointChoice::Abort),
        _ => None,
    }
}

impl<R: BufRead> CheckpointIo for PromptCheckpoint<R> {
    fn choose(&mut self, stage: StageId, artifact: &Path, problem: Option<&str>) -> io::Result<CheckpointChoice> {
        let mut err = io::stderr().lock();
        writeln!(err, "checkpoint after {stage}: review {}", artifact.display())?;
        if let Some(p) = problem {
            writeln!(err, "the edited artifact is invalid: {p}")?;
        }
        loop {
            write!(err, "[a]pprove, [e]dit, a[b]ort? ")?;
            err.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 {
                writeln!(err, "\nno answer on stdin; aborting")?;
                return Ok(CheckpointChoice::Abort);
            }
            match parse_choice(&line) {
                Some(c) => return Ok(c),
                None => writeln!(err, "unrecognized answer `{}`", line.trim())?,
            }
        }
    }

    fn edit(&mut self, artifact: &Path) -> io::Result<()> {
        let editor = std::env::var("VISUAL").ok().filter(|v| !v.trim().is_empty()).or_else(|| std::env::var("EDITOR").ok().filter(|v| !v.trim().is_empty()));
        let Some(editor) = editor else {
            return Err(io::Error::new(io::ErrorKind::NotFound, "set VISUAL or EDITOR to edit artifacts"));
        };
        let argv = shlex::split(&editor).filter(|a| !a.is_empty()).ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot parse editor command `{editor}`")))?;
        let status = Command::new(&argv[0]).args(&argv[1..]).arg(artifact).status()?;
        if !status.success() {
            return Err(io::Error::other(format!("editor exited with {status}")));
        }
        Ok(())
    }
}

/// `ATTEST_HALT_AFTER=<stage>[#n][:before]`: stop the process at the n-th
/// boundary of `stage` (default first), after or before persisting it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HaltSpec {
    pub stage: StageId,
    pub occurrence: u32,
    pub before: bool,
}

impl HaltSpec {
    pub fn parse(text: &str) -> Result<Self, String> {
        let (rest, before) = match text.trim().rsplit_once(':') {
            Some((r, "before")) => (r, true),
            Some((r, "after")) => (r, false),
            Some(_) => return Err(format!("bad halt point `{text}`")),
            None => (text.trim(), false),
        };
        let (stage, occurrence) = match rest.split_once('#') {
            Some((s, n)) => (s, n.parse().map_err(|_| format!("bad occurrence in `{text}`"))?),
            None => (rest, 1),
        };
        if occurrence == 0 {
            return Err(format!("occurrence in `{text}` must be positive"));
        }
        Ok(HaltSpec { stage: stage.parse()?, occurrence, before })
    }
}

/// Prints progress and new artifact paths; honours a halt point.
pub struct CliObserver {
    halt: Option<HaltSpec>,
    seen: BTreeSet<(ArtifactKind, PathBuf, String)>,
    boundaries: BTreeMap<StageId, u32>,
}

impl CliObserver {
    pub fn new(state: &WorkflowState, halt: Option<HaltSpec>) -> Self {
        let seen = state.all_artifacts().map(|r| (r.kind, r.path.clone(), r.content_hash.clone())).collect();
        CliObserver { halt, seen, boundaries: BTreeMap::new() }
    }

    fn halt_here(&self, stage: StageId, before: bool) -> bool {
        self.halt.as_ref().is_some_and(|h| h.stage == stage && h.before == before && self.boundaries.get(&stage) == Some(&h.occurrence))
    }
}

impl RunObserver for CliObserver {
    fn before_persist(&mut self, stage: StageId, _state: &WorkflowState, _reads: &BTreeSet<ArtifactKind>) -> Flow {
        *self.boundaries.entry(stage).or_default() += 1;
        if self.halt_here(stage, true) {
            Flow::Halt
        } else {
            Flow::Continue
        }
    }

    fn after_persist(&mut self, stage: StageId, state: &WorkflowState) -> Flow {
        if let Some(e) = state.history.last() {
            eprintln!("[{}] {} -> {}: {}", e.iteration, e.stage, e.transition, e.note);
        }
        for r in state.all_artifacts() {
            if self.seen.insert((r.kind, r.path.clone(), r.content_hash.clone())) {
                println!("artifact {}: {}", r.kind, state.abs(&r.path).display());
            }
        }
        if self.halt_here(stage, false) {
            Flow::Halt
        } else {
            Flow::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halt_spec_forms() {
        assert_eq!(HaltSpec::parse("Analyze").unwrap(), HaltSpec { stage: StageId::Analyze, occurrence: 1, before: false });
        assert_eq!(HaltSpec::parse("generate_code#3:before").unwrap(), HaltSpec { stage: StageId::GenerateCode, occurrence: 3, before: true });
        assert!(HaltSpec::parse("Nope").is_err());
        assert!(HaltSpec::parse("Plan#0").is_err());
        assert!(HaltSpec::parse("Plan:sideways").is_err());
    }

    #[test]
    fn prompt_reads_answers() {
        let mut io = PromptCheckpoint::new(io::Cursor::new("huh\napprove\n"));
        assert_eq!(io.choose(StageId::Plan, Path::new("x"), None).unwrap(), CheckpointChoice::Approve);
        assert_eq!(io.choose(StageId::Plan, Path::new("x"), None).unwrap(), CheckpointChoice::Abort);
    }
}
