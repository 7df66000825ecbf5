//! The supervisory loop: runs stages, commits their outputs, applies the
//! transition rules and persists state at every stage boundary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::artifacts::{AnalysisPlan, FunctionDossier, RequirementSet, TestPlan};
use crate::blocks::parse_blocks;
use crate::executor::ExecutionReport;
use crate::stage::{StageId, Transition};
use crate::stages::{dispatch, final_status, PendingWrite, Severity, StageCtx, StageServices};
use crate::state::{save_state, ArtifactKind, StateError, Status, WorkflowState};

pub const BUDGET_EXHAUSTED: &str = "budget exhausted";
pub const WALL_CLOCK_LIMIT: &str = "wall clock limit";
pub const STAGE_RETRY_LIMIT: &str = "stage retry limit";
pub const STAGE_ERROR: &str = "stage error";
pub const ABORTED_AT_CHECKPOINT: &str = "aborted at checkpoint";
pub const STOP_RECOMMENDED: &str = "stop recommended";

/// Error types that point at the plan (fixtures, imports, setup) rather
/// than at one test's code.
fn is_plan_level_error(error_type: &str) -> bool {
    error_type.ends_with("ImportError")
        || matches!(error_type, "ModuleNotFoundError" | "CollectionError" | "FixtureLookupError" | "SetupError")
}

/// True when the analysis calls for re-planning: nothing was collected, or
/// at least half of the failures are plan-level.
pub fn is_plan_level(plan: &AnalysisPlan) -> bool {
    if plan.collection_errors {
        return true;
    }
    let n = plan.failures.len();
    let plan_level = plan.failures.iter().filter(|f| f.is_plan_defect() || is_plan_level_error(&f.error_type)).count();
    n > 0 && 2 * plan_level >= n
}

/// Transition out of a successfully completed stage. `latest` is the plan
/// Analyze just produced; it is `None` for every other stage.
pub fn decide_transition(state: &WorkflowState, latest: Option<&AnalysisPlan>) -> Transition {
    let Some(plan) = latest else {
        return Transition::Proceed;
    };
    if plan.stop_recommended {
        let reason = plan.stop_reason.trim();
        return Transition::stop(if reason.is_empty() { STOP_RECOMMENDED } else { reason });
    }
    if plan.is_converged() {
        return Transition::Proceed;
    }
    if state.iteration >= state.config.budget.max_iterations {
        return Transition::stop(BUDGET_EXHAUSTED);
    }
    if is_plan_level(plan) {
        Transition::Backtrack { target: StageId::Plan }
    } else {
        Transition::Backtrack { target: StageId::GenerateCode }
    }
}

/// Consecutive Repeat events for `stage` at the end of the history.
pub fn trailing_repeats(state: &WorkflowState, stage: StageId) -> u32 {
    state.history.iter().rev().take_while(|e| e.stage == stage && matches!(e.transition, Transition::Repeat { .. })).count() as u32
}

/// The artifact a stage presents for review at a checkpoint.
pub fn primary_output(stage: StageId) -> ArtifactKind {
    match stage {
        StageId::Understand => ArtifactKind::Dossier,
        StageId::Requirements => ArtifactKind::Requirements,
        StageId::Plan => ArtifactKind::TestPlan,
        StageId::GenerateCode => ArtifactKind::TestFile,
        StageId::Execute => ArtifactKind::ExecutionReport,
        StageId::Analyze => ArtifactKind::AnalysisPlan,
        StageId::Report => ArtifactKind::FinalReport,
    }
}

fn read_latest(state: &WorkflowState, kind: ArtifactKind) -> Result<Option<String>, String> {
    match state.artifacts.get(&kind) {
        Some(r) => std::fs::read_to_string(state.abs(&r.path)).map(Some).map_err(|e| format!("reading {kind}: {e}")),
        None => Ok(None),
    }
}

fn require_latest<T: serde::de::DeserializeOwned>(state: &WorkflowState, kind: ArtifactKind) -> Result<T, String> {
    let text = read_latest(state, kind)?.ok_or_else(|| format!("no {kind} artifact"))?;
    serde_json::from_str(&text).map_err(|e| format!("{kind}: {e}"))
}

/// Latest analysis plan on disk, if any.
pub fn latest_plan(state: &WorkflowState) -> Option<AnalysisPlan> {
    require_latest(state, ArtifactKind::AnalysisPlan).ok()
}

/// Re-validates the latest `kind` artifact after a manual edit.
pub fn validate_artifact(state: &WorkflowState, kind: ArtifactKind) -> Result<(), String> {
    match kind {
        ArtifactKind::Dossier => {
            let text = read_latest(state, kind)?.ok_or("no dossier")?;
            FunctionDossier::from_markdown(&text).and_then(|d| d.validate(state.config.context_chars)).map_err(|e| e.to_string())
        }
        ArtifactKind::Requirements => require_latest::<RequirementSet>(state, kind)?.validate().map_err(|e| e.to_string()),
        ArtifactKind::TestPlan => {
            let reqs: RequirementSet = require_latest(state, ArtifactKind::Requirements)?;
            require_latest::<TestPlan>(state, kind)?.validate(&reqs).map_err(|e| e.to_string())
        }
        ArtifactKind::TestFile => {
            let text = read_latest(state, kind)?.ok_or("no test file")?;
            parse_blocks(&text).map(|_| ()).map_err(|e| e.to_string())
        }
        ArtifactKind::AnalysisPlan => {
            let report: ExecutionReport = require_latest(state, ArtifactKind::ExecutionReport)?;
            let text = read_latest(state, ArtifactKind::TestFile)?.ok_or("no test file")?;
            let ids: BTreeSet<String> = parse_blocks(&text).map_err(|e| e.to_string())?.ids().map(str::to_string).collect();
            require_latest::<AnalysisPlan>(state, kind)?.validate(&report, &ids).map_err(|e| e.to_string())
        }
        ArtifactKind::ExecutionReport => require_latest::<ExecutionReport>(state, kind).map(|_| ()),
        ArtifactKind::RunArtifacts | ArtifactKind::FinalReport => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Halt,
}

/// Where a run stopped on an observer's request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltPoint {
    /// The stage ran but nothing of it was persisted.
    BeforePersist(StageId),
    /// The stage's outputs and transition are persisted.
    AfterPersist(StageId),
}

/// Hooks at each stage boundary; used for fault injection and inspection.
pub trait RunObserver {
    fn before_persist(&mut self, _stage: StageId, _state: &WorkflowState, _reads: &BTreeSet<ArtifactKind>) -> Flow {
        Flow::Continue
    }

    fn after_persist(&mut self, _stage: StageId, _state: &WorkflowState) -> Flow {
        Flow::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointChoice {
    Approve,
    Edit,
    Abort,
}

/// Human review of a stage's output.
pub trait CheckpointIo {
    /// `problem` is set when a previous edit failed validation.
    fn choose(&mut self, stage: StageId, artifact: &Path, problem: Option<&str>) -> std::io::Result<CheckpointChoice>;
    fn edit(&mut self, artifact: &Path) -> std::io::Result<()>;
}

pub enum CheckpointMode<'a> {
    /// Checkpoints are approved without asking.
    Auto,
    Interactive(&'a mut dyn CheckpointIo),
}

pub struct RunOptions<'a> {
    pub checkpoints: CheckpointMode<'a>,
    pub observer: Option<&'a mut dyn RunObserver>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions { checkpoints: CheckpointMode::Auto, observer: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub status: Status,
    /// Absolute path of the final report, when one was written.
    pub report: Option<PathBuf>,
    pub halted: Option<HaltPoint>,
    /// Message of the stage error that failed the run.
    pub error: Option<String>,
}

enum Gate {
    Approved { edited: bool },
    Aborted,
}

fn checkpoint_gate(state: &mut WorkflowState, stage: StageId, io: &mut dyn CheckpointIo) -> Result<Gate, StateError> {
    let kind = primary_output(stage);
    let Some(r) = state.artifacts.get(&kind).cloned() else {
        return Ok(Gate::Approved { edited: false });
    };
    let path = state.abs(&r.path);
    let mut edited = false;
    let mut problem: Option<String> = None;
    loop {
        match io.choose(stage, &path, problem.as_deref())? {
            CheckpointChoice::Approve if problem.is_none() => return Ok(Gate::Approved { edited }),
            CheckpointChoice::Approve => {}
            CheckpointChoice::Abort => return Ok(Gate::Aborted),
            CheckpointChoice::Edit => {
                io.edit(&path)?;
                edited = true;
                state.rehash(kind)?;
                problem = validate_artifact(state, kind).err();
                save_state(state)?;
            }
        }
    }
}

struct Runner<'s, 'o> {
    services: &'s StageServices,
    opts: RunOptions<'o>,
    clock: Instant,
}

impl Runner<'_, '_> {
    fn tick(&mut self, state: &mut WorkflowState) {
        state.active_ms += self.clock.elapsed().as_millis() as u64;
        self.clock = Instant::now();
    }

    fn save(&mut self, state: &mut WorkflowState) -> Result<(), StateError> {
        self.tick(state);
        save_state(state)
    }

    fn over_wall_clock(&self, state: &WorkflowState) -> bool {
        state.config.budget.wall_clock_limit_secs.is_some_and(|limit| state.active_ms + self.clock.elapsed().as_millis() as u64 >= limit * 1000)
    }

    fn outcome(&self, state: &WorkflowState, halted: Option<HaltPoint>, error: Option<String>) -> RunOutcome {
        let report = state.artifacts.get(&ArtifactKind::FinalReport).filter(|_| state.status.is_terminal()).map(|r| state.abs(&r.path));
        RunOutcome { status: state.status, report, halted, error }
    }

    fn fail(&mut self, state: &mut WorkflowState, stage: StageId, reason: &str, note: String) -> Result<RunOutcome, StateError> {
        state.push_event(stage, Transition::stop(reason), note.clone())?;
        state.status = Status::Failed;
        self.save(state)?;
        Ok(self.outcome(state, None, Some(note)))
    }

    fn run(&mut self, state: &mut WorkflowState) -> Result<RunOutcome, StateError> {
        if state.status.is_terminal() {
            return Err(StateError::Finished(state.status));
        }
        if state.status == Status::AwaitingCheckpoint {
            let stage = state.current_stage;
            let note = state.checkpoint_note.clone().unwrap_or_default();
            if let Some(done) = self.review_and_record(state, stage, note)? {
                return Ok(done);
            }
        }
        state.status = Status::Running;
        loop {
            let stage = state.current_stage;
            let mut ctx = StageCtx::new(state, self.services, stage);
            let result = dispatch(&mut ctx);
            let (reads, pending) = ctx.into_pending();

            let output = match result {
                Ok(out) => out,
                Err(e) if e.severity == Severity::Fatal => {
                    if let Some(h) = self.before_persist(stage, state, &reads) {
                        return Ok(self.outcome(state, Some(h), None));
                    }
                    return self.fail(state, stage, STAGE_ERROR, e.message);
                }
                Err(e) => {
                    if let Some(h) = self.before_persist(stage, state, &reads) {
                        return Ok(self.outcome(state, Some(h), None));
                    }
                    let transition = if trailing_repeats(state, stage) < state.config.budget.max_stage_retries {
                        Transition::Repeat { target: stage }
                    } else {
                        Transition::stop(STAGE_RETRY_LIMIT)
                    };
                    if let Some(done) = self.record(state, stage, transition, e.message)? {
                        return Ok(done);
                    }
                    continue;
                }
            };

            if let Some(h) = self.before_persist(stage, state, &reads) {
                return Ok(self.outcome(state, Some(h), None));
            }
            flush(state, pending)?;
            let interactive = matches!(self.opts.checkpoints, CheckpointMode::Interactive(_));
            if interactive && state.config.checkpoint_stages.contains(&stage) && stage != StageId::Report {
                state.status = Status::AwaitingCheckpoint;
                state.checkpoint_note = Some(output.note.clone());
                self.save(state)?;
            }
            if let Some(done) = self.review_and_record(state, stage, output.note)? {
                return Ok(done);
            }
        }
    }

    fn before_persist(&mut self, stage: StageId, state: &WorkflowState, reads: &BTreeSet<ArtifactKind>) -> Option<HaltPoint> {
        let obs = self.opts.observer.as_deref_mut()?;
        (obs.before_persist(stage, state, reads) == Flow::Halt).then_some(HaltPoint::BeforePersist(stage))
    }

    /// Runs a pending checkpoint, then records the stage's transition.
    fn review_and_record(&mut self, state: &mut WorkflowState, stage: StageId, mut note: String) -> Result<Option<RunOutcome>, StateError> {
        if state.status == Status::AwaitingCheckpoint {
            if let CheckpointMode::Interactive(io) = &mut self.opts.checkpoints {
                match checkpoint_gate(state, stage, *io)? {
                    Gate::Aborted => {
                        state.checkpoint_note = None;
                        state.push_event(stage, Transition::stop(ABORTED_AT_CHECKPOINT), note)?;
                        state.status = Status::Aborted;
                        self.save(state)?;
                        return Ok(Some(self.outcome(state, None, None)));
                    }
                    Gate::Approved { edited: true } => note.push_str(" (edited at checkpoint)"),
                    Gate::Approved { edited: false } => {}
                }
            }
            state.checkpoint_note = None;
            state.status = Status::Running;
        }
        let plan = if stage == StageId::Analyze { latest_plan(state) } else { None };
        if stage == StageId::Analyze && plan.is_none() {
            return self.fail(state, stage, STAGE_ERROR, "analysis plan missing after Analyze".into()).map(Some);
        }
        let mut transition = decide_transition(state, plan.as_ref());
        if stage != StageId::Report && !matches!(transition, Transition::Stop { .. }) && self.over_wall_clock(state) {
            transition = Transition::stop(WALL_CLOCK_LIMIT);
        }
        self.record(state, stage, transition, note)
    }

    /// Appends the event, moves to the next stage and persists. Returns an
    /// outcome when the run ends here.
    fn record(&mut self, state: &mut WorkflowState, stage: StageId, transition: Transition, note: String) -> Result<Option<RunOutcome>, StateError> {
        if stage == StageId::Report {
            let status = match &transition {
                Transition::Stop { reason } if reason == STAGE_RETRY_LIMIT => Status::Failed,
                _ => final_status(state, latest_plan(state).as_ref()),
            };
            state.push_event(stage, Transition::stop(status.as_str()), note)?;
            state.status = status;
            self.save(state)?;
            return Ok(Some(self.after_persist(stage, state).unwrap_or_else(|| self.outcome(state, None, None))));
        }
        if matches!(transition, Transition::Stop { .. }) && state.iteration == 0 {
            // nothing was executed, so there is nothing to report
            let Transition::Stop { reason } = transition else { unreachable!() };
            return self.fail(state, stage, &reason, note).map(Some);
        }
        let target = transition.target(stage).expect("only Report has no successor");
        state.push_event(stage, transition, note)?;
        state.current_stage = target;
        self.save(state)?;
        Ok(self.after_persist(stage, state))
    }

    fn after_persist(&mut self, stage: StageId, state: &WorkflowState) -> Option<RunOutcome> {
        let obs = self.opts.observer.as_deref_mut()?;
        (obs.after_persist(stage, state) == Flow::Halt).then(|| self.outcome(state, Some(HaltPoint::AfterPersist(stage)), None))
    }
}

fn flush(state: &mut WorkflowState, pending: Vec<PendingWrite>) -> Result<(), StateError> {
    for p in pending {
        state.write_artifact(p.kind, p.rel, &p.bytes)?;
    }
    Ok(())
}

/// Runs the workflow from its current stage until it finishes, fails, or an
/// observer halts it. The caller holds the workspace lock.
pub fn run_workflow(state: &mut WorkflowState, services: &StageServices, opts: RunOptions<'_>) -> Result<RunOutcome, StateError> {
    Runner { services, opts, clock: Instant::now() }.run(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::{FailureDirective, PlanStatus, RepairAction};

    fn plan(failures: Vec<(&str, &str)>, deferred: Vec<&str>) -> AnalysisPlan {
        let failed = failures.len() as u32;
        AnalysisPlan {
            status: PlanStatus::from_counts(3, failed, 0, false),
            passed: 3,
            failed,
            errors: 0,
            collection_errors: false,
            block_limit: 3,
            failures: failures
                .into_iter()
                .enumerate()
                .map(|(i, (ty, note))| FailureDirective {
                    test: format!("t{i}"),
                    block_id: format!("CASE_{}", i + 1),
                    error_type: ty.into(),
                    action: RepairAction::RewriteBlock,
                    note: note.into(),
                })
                .collect(),
            deferred: deferred.into_iter().map(str::to_string).collect(),
            stop_recommended: false,
            stop_reason: String::new(),
        }
    }

    fn state(iteration: u32, max: u32) -> (tempfile::TempDir, WorkflowState) {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("m.py");
        std::fs::write(&src, "def f(x):\n    return x\n").unwrap();
        let target = crate::state::TargetRef { module_path: "m".into(), function_name: "f".into(), source_file: src };
        let mut cfg = crate::state::tests::fixture_config(dir.path());
        cfg.budget.max_iterations = max;
        let mut s = crate::state::init_workspace(&dir.path().join("ws"), target, cfg, false).unwrap();
        s.iteration = iteration;
        (dir, s)
    }

    #[test]
    fn non_analysis_stages_proceed() {
        let (_d, s) = state(0, 3);
        assert_eq!(decide_transition(&s, None), Transition::Proceed);
    }

    #[test]
    fn rule_order() {
        let (_d, s) = state(3, 3);
        // converged wins over an exhausted budget
        assert_eq!(decide_transition(&s, Some(&plan(vec![], vec![]))), Transition::Proceed);
        assert_eq!(decide_transition(&s, Some(&plan(vec![("AssertionError", "")], vec![]))), Transition::stop(BUDGET_EXHAUSTED));
        let mut stop = plan(vec![("AssertionError", "")], vec![]);
        stop.stop_recommended = true;
        stop.stop_reason = "flaky subject".into();
        assert_eq!(decide_transition(&s, Some(&stop)), Transition::stop("flaky subject"));

        let (_d, s) = state(1, 3);
        assert_eq!(decide_transition(&s, Some(&plan(vec![("AssertionError", "")], vec![]))), Transition::Backtrack { target: StageId::GenerateCode });
        assert_eq!(decide_transition(&s, Some(&plan(vec![], vec!["CASE_9"]))), Transition::Backtrack { target: StageId::GenerateCode });
        assert_eq!(decide_transition(&s, Some(&plan(vec![("ModuleNotFoundError", ""), ("AssertionError", "")], vec![]))), Transition::Backtrack { target: StageId::Plan });
        let mut coll = plan(vec![], vec![]);
        coll.collection_errors = true;
        assert_eq!(decide_transition(&s, Some(&coll)), Transition::Backtrack { target: StageId::Plan });
    }

    #[test]
    fn plan_level_threshold() {
        assert!(!is_plan_level(&plan(vec![("ImportError", ""), ("AssertionError", ""), ("TypeError", "")], vec![])));
        assert!(is_plan_level(&plan(vec![("AssertionError", "fixture wrong; plan_defect: true"), ("TypeError", "")], vec![])));
        assert!(is_plan_level(&plan(vec![("FixtureLookupError", "")], vec![])));
        assert!(!is_plan_level(&plan(vec![], vec![])));
    }

    #[test]
    fn repeats_are_counted_from_the_end() {
        let (_d, mut s) = state(0, 3);
        s.push_event(StageId::Understand, Transition::Repeat { target: StageId::Understand }, "x").unwrap();
        s.push_event(StageId::Understand, Transition::Repeat { target: StageId::Understand }, "x").unwrap();
        assert_eq!(trailing_repeats(&s, StageId::Understand), 2);
        s.push_event(StageId::Understand, Transition::Proceed, "").unwrap();
        assert_eq!(trailing_repeats(&s, StageId::Understand), 0);
    }
}
