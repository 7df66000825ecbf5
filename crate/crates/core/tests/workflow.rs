mod common;

use std::collections::BTreeSet;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

use attest_core::llm::LlmError;
use attest_core::orchestrator::{run_workflow, CheckpointChoice, CheckpointIo, CheckpointMode, Flow, HaltPoint, RunObserver, RunOptions};
use attest_core::stage::{StageId, Transition};
use attest_core::stages::declared_inputs;
use attest_core::state::{load_state, ArtifactKind, Status, WorkflowState};
use common::*;

#[derive(Default)]
struct Recorder {
    reads: Vec<(StageId, BTreeSet<ArtifactKind>)>,
    halt_before: Option<StageId>,
    halt_after: Option<StageId>,
}

impl RunObserver for Recorder {
    fn before_persist(&mut self, stage: StageId, _state: &WorkflowState, reads: &BTreeSet<ArtifactKind>) -> Flow {
        self.reads.push((stage, reads.clone()));
        if self.halt_before == Some(stage) {
            Flow::Halt
        } else {
            Flow::Continue
        }
    }

    fn after_persist(&mut self, stage: StageId, _state: &WorkflowState) -> Flow {
        if self.halt_after == Some(stage) {
            Flow::Halt
        } else {
            Flow::Continue
        }
    }
}

fn stages_of(state: &WorkflowState) -> Vec<StageId> {
    state.history.iter().map(|e| e.stage).collect()
}

#[test]
fn repair_loop_converges_and_stages_read_only_declared_inputs() {
    let mut toy = toy("", "");
    let log = Arc::new(Mutex::new(Vec::new()));
    let services = services(log.clone(), |req, _| toy_answer(req));
    let mut rec = Recorder::default();
    let outcome = run_workflow(&mut toy.state, &services, RunOptions { checkpoints: CheckpointMode::Auto, observer: Some(&mut rec) }).unwrap();

    assert_eq!(outcome.status, Status::Converged);
    assert!(outcome.halted.is_none() && outcome.error.is_none());
    use StageId::*;
    assert_eq!(stages_of(&toy.state), [Understand, Requirements, Plan, GenerateCode, Execute, Analyze, GenerateCode, Execute, Analyze, Report]);
    assert_eq!(toy.state.iteration, 2);
    for (stage, reads) in &rec.reads {
        assert!(reads.is_subset(&declared_inputs(*stage)), "{stage} read {reads:?}");
    }
    // the repair touched CASE_2 only
    let file = read(&toy.root(), "tests/test_scale.py");
    assert!(file.contains("assert scale(2) == 4") && file.contains("assert scale(1) == 2") && !file.contains("FAILME"));
    // understand, requirements, plan, generate, analyze, repair; the clean run needs no model call
    assert_eq!(log.lock().unwrap().len(), 6);
    assert_eq!(toy.state.calls.total, 6);

    let report = read(&toy.root(), "reports/final_report.md");
    assert!(report.contains("- Status: converged"));
    assert!(report.contains("- Coverage trajectory: 50.00% -> 100.00%"));
    assert!(report.contains("TestToy.test_two"), "resolved failure listed");
    let reloaded = load_state(&toy.root()).unwrap();
    assert_eq!(reloaded.status, Status::Converged);
    assert_eq!(reloaded.history, toy.state.history);
}

#[test]
fn budget_exhaustion_stops_with_report() {
    let mut toy = toy("", "max_iterations = 1");
    let outcome = run_workflow(&mut toy.state, &toy_services(), RunOptions::default()).unwrap();
    assert_eq!(outcome.status, Status::BudgetExhausted);
    let last_analyze = toy.state.history.iter().rev().find(|e| e.stage == StageId::Analyze).unwrap();
    assert_eq!(last_analyze.transition, Transition::stop("budget exhausted"));
    let report = read(&toy.root(), "reports/final_report.md");
    assert!(report.contains("## Remaining failures\n\n- TestToy.test_two [CASE_2] ValueError"), "{report}");
}

#[test]
fn rejected_output_repeats_until_retry_limit() {
    let mut toy = toy("", "max_stage_retries = 2");
    let services = services(Arc::new(Mutex::new(Vec::new())), |req, _| match req.stage {
        StageId::Requirements => Ok("no json here".into()),
        _ => toy_answer(req),
    });
    let outcome = run_workflow(&mut toy.state, &services, RunOptions::default()).unwrap();
    assert_eq!(outcome.status, Status::Failed);
    assert!(outcome.report.is_none(), "nothing executed, nothing to report");
    let reqs: Vec<&Transition> = toy.state.history.iter().filter(|e| e.stage == StageId::Requirements).map(|e| &e.transition).collect();
    assert_eq!(reqs.len(), 3);
    assert!(matches!(reqs[0], Transition::Repeat { .. }) && matches!(reqs[1], Transition::Repeat { .. }));
    assert!(matches!(reqs[2], Transition::Stop { .. }));
    assert!(load_state(&toy.root()).unwrap().status.is_terminal());
}

#[test]
fn fatal_backend_error_fails_without_report() {
    let mut toy = toy("", "");
    let services = services(Arc::new(Mutex::new(Vec::new())), |req, _| match req.stage {
        StageId::Plan => Err(LlmError::Auth("401 from endpoint".into())),
        _ => toy_answer(req),
    });
    let outcome = run_workflow(&mut toy.state, &services, RunOptions::default()).unwrap();
    assert_eq!(outcome.status, Status::Failed);
    assert!(outcome.error.as_deref().unwrap().contains("401"));
    assert!(outcome.report.is_none());
    let last = toy.state.history.last().unwrap();
    assert_eq!((last.stage, &last.transition), (StageId::Plan, &Transition::stop("stage error")));
    // a finished workflow refuses to run again
    assert!(run_workflow(&mut toy.state, &toy_services(), RunOptions::default()).is_err());
}

#[test]
fn transient_errors_are_retried() {
    let mut toy = toy("", "");
    let mut failures_left = 2;
    let services = services(Arc::new(Mutex::new(Vec::new())), move |req, _| {
        if req.stage == StageId::Understand && failures_left > 0 {
            failures_left -= 1;
            return Err(LlmError::Transport { attempts: 3, message: "connection reset".into() });
        }
        toy_answer(req)
    });
    let outcome = run_workflow(&mut toy.state, &services, RunOptions::default()).unwrap();
    assert_eq!(outcome.status, Status::Converged);
    assert_eq!(toy.state.history.iter().filter(|e| matches!(e.transition, Transition::Repeat { .. })).count(), 2);
}

struct ScriptedReviewer {
    answers: Vec<CheckpointChoice>,
    seen: Vec<(StageId, bool)>,
    edit: fn(&Path),
}

impl CheckpointIo for ScriptedReviewer {
    fn choose(&mut self, stage: StageId, _artifact: &Path, problem: Option<&str>) -> io::Result<CheckpointChoice> {
        self.seen.push((stage, problem.is_some()));
        Ok(if self.answers.is_empty() { CheckpointChoice::Approve } else { self.answers.remove(0) })
    }

    fn edit(&mut self, artifact: &Path) -> io::Result<()> {
        (self.edit)(artifact);
        Ok(())
    }
}

#[test]
fn checkpoint_edit_is_validated_then_used() {
    let mut toy = toy("", "");
    let mut reviewer = ScriptedReviewer {
        answers: vec![CheckpointChoice::Edit, CheckpointChoice::Edit, CheckpointChoice::Approve],
        seen: Vec::new(),
        edit: |p| {
            let text = std::fs::read_to_string(p).unwrap();
            // first edit breaks the file, the second repairs it with new wording
            if text.contains("doubles") {
                std::fs::write(p, "{").unwrap();
            } else {
                std::fs::write(p, REQUIREMENTS.replace("doubles", "multiplies by two")).unwrap();
            }
        },
    };
    let outcome = run_workflow(&mut toy.state, &toy_services(), RunOptions { checkpoints: CheckpointMode::Interactive(&mut reviewer), observer: None }).unwrap();
    assert_eq!(outcome.status, Status::Converged);
    assert_eq!(reviewer.seen[..3], [(StageId::Requirements, false), (StageId::Requirements, true), (StageId::Requirements, false)]);
    assert_eq!(reviewer.seen[3], (StageId::Plan, false));
    assert!(read(&toy.root(), "artifacts/requirements.json").contains("multiplies by two"));
    load_state(&toy.root()).expect("hash of the edited artifact was updated");
}

#[test]
fn checkpoint_abort_is_terminal() {
    let mut toy = toy("", "");
    let mut reviewer = ScriptedReviewer { answers: vec![CheckpointChoice::Approve, CheckpointChoice::Abort], seen: Vec::new(), edit: |_| {} };
    let outcome = run_workflow(&mut toy.state, &toy_services(), RunOptions { checkpoints: CheckpointMode::Interactive(&mut reviewer), observer: None }).unwrap();
    assert_eq!(outcome.status, Status::Aborted);
    assert_eq!(toy.state.current_stage, StageId::Plan);
    assert!(toy.root().join("artifacts/test_plan.json").exists(), "the reviewed artifact stays on disk");
    assert_eq!(load_state(&toy.root()).unwrap().status, Status::Aborted);
}

#[test]
fn halt_before_persist_writes_nothing_and_resume_matches() {
    let baseline = {
        let mut toy = toy("", "");
        run_workflow(&mut toy.state, &toy_services(), RunOptions::default()).unwrap();
        stages_of(&toy.state)
    };
    for stage in [StageId::Plan, StageId::Execute, StageId::Analyze] {
        let mut toy = toy("", "");
        let state_before_halt = {
            let mut probe = Recorder { halt_before: Some(stage), ..Default::default() };
            let out = run_workflow(&mut toy.state, &toy_services(), RunOptions { checkpoints: CheckpointMode::Auto, observer: Some(&mut probe) }).unwrap();
            assert_eq!(out.halted, Some(HaltPoint::BeforePersist(stage)));
            load_state(&toy.root()).unwrap()
        };
        assert_eq!(state_before_halt.current_stage, stage, "the halted stage is not recorded");
        let mut resumed = state_before_halt;
        let out = run_workflow(&mut resumed, &toy_services(), RunOptions::default()).unwrap();
        assert_eq!(out.status, Status::Converged);
        assert_eq!(stages_of(&resumed), baseline);
    }
}

#[test]
fn halt_after_persist_resumes_from_next_stage() {
    let mut toy = toy("", "");
    let mut probe = Recorder { halt_after: Some(StageId::Execute), ..Default::default() };
    let out = run_workflow(&mut toy.state, &toy_services(), RunOptions { checkpoints: CheckpointMode::Auto, observer: Some(&mut probe) }).unwrap();
    assert_eq!(out.halted, Some(HaltPoint::AfterPersist(StageId::Execute)));
    let mut state = load_state(&toy.root()).unwrap();
    assert_eq!(state.current_stage, StageId::Analyze);
    assert_eq!(state.iteration, 1);
    let out = run_workflow(&mut state, &toy_services(), RunOptions::default()).unwrap();
    assert_eq!(out.status, Status::Converged);
    assert_eq!(state.iteration, 2);
}

#[test]
fn wall_clock_limit_stops_the_loop() {
    let mut toy = toy_with("", "wall_clock_limit_secs = 1", r#"env = { RUNNER_SLEEP = "1.2" }"#);
    let outcome = run_workflow(&mut toy.state, &toy_services(), RunOptions::default()).unwrap();
    assert_eq!(outcome.status, Status::BudgetExhausted);
    assert!(toy.state.history.iter().any(|e| e.transition == Transition::stop("wall clock limit")));
    assert_eq!(toy.state.iteration, 1);
}
