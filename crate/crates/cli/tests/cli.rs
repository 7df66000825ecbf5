mod common;

use std::path::Path;

use attest_core::state::{load_state, Status};
use common::*;

fn ws_arg(ws: &Path) -> &str {
    ws.to_str().unwrap()
}

fn run_auto(ws: &Path) -> std::process::Output {
    attest(&["run", ws_arg(ws)], &[], None)
}

#[test]
fn init_refuses_existing_workspace_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let again = attest(&["init", ws_arg(&ws), "--config", demo_config().to_str().unwrap()], &[], None);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).starts_with("error: workspace exists:"), "{}", stderr(&again));
    let forced = attest(&["init", ws_arg(&ws), "--config", demo_config().to_str().unwrap(), "--force"], &[], None);
    assert_eq!(code(&forced), 0, "{}", stderr(&forced));
}

#[test]
fn run_without_workspace_reports_category() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_auto(&tmp.path().join("missing"));
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).starts_with("error: no workspace:"), "{}", stderr(&out));
}

#[test]
fn converged_run_prints_status_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let out = run_auto(&ws);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("status: converged"));
    assert!(text.lines().any(|l| l.starts_with("artifact analysis_plan: ") && l.ends_with("analysis_plan_5.json")));
    assert!(text.lines().any(|l| l.starts_with("report: ") && l.ends_with("reports/final_report.md")));

    let report = attest(&["report", ws_arg(&ws)], &[], None);
    assert_eq!(stdout(&report), read_report(&ws));

    // a finished workflow cannot be run again
    let again = run_auto(&ws);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).starts_with("error: workflow finished:"), "{}", stderr(&again));
}

#[test]
fn inspect_shows_stored_artifacts_without_touching_state() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    assert_eq!(code(&run_auto(&ws)), 0);
    let before = std::fs::read(ws.join("state.json")).unwrap();

    let plan = attest(&["inspect", ws_arg(&ws), "--artifact", "analysis_plan", "--iteration", "4"], &[], None);
    assert_eq!(code(&plan), 0);
    let stored = std::fs::read_to_string(ws.join("artifacts/analysis_plan_4.json")).unwrap();
    assert_eq!(stdout(&plan), stored);
    assert!(stored.contains("\"error_type\": \"RuntimeError\""));

    let summary = attest(&["inspect", ws_arg(&ws)], &[], None);
    assert!(stdout(&summary).contains("status: converged"));
    assert!(stdout(&summary).contains("iteration: 5 of 5"));

    let history = attest(&["inspect", ws_arg(&ws), "--history"], &[], None);
    assert!(stdout(&history).lines().count() >= 20);

    let missing = attest(&["inspect", ws_arg(&ws), "--artifact", "analysis_plan", "--iteration", "9"], &[], None);
    assert!(stderr(&missing).starts_with("error: no artifact:"));
    let bad = attest(&["inspect", ws_arg(&ws), "--artifact", "nonsense"], &[], None);
    assert!(stderr(&bad).starts_with("error: usage:"));

    assert_eq!(std::fs::read(ws.join("state.json")).unwrap(), before);
}

#[test]
fn interactive_approval_matches_auto_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let auto = init_demo(&tmp.path().join("auto"));
    assert_eq!(code(&run_auto(&auto)), 0);

    let inter = init_demo(&tmp.path().join("inter"));
    let out = attest(&["run", ws_arg(&inter), "--interactive"], &[], Some("approve\ny\na\n"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // Requirements once, Plan twice (the collection error backtracks to Plan)
    assert_eq!(stderr(&out).matches("checkpoint after").count(), 3);
    assert_eq!(mask_timestamps(&read_report(&inter)), mask_timestamps(&read_report(&auto)));
}

#[test]
fn abort_at_checkpoint_exits_3_and_stays_aborted() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let out = attest(&["run", ws_arg(&ws), "--interactive"], &[], Some("a\nabort\n"));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let state = load_state(&ws).unwrap();
    assert_eq!(state.status, Status::Aborted);
    assert!(!ws.join("reports/final_report.md").exists());

    let resumed = attest(&["resume", ws_arg(&ws)], &[], None);
    assert_eq!(code(&resumed), 3);
    assert!(stdout(&resumed).contains("status: aborted"));
}

#[test]
fn closed_stdin_at_checkpoint_aborts() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let out = attest(&["run", ws_arg(&ws), "--interactive"], &[], None);
    assert_eq!(code(&out), 3);
}

#[test]
fn edited_artifact_is_rehashed_and_used() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let out = attest(&["run", ws_arg(&ws), "--interactive"], &[("EDITOR", "sed -i s/largest/greatest/")], Some("edit\napprove\napprove\napprove\n"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(ws.join("artifacts/requirements.json")).unwrap();
    assert!(text.contains("greatest singular value"));
    // load_state verifies content hashes
    assert_eq!(load_state(&ws).unwrap().status, Status::Converged);
}

#[test]
fn invalid_edit_is_flagged_and_can_be_aborted() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let editor = "sh -c 'echo broken > \"$1\"' sh";
    let out = attest(&["run", ws_arg(&ws), "--interactive"], &[("EDITOR", editor)], Some("edit\nabort\n"));
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("the edited artifact is invalid"), "{}", stderr(&out));
}

#[test]
fn budget_exhaustion_exits_2_with_remaining_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let out = attest(&["run", ws_arg(&ws), "--max-iterations", "3"], &[], None);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let report = read_report(&ws);
    assert!(report.contains("- Status: budget_exhausted"));
    assert!(report.contains("- Iterations executed: 3 (budget 3)"));
    let remaining = report.split("## Remaining failures").nth(1).unwrap();
    assert!(remaining.trim_start().starts_with("- TestSpectralNorm.test_invalid_dim_index_exception [CASE_12] TypeError"));
}

#[test]
fn overrides_and_resume_forbidden_after_start() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let halted = attest(&["run", ws_arg(&ws)], &[("ATTEST_HALT_AFTER", "Plan")], None);
    assert_eq!(code(&halted), 137);

    let override_ = attest(&["run", ws_arg(&ws), "--max-iterations", "2"], &[], None);
    assert!(stderr(&override_).starts_with("error: config:"), "{}", stderr(&override_));
    let forbidden = attest(&["run", ws_arg(&ws), "--resume-forbidden"], &[], None);
    assert!(stderr(&forbidden).starts_with("error: already started:"), "{}", stderr(&forbidden));
    assert_eq!(load_state(&ws).unwrap().config.budget.max_iterations, 5);

    // a plain run continues where the halted one stopped
    assert_eq!(code(&run_auto(&ws)), 0);
}

#[test]
fn report_before_completion_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = init_demo(tmp.path());
    let out = attest(&["report", ws_arg(&ws)], &[], None);
    assert!(stderr(&out).starts_with("error: no report:"));
}

#[test]
fn dataset_report_text_table() {
    let tmp = tempfile::tempdir().unwrap();
    let records = tmp.path().join("r.csv");
    let groups = tmp.path().join("g.csv");
    std::fs::write(&records, "subject,config,branch_coverage_pct\na,x,50\nb,x,60.01\na,y,40\nb,y,20\n").unwrap();
    std::fs::write(&groups, "subject,library\na,L1\nb,L2\n").unwrap();
    let out = attest(&["report", "--records", records.to_str().unwrap(), "--groups", groups.to_str().unwrap()], &[], None);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("Tool"));
    // (50 + 60.01) / 2 = 55.005, half-up
    assert!(text.lines().any(|l| l.starts_with("x ") && l.contains("60.01") && l.ends_with("55.01")), "{text}");

    std::fs::write(&records, "subject,config,branch_coverage_pct\na,x,150\n").unwrap();
    let bad = attest(&["report", "--records", records.to_str().unwrap(), "--groups", groups.to_str().unwrap()], &[], None);
    assert!(stderr(&bad).starts_with("error: dataset:"));
}

#[test]
fn stub_runner_usage_error() {
    let out = std::process::Command::new(STUB).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}
