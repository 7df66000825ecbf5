use std::collections::BTreeMap;

use chrono::SecondsFormat;

use super::{entry_transition, StageCtx, StageError, StageOutput};
use crate::artifacts::{AnalysisPlan, TestPlan};
use crate::executor::{ExecutionReport, TestStatus};
use crate::orchestrator::{BUDGET_EXHAUSTED, STAGE_RETRY_LIMIT, WALL_CLOCK_LIMIT};
use crate::pct::format_fixed;
use crate::stage::{StageId, Transition};
use crate::state::{ArtifactKind, HistoryEvent, Status, WorkflowState};

/// Terminal status implied by how the workflow reached Report.
pub fn final_status(state: &WorkflowState, latest: Option<&AnalysisPlan>) -> Status {
    match entry_transition(state) {
        Some((StageId::Analyze, Transition::Proceed)) => Status::Converged,
        Some((_, Transition::Stop { reason })) => match reason.as_str() {
            BUDGET_EXHAUSTED | WALL_CLOCK_LIMIT => Status::BudgetExhausted,
            STAGE_RETRY_LIMIT => Status::Failed,
            // stop recommended by the analysis
            _ => match latest {
                Some(p) if p.failed == 0 && p.errors == 0 && !p.collection_errors => Status::Converged,
                _ => Status::BudgetExhausted,
            },
        },
        _ => Status::Failed,
    }
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

fn transition_text(t: &Transition) -> String {
    match t {
        Transition::Proceed => "proceed".into(),
        Transition::Repeat { target } => format!("repeat {target}"),
        Transition::Backtrack { target } => format!("backtrack to {target}"),
        Transition::Stop { reason } => format!("stop ({reason})"),
    }
}

pub struct ReportInput<'a> {
    pub state: &'a WorkflowState,
    pub status: Status,
    pub runs: &'a [(u32, ExecutionReport)],
    pub plans: &'a [(u32, AnalysisPlan)],
    pub test_plan: Option<&'a TestPlan>,
    pub test_file: Option<String>,
}

/// The consolidated Markdown report. Contains no absolute paths; the only
/// run-dependent values are the history timestamps.
pub fn render_report(input: &ReportInput<'_>) -> String {
    let state = input.state;
    let mut out = format!("# Test generation report: {}.{}\n\n", state.target.module_path, state.target.function_name);
    let last_run = input.runs.last().map(|(_, r)| r);
    out.push_str(&format!("- Status: {}\n", input.status));
    out.push_str(&format!("- Iterations executed: {} (budget {})\n", input.runs.len(), state.config.budget.max_iterations));
    if let Some(r) = last_run {
        out.push_str(&format!("- Final branch coverage: {}%\n", format_fixed(r.branch_coverage_pct, 2)));
    }
    let trajectory: Vec<String> = input.runs.iter().map(|(_, r)| format!("{}%", format_fixed(r.branch_coverage_pct, 2))).collect();
    if !trajectory.is_empty() {
        out.push_str(&format!("- Coverage trajectory: {}\n", trajectory.join(" -> ")));
    }
    if let Some(f) = &input.test_file {
        out.push_str(&format!("- Test file: {f}\n"));
    }

    out.push_str("\n## Iterations\n\n| Iteration | Passed | Failed | Errors | Collection error | Branch coverage |\n|---:|---:|---:|---:|:---:|---:|\n");
    for (i, r) in input.runs {
        out.push_str(&format!(
            "| {i} | {} | {} | {} | {} | {}% |\n",
            r.passed,
            r.failed,
            r.errors,
            if r.collection_errors { "yes" } else { "no" },
            format_fixed(r.branch_coverage_pct, 2)
        ));
    }

    // failing test -> iterations (with error type) where it failed
    let mut failing: BTreeMap<&str, Vec<(u32, String)>> = BTreeMap::new();
    for (i, r) in input.runs {
        for t in r.failing_tests() {
            let ty = input
                .plans
                .iter()
                .find(|(pi, _)| pi == i)
                .and_then(|(_, p)| p.failures.iter().find(|f| f.test == t.test_name))
                .map(|f| f.error_type.clone())
                .unwrap_or_else(|| if t.status == TestStatus::Error { "error".into() } else { "failure".into() });
            failing.entry(t.test_name.as_str()).or_default().push((*i, ty));
        }
    }
    let final_pass = |name: &str| last_run.is_some_and(|r| r.tests.iter().any(|t| t.test_name == name && t.status == TestStatus::Pass));
    let block_of = |name: &str| input.plans.iter().rev().flat_map(|(_, p)| p.failures.iter()).find(|f| f.test == name).map(|f| f.block_id.clone());

    out.push_str("\n## Resolved failures\n\n");
    let mut any = false;
    for (name, hits) in &failing {
        if !final_pass(name) {
            continue;
        }
        any = true;
        let iters: Vec<String> = hits.iter().map(|(i, ty)| format!("{i} ({ty})")).collect();
        let block = block_of(name).map(|b| format!(" [{b}]")).unwrap_or_default();
        let fixed = input.runs.last().map(|(i, _)| *i).unwrap_or(0);
        out.push_str(&format!("- {name}{block}: failing in iteration {}; passing in iteration {fixed}\n", iters.join(", ")));
    }
    if !any {
        out.push_str("None.\n");
    }

    out.push_str("\n## Remaining failures\n\n");
    let last_plan = input.plans.last().map(|(_, p)| p);
    match last_plan {
        Some(p) if p.collection_errors => out.push_str("The last run did not collect any tests.\n"),
        Some(p) if !p.failures.is_empty() => {
            for f in &p.failures {
                out.push_str(&format!("- {} [{}] {}: {}\n", f.test, f.block_id, f.error_type, f.note));
            }
        }
        Some(p) if p.failed + p.errors > 0 => out.push_str(&format!("{} failing test(s) without a mapped block.\n", p.failed + p.errors)),
        _ => out.push_str("None.\n"),
    }
    if let Some(p) = last_plan.filter(|p| p.stop_recommended) {
        out.push_str(&format!("\nStop recommended by the analysis: {}\n", p.stop_reason));
    }

    out.push_str("\n## Deferred cases never promoted\n\n");
    match last_plan {
        Some(p) if !p.deferred.is_empty() => {
            for id in &p.deferred {
                let title = input.test_plan.and_then(|tp| tp.case(id)).map(|c| format!(": {}", c.title)).unwrap_or_default();
                out.push_str(&format!("- {id}{title}\n"));
            }
        }
        _ => out.push_str("None.\n"),
    }

    if let Some(r) = last_run.filter(|r| !r.warnings.is_empty()) {
        out.push_str("\n## Warnings from the last run\n\n");
        for w in &r.warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }

    out.push_str("\n## Transition history\n\n| Seq | Time (UTC) | Stage | Iteration | Transition | Note |\n|---:|---|---|---:|---|---|\n");
    for HistoryEvent { seq, timestamp, stage, transition, note, iteration } in &state.history {
        out.push_str(&format!(
            "| {seq} | {} | {stage} | {iteration} | {} | {} |\n",
            timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
            cell(&transition_text(transition)),
            cell(note)
        ));
    }
    out
}

fn parse_stored<T: serde::de::DeserializeOwned>(kind: ArtifactKind, bytes: &[u8]) -> Result<T, StageError> {
    serde_json::from_slice(bytes).map_err(|e| StageError::fatal(format!("stored {kind} is malformed: {e}")))
}

pub(super) fn run(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    let mut runs: Vec<(u32, ExecutionReport)> = Vec::new();
    for (i, b) in ctx.read_all(ArtifactKind::ExecutionReport)? {
        runs.push((i, parse_stored(ArtifactKind::ExecutionReport, &b)?));
    }
    let mut plans: Vec<(u32, AnalysisPlan)> = Vec::new();
    for (i, b) in ctx.read_all(ArtifactKind::AnalysisPlan)? {
        plans.push((i, parse_stored(ArtifactKind::AnalysisPlan, &b)?));
    }
    let test_plan: Option<TestPlan> = match ctx.read_text(ArtifactKind::TestPlan)? {
        Some(t) => serde_json::from_str(&t).ok(),
        None => None,
    };
    let test_file = ctx.peek_ref(ArtifactKind::TestFile).map(|r| r.path.to_string_lossy().into_owned());
    let status = final_status(ctx.state, plans.last().map(|(_, p)| p));
    let text = render_report(&ReportInput { state: ctx.state, status, runs: &runs, plans: &plans, test_plan: test_plan.as_ref(), test_file });
    ctx.stage_write(ArtifactKind::FinalReport, "reports/final_report.md", text);
    Ok(StageOutput::note(format!("final report written, status {status}")))
}
