use std::fs::{self, File};
use std::io::BufReader;

use super::{StageCtx, StageError, StageOutput};
use crate::executor::{self, ExecError, TestStatus, TracebackRef};
use crate::logmine::{locate_sections, section_for};
use crate::pct::format_fixed;
use crate::state::{ArtifactKind, WorkflowState};

fn exec_err(e: ExecError) -> StageError {
    match e {
        ExecError::Protocol { .. } => StageError::recoverable(e.to_string()),
        other => StageError::fatal(other.to_string()),
    }
}

pub(super) fn run(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    let test_ref = ctx.peek_ref(ArtifactKind::TestFile).ok_or_else(|| StageError::fatal("no test file to execute"))?;
    ctx.require_text(ArtifactKind::TestFile)?; // hash check before running it
    let iteration = ctx.state.iteration + 1;
    let run_rel = WorkflowState::run_dir_rel(iteration);
    let run_dir = ctx.state.abs(&run_rel);
    if run_dir.exists() {
        // leftovers of an interrupted attempt
        fs::remove_dir_all(&run_dir)?;
    }
    let runner = &ctx.state.config.runner;
    let raw = executor::run(runner, &ctx.state.abs(&test_ref.path), &run_dir).map_err(exec_err)?;
    let mut report = executor::parse_results(&raw).map_err(exec_err)?;
    let coverage = match executor::parse_coverage(&raw, &runner.subject_files, &runner.working_dir) {
        Ok(c) => c,
        Err(e) if report.collection_errors => {
            report.warnings.push(format!("coverage unavailable: {e}"));
            report.warnings.sort();
            return finish(ctx, iteration, report);
        }
        Err(e) => return Err(exec_err(e)),
    };
    report.branch_coverage_pct = coverage.branch_coverage_pct;
    report.warnings.extend(coverage.warnings);

    let (sections, _) = locate_sections(BufReader::new(File::open(&raw.log_path)?))?;
    let log_rel = run_rel.join("log.txt").to_string_lossy().into_owned();
    for t in report.tests.iter_mut().filter(|t| t.status != TestStatus::Pass) {
        t.traceback_ref = section_for(&sections, &t.test_name).map(|s| TracebackRef { path: log_rel.clone(), start_line: s.start_line, end_line: s.end_line });
    }
    finish(ctx, iteration, report)
}

fn finish(ctx: &mut StageCtx<'_>, iteration: u32, report: executor::ExecutionReport) -> Result<StageOutput, StageError> {
    let run_rel = WorkflowState::run_dir_rel(iteration);
    let meta = fs::read(ctx.state.abs(run_rel.join("meta.json")))?;
    let note = if report.collection_errors {
        format!("iteration {iteration}: collection error ({})", report.warnings.join("; "))
    } else {
        format!(
            "iteration {iteration}: {} passed, {} failed, {} errors, branch coverage {}%",
            report.passed,
            report.failed,
            report.errors,
            format_fixed(report.branch_coverage_pct, 2)
        )
    };
    ctx.state.iteration = iteration;
    ctx.stage_write(ArtifactKind::RunArtifacts, run_rel.join("meta.json"), meta);
    ctx.stage_write(ArtifactKind::ExecutionReport, run_rel.join("execution_report.json"), crate::artifacts::to_pretty_json(&report));
    Ok(StageOutput::note(note))
}
