use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use super::{StageCtx, StageError, StageOutput};
use crate::artifacts::{extract_json, to_pretty_json, AnalysisPlan, AnalysisResponse, CaseScope, FailureDirective, RepairAction, TestPlan, ToolRequest};
use crate::blocks::BlockedTestFile;
use crate::executor::ExecutionReport;
use crate::logmine::{extract_failure_fragments, read_slice, search, LogFragment, Pattern};
use crate::state::ArtifactKind;

/// Re-requests after a rejected model answer.
pub const MAX_FORMAT_RETRIES: u32 = 2;
/// Log tool round-trips the model may ask for per iteration.
pub const MAX_FOLLOW_UPS: u32 = 5;

pub(super) fn run(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    let report: ExecutionReport = ctx.require_json(ArtifactKind::ExecutionReport)?;
    let test_plan: TestPlan = ctx.require_json(ArtifactKind::TestPlan)?;
    let file = ctx.read_test_file()?.ok_or_else(|| StageError::fatal("no test file to analyze"))?;
    let deferred: Vec<String> = test_plan.cases_in(CaseScope::Deferred).map(|c| c.case_id.clone()).filter(|id| !file.contains(id)).collect();
    let skeleton = AnalysisPlan::skeleton(&report, test_plan.block_limit, deferred);

    let failing: Vec<String> = report.failing_tests().map(|t| t.test_name.clone()).collect();
    let (plan, how) = if report.collection_errors || failing.is_empty() {
        (skeleton, "no model call")
    } else {
        let log = log_path(ctx)?;
        let fragments = extract_failure_fragments(&log, &failing, &ctx.state.config.fragment_budget).map_err(|e| StageError::fatal(format!("log mining: {e}")))?;
        match consult_model(ctx, &report, &file, &skeleton, &fragments, &log)? {
            Ok(plan) => (plan, "model"),
            Err(why) => (fallback(&skeleton, &file, &fragments, &why)?, "fallback"),
        }
    };

    let iteration = ctx.state.iteration;
    let note = format!(
        "analysis {}: {} failure(s) mapped, {} deferred, via {how}{}",
        serde_json::to_value(plan.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
        plan.failures.len(),
        plan.deferred.len(),
        if plan.stop_recommended { format!(", stop recommended: {}", plan.stop_reason) } else { String::new() }
    );
    ctx.stage_write(ArtifactKind::AnalysisPlan, format!("artifacts/analysis_plan_{iteration}.json"), to_pretty_json(&plan));
    Ok(StageOutput { note, plan: Some(plan) })
}

fn log_path(ctx: &mut StageCtx<'_>) -> Result<PathBuf, StageError> {
    let r = ctx.peek_ref(ArtifactKind::RunArtifacts).ok_or_else(|| StageError::fatal("no run artifacts recorded"))?;
    Ok(ctx.state.abs(r.path.parent().unwrap_or(Path::new(""))).join("log.txt"))
}

fn render_fragments(fragments: &[LogFragment]) -> String {
    fragments
        .iter()
        .map(|f| format!("### {} ({}), log lines {}-{}\n{}", f.test_name, f.error_type, f.source_span.start_line, f.source_span.end_line, f.excerpt))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Asks the model for the failure mapping. `Ok(Err(reason))` means every
/// attempt was rejected.
fn consult_model(
    ctx: &mut StageCtx<'_>,
    report: &ExecutionReport,
    file: &BlockedTestFile,
    skeleton: &AnalysisPlan,
    fragments: &[LogFragment],
    log: &Path,
) -> Result<Result<AnalysisPlan, String>, StageError> {
    let block_ids: BTreeSet<String> = file.ids().map(str::to_string).collect();
    let vars = BTreeMap::from([
        ("iteration", ctx.state.iteration.to_string()),
        ("passed", report.passed.to_string()),
        ("failed", report.failed.to_string()),
        ("errors", report.errors.to_string()),
        ("block_limit", skeleton.block_limit.to_string()),
        ("block_ids", block_ids.iter().cloned().collect::<Vec<_>>().join(", ")),
        ("block_index", serde_json::to_string(&file.index).unwrap_or_default()),
        ("fragments", render_fragments(fragments)),
    ]);
    let (system, user) = ctx.services.prompts.render("analyze", &vars)?;
    let cap = ctx.state.config.fragment_budget.per_fragment_chars;
    let mut context = user;
    let mut user_text = context.clone();
    let mut follow_ups = 0;
    let mut rejections = 0;
    loop {
        let text = ctx.complete(&system, &user_text)?;
        let verdict = extract_json(&text).map_err(|e| e.to_string()).and_then(|v| serde_json::from_value::<AnalysisResponse>(v).map_err(|e| format!("malformed analysis: {e}")));
        let rejection = match verdict {
            Ok(resp) if !resp.tool_requests.is_empty() && resp.failures.is_empty() => {
                if follow_ups < MAX_FOLLOW_UPS {
                    follow_ups += 1;
                    context.push_str("\n\nTool results:\n");
                    for req in &resp.tool_requests {
                        context.push_str(&run_tool(req, log, cap));
                        context.push('\n');
                    }
                    user_text = context.clone();
                    continue;
                }
                format!("the follow-up limit of {MAX_FOLLOW_UPS} is reached; answer with the failure mapping now")
            }
            Ok(resp) => {
                let mut plan = skeleton.clone();
                plan.failures = resp.failures;
                plan.stop_recommended = resp.stop_recommended;
                plan.stop_reason = resp.stop_reason;
                match plan.validate(report, &block_ids) {
                    Ok(()) => return Ok(Ok(plan)),
                    Err(e) => e.to_string(),
                }
            }
            Err(e) => e,
        };
        rejections += 1;
        if rejections > MAX_FORMAT_RETRIES {
            return Ok(Err(rejection));
        }
        user_text = format!("{context}\n\nYour previous answer was rejected: {rejection}\nAnswer again in the required format.");
    }
}

fn clip(s: String, cap: usize) -> String {
    if s.chars().count() <= cap {
        s
    } else {
        s.chars().take(cap).collect::<String>() + "\n[clipped]"
    }
}

fn run_tool(req: &ToolRequest, log: &Path, cap: usize) -> String {
    match req {
        ToolRequest::Search { pattern, regex, context_lines } => {
            let pat = if *regex { Pattern::regex(pattern) } else { Ok(Pattern::Literal(pattern.clone())) };
            let hits = pat.and_then(|p| search(&p, log, (*context_lines).min(10)));
            match hits {
                Ok(hits) if hits.is_empty() => format!("search `{pattern}`: no matches"),
                Ok(hits) => {
                    let body: Vec<String> = hits.iter().flat_map(|h| h.context.iter().map(|c| format!("{}: {}", c.line_no, c.text))).collect();
                    clip(format!("search `{pattern}`: {} match(es)\n{}", hits.len(), body.join("\n")), cap)
                }
                Err(e) => format!("search `{pattern}` failed: {e}"),
            }
        }
        ToolRequest::ReadSlice { start_line, end_line } => match read_slice(log, *start_line, *end_line) {
            Ok(text) => clip(format!("lines {start_line}-{end_line}:\n{text}"), cap),
            Err(e) => format!("read_slice {start_line}-{end_line} failed: {e}"),
        },
    }
}

/// Engine-built plan: each failing test's own block is rewritten.
fn fallback(skeleton: &AnalysisPlan, file: &BlockedTestFile, fragments: &[LogFragment], why: &str) -> Result<AnalysisPlan, StageError> {
    let mut plan = skeleton.clone();
    for f in fragments {
        let block_id = file.block_for_test(&f.test_name).ok_or_else(|| StageError::fatal(format!("analysis rejected ({why}) and failing test {} maps to no block", f.test_name)))?;
        plan.failures.push(FailureDirective {
            test: f.test_name.clone(),
            block_id,
            error_type: f.error_type.chars().take(200).collect(),
            action: RepairAction::RewriteBlock,
            note: format!("engine fallback after rejected analysis: {why}"),
        });
    }
    Ok(plan)
}
