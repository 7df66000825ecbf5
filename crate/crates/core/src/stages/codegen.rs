use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{extract_block_body, extract_code, StageCtx, StageError, StageOutput};
use crate::artifacts::{to_pretty_json, AnalysisPlan, CaseScope, FailureDirective, FunctionDossier, RepairAction, TestPlan};
use crate::blocks::{apply_edits, case_number, parse_blocks, BlockedTestFile, EditAction};
use crate::logmine::extract_failure_fragments;
use crate::stage::{StageId, Transition};
use crate::state::ArtifactKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerationMode {
    /// Write the whole file for the SMOKE cases.
    Fresh,
    /// Rewrite or delete the blocks named by the latest analysis.
    Repair,
    /// Add blocks for not yet generated DEFERRED cases.
    Promote,
}

impl GenerationMode {
    /// Repair and promotion apply only when Analyze sent the workflow back
    /// here; any other entry (first pass, re-planning) starts afresh.
    pub fn select(entry: Option<&(StageId, Transition)>, plan: Option<&AnalysisPlan>) -> Self {
        let from_analysis = matches!(entry, Some((StageId::Analyze, Transition::Backtrack { target: StageId::GenerateCode })));
        match plan {
            Some(p) if from_analysis && !p.failures.is_empty() => GenerationMode::Repair,
            Some(p) if from_analysis && !p.deferred.is_empty() => GenerationMode::Promote,
            _ => GenerationMode::Fresh,
        }
    }
}

/// Directives acted on this round: the first directive for each distinct
/// block, in plan order, up to `limit` blocks. The rest wait for a later
/// iteration.
pub fn repair_targets(plan: &AnalysisPlan, limit: usize) -> Vec<&FailureDirective> {
    let mut seen = BTreeSet::new();
    plan.failures.iter().filter(|f| seen.insert(f.block_id.as_str())).take(limit).collect()
}

pub(super) fn run(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    let test_plan: TestPlan = ctx.require_json(ArtifactKind::TestPlan)?;
    let analysis: Option<AnalysisPlan> = match ctx.entry {
        Some((StageId::Analyze, _)) => Some(ctx.require_json(ArtifactKind::AnalysisPlan)?),
        _ => None,
    };
    let mode = GenerationMode::select(ctx.entry.as_ref(), analysis.as_ref());
    let limit = test_plan.block_limit as usize;
    let (mut file, note) = match (mode, analysis) {
        (GenerationMode::Repair, Some(plan)) => {
            let prior = current_file(ctx)?;
            repair(ctx, prior, &plan, limit)?
        }
        (GenerationMode::Promote, Some(plan)) => {
            let prior = current_file(ctx)?;
            promote(ctx, prior, &plan, &test_plan, limit)?
        }
        _ => fresh(ctx, &test_plan)?,
    };
    file.rebuild_index();
    let rel = ctx.state.test_file_rel();
    ctx.stage_write(ArtifactKind::TestFile, rel, file.render());
    Ok(StageOutput::note(note))
}

fn current_file(ctx: &mut StageCtx<'_>) -> Result<BlockedTestFile, StageError> {
    ctx.read_test_file()?.ok_or_else(|| StageError::fatal("no test file to edit"))
}

fn fresh(ctx: &mut StageCtx<'_>, plan: &TestPlan) -> Result<(BlockedTestFile, String), StageError> {
    let dossier = FunctionDossier::from_markdown(&ctx.require_text(ArtifactKind::Dossier)?).map_err(|e| StageError::fatal(format!("stored dossier: {e}")))?;
    let smoke: Vec<String> = plan.cases_in(CaseScope::Smoke).map(|c| c.case_id.clone()).collect();
    let vars = BTreeMap::from([
        ("module_path", ctx.state.target.module_path.clone()),
        ("function_name", ctx.state.target.function_name.clone()),
        ("signature", dossier.signature),
        ("case_ids", smoke.join(", ")),
        ("plan_json", to_pretty_json(plan)),
    ]);
    let file = ctx.ask_valid("generate_code", &vars, |text| {
        let file = parse_blocks(&format!("{}\n", extract_code(text))).map_err(|e| e.to_string())?;
        let cases = file.case_ids();
        if cases != smoke {
            return Err(format!("expected CASE blocks [{}] in this order, got [{}]", smoke.join(", "), cases.join(", ")));
        }
        Ok(file)
    })?;
    Ok((file, format!("generated {} SMOKE case block(s)", smoke.len())))
}

fn repair(ctx: &mut StageCtx<'_>, prior: BlockedTestFile, plan: &AnalysisPlan, limit: usize) -> Result<(BlockedTestFile, String), StageError> {
    let targets: Vec<FailureDirective> = repair_targets(plan, limit).into_iter().cloned().collect();
    let excerpts = failure_excerpts(ctx, &targets)?;
    let header = prior.get("HEADER").map(|b| b.body.clone()).unwrap_or_default();
    let mut edits = Vec::new();
    for d in &targets {
        match d.action {
            RepairAction::DeleteBlock => edits.push(EditAction::DeleteBlock { block_id: d.block_id.clone() }),
            RepairAction::RewriteBlock => {
                let body = prior.get(&d.block_id).map(|b| b.body.clone()).ok_or_else(|| StageError::fatal(format!("analysis names missing block {}", d.block_id)))?;
                let vars = BTreeMap::from([
                    ("block_id", d.block_id.clone()),
                    ("test", d.test.clone()),
                    ("error_type", d.error_type.clone()),
                    ("note", d.note.clone()),
                    ("header", header.clone()),
                    ("block_body", body),
                    ("fragment", excerpts.get(&d.test).cloned().unwrap_or_else(|| "(none)".into())),
                ]);
                let id = d.block_id.clone();
                let new_body = ctx.ask_valid("repair_block", &vars, |text| extract_block_body(text, &id))?;
                edits.push(EditAction::RewriteBlock { block_id: d.block_id.clone(), new_body });
            }
        }
    }
    let next = apply_edits(&prior, &edits, limit).map_err(|e| StageError::fatal(format!("repair rejected by editor: {e}")))?;
    let done: Vec<String> = targets
        .iter()
        .map(|d| format!("{} {}", if d.action == RepairAction::RewriteBlock { "rewrote" } else { "deleted" }, d.block_id))
        .collect();
    Ok((next, done.join(", ")))
}

/// Log excerpts for the targeted failures, re-mined from the analyzed run.
fn failure_excerpts(ctx: &mut StageCtx<'_>, targets: &[FailureDirective]) -> Result<BTreeMap<String, String>, StageError> {
    let Some(run_ref) = ctx.peek_ref(ArtifactKind::RunArtifacts) else { return Ok(BTreeMap::new()) };
    let log = ctx.state.abs(run_ref.path.parent().unwrap_or(Path::new(""))).join("log.txt");
    if !log.is_file() {
        return Ok(BTreeMap::new());
    }
    let tests: Vec<String> = targets.iter().map(|d| d.test.clone()).collect();
    let frags = extract_failure_fragments(&log, &tests, &ctx.state.config.fragment_budget).map_err(|e| StageError::fatal(format!("log mining: {e}")))?;
    Ok(frags.into_iter().map(|f| (f.test_name, f.excerpt)).collect())
}

fn promote(ctx: &mut StageCtx<'_>, prior: BlockedTestFile, plan: &AnalysisPlan, test_plan: &TestPlan, limit: usize) -> Result<(BlockedTestFile, String), StageError> {
    let header = prior.get("HEADER").map(|b| b.body.clone()).unwrap_or_default();
    let mut insert_after = prior.case_ids().last().cloned().unwrap_or_else(|| "HEADER".into());
    let mut edits = Vec::new();
    let chosen: Vec<String> = plan.deferred.iter().filter(|id| !prior.contains(id)).take(limit).cloned().collect();
    for id in &chosen {
        let case = test_plan.case(id).ok_or_else(|| StageError::fatal(format!("deferred case {id} is not in the test plan")))?;
        let vars = BTreeMap::from([
            ("block_id", id.clone()),
            ("case_number", case_number(id).map(|n| n.to_string()).unwrap_or_default()),
            ("case_json", to_pretty_json(case)),
            ("header", header.clone()),
        ]);
        let body = ctx.ask_valid("promote_case", &vars, |text| extract_block_body(text, id))?;
        edits.push(EditAction::AddCase { block_id: id.clone(), body, insert_after: insert_after.clone() });
        insert_after = id.clone();
    }
    let next = apply_edits(&prior, &edits, limit).map_err(|e| StageError::fatal(format!("promotion rejected by editor: {e}")))?;
    Ok((next, format!("promoted {}", chosen.join(", "))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::PlanStatus;

    fn plan(failures: &[(&str, &str)], deferred: &[&str]) -> AnalysisPlan {
        AnalysisPlan {
            status: PlanStatus::PartiallyPassed,
            passed: 1,
            failed: failures.len() as u32,
            errors: 0,
            collection_errors: false,
            block_limit: 3,
            failures: failures
                .iter()
                .map(|(t, b)| FailureDirective { test: t.to_string(), block_id: b.to_string(), error_type: "E".into(), action: RepairAction::RewriteBlock, note: String::new() })
                .collect(),
            deferred: deferred.iter().map(|s| s.to_string()).collect(),
            stop_recommended: false,
            stop_reason: String::new(),
        }
    }

    #[test]
    fn targets_are_capped_by_distinct_block() {
        let p = plan(&[("a", "CASE_1"), ("b", "CASE_1"), ("c", "CASE_2"), ("d", "CASE_3"), ("e", "CASE_4")], &[]);
        let ids: Vec<&str> = repair_targets(&p, 3).iter().map(|d| d.block_id.as_str()).collect();
        assert_eq!(ids, vec!["CASE_1", "CASE_2", "CASE_3"]);
    }

    #[test]
    fn mode_selection() {
        let back = (StageId::Analyze, Transition::Backtrack { target: StageId::GenerateCode });
        let failing = plan(&[("a", "CASE_1")], &["CASE_9"]);
        let passing = plan(&[], &["CASE_9"]);
        assert_eq!(GenerationMode::select(Some(&back), Some(&failing)), GenerationMode::Repair);
        assert_eq!(GenerationMode::select(Some(&back), Some(&passing)), GenerationMode::Promote);
        assert_eq!(GenerationMode::select(Some(&(StageId::Plan, Transition::Proceed)), Some(&failing)), GenerationMode::Fresh);
        assert_eq!(GenerationMode::select(None, None), GenerationMode::Fresh);
    }
}
