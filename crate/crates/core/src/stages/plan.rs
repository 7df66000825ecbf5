use std::collections::BTreeMap;

use super::{StageCtx, StageError, StageOutput};
use crate::artifacts::{parse_json, to_pretty_json, AnalysisPlan, CaseScope, PlanStatus, RequirementSet, TestPlan};
use crate::state::ArtifactKind;

fn feedback(plan: &AnalysisPlan) -> String {
    let mut out = String::from("The previous test plan was sent back for redesign.\n");
    match plan.status {
        PlanStatus::CollectionError => out.push_str("The generated test file could not be collected (import or setup failure).\n"),
        _ => out.push_str(&format!("Last run: {} passed, {} failed, {} errors.\n", plan.passed, plan.failed, plan.errors)),
    }
    for f in &plan.failures {
        out.push_str(&format!("- {} ({}): {}: {}\n", f.test, f.block_id, f.error_type, f.note));
    }
    out
}

pub(super) fn run(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    let reqs: RequirementSet = ctx.require_json(ArtifactKind::Requirements)?;
    let previous: Option<TestPlan> = match ctx.read_text(ArtifactKind::TestPlan)? {
        Some(t) => serde_json::from_str(&t).ok(),
        None => None,
    };
    let analysis: Option<AnalysisPlan> = if previous.is_some() {
        ctx.read_text(ArtifactKind::AnalysisPlan)?.and_then(|t| serde_json::from_str(&t).ok())
    } else {
        None
    };
    let block_limit = ctx.state.config.block_limit;
    let plan_version = previous.as_ref().map_or(1, |p| p.plan_version + 1);
    let mut requirements_json = to_pretty_json(&reqs);
    if let Some(a) = &analysis {
        requirements_json.push('\n');
        requirements_json.push_str(&feedback(a));
    }
    let vars = BTreeMap::from([
        ("module_path", ctx.state.target.module_path.clone()),
        ("function_name", ctx.state.target.function_name.clone()),
        ("block_limit", block_limit.to_string()),
        ("requirements_json", requirements_json),
    ]);
    let plan = ctx.ask_valid("plan", &vars, |text| {
        let mut plan: TestPlan = parse_json(text).map_err(super::artifact_err)?;
        // engine-owned fields
        plan.plan_version = plan_version;
        plan.block_limit = block_limit;
        plan.validate(&reqs).map_err(super::artifact_err)?;
        Ok(plan)
    })?;
    let smoke = plan.cases_in(CaseScope::Smoke).count();
    let note = format!("plan v{}: {} case(s), {} SMOKE, {} DEFERRED", plan.plan_version, plan.cases.len(), smoke, plan.cases.len() - smoke);
    ctx.stage_write(ArtifactKind::TestPlan, "artifacts/test_plan.json", to_pretty_json(&plan));
    Ok(StageOutput::note(note))
}
