use std::collections::BTreeMap;

use super::{StageCtx, StageError, StageOutput};
use crate::artifacts::{parse_json, to_pretty_json, FunctionDossier, RequirementSet};
use crate::state::ArtifactKind;

pub(super) fn run(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    let text = ctx.require_text(ArtifactKind::Dossier)?;
    let dossier = FunctionDossier::from_markdown(&text).map_err(|e| StageError::fatal(format!("stored dossier: {e}")))?;
    let vars = BTreeMap::from([("dossier_json", to_pretty_json(&dossier))]);
    let reqs = ctx.ask_valid("requirements", &vars, |text| {
        let reqs: RequirementSet = parse_json(text).map_err(super::artifact_err)?;
        reqs.validate().map_err(super::artifact_err)?;
        Ok(reqs)
    })?;
    let ids: Vec<&str> = reqs.requirements.iter().map(|r| r.req_id.as_str()).collect();
    let note = format!("{} requirement(s): {}", ids.len(), ids.join(", "));
    ctx.stage_write(ArtifactKind::Requirements, "artifacts/requirements.json", to_pretty_json(&reqs));
    Ok(StageOutput::note(note))
}
