//! Structured stage artifacts and their schema checks.

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocks::case_number;
use crate::executor::ExecutionReport;
use crate::state::TargetRef;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{0}")]
    Invalid(String),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ArtifactError> {
    Err(ArtifactError::Invalid(msg.into()))
}

/// Pulls the JSON document out of a model response: the first fenced block
/// that parses, else the outermost `{...}` span.
pub fn extract_json(text: &str) -> Result<serde_json::Value, ArtifactError> {
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let Some(close) = after[body_start..].find("```") else { break };
        if let Ok(v) = serde_json::from_str(&after[body_start..body_start + close]) {
            return Ok(v);
        }
        rest = &after[body_start + close + 3..];
    }
    match (text.find('{'), text.rfind('}')) {
        (Some(a), Some(b)) if a < b => Ok(serde_json::from_str(&text[a..=b])?),
        _ => invalid("response contains no JSON object"),
    }
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, ArtifactError> {
    Ok(serde_json::from_value(extract_json(text)?)?)
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact types serialize infallibly");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDossier {
    pub target: TargetRef,
    pub signature: String,
    pub doc_text: String,
    pub source_excerpt: String,
    pub observed_constraints: Vec<String>,
}

const DOSSIER_FENCE: &str = "```json";

impl FunctionDossier {
    pub fn validate(&self, context_chars: usize) -> Result<(), ArtifactError> {
        if self.signature.trim().is_empty() {
            return invalid("dossier signature is empty");
        }
        if self.source_excerpt.chars().count() > context_chars {
            return invalid(format!("dossier excerpt exceeds {context_chars} characters"));
        }
        Ok(())
    }

    /// Human-readable rendering with the machine form embedded as a JSON block.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("# Function dossier: {}.{}\n\n", self.target.module_path, self.target.function_name);
        out.push_str(&format!("## Signature\n\n```python\n{}\n```\n\n", self.signature));
        let doc = if self.doc_text.is_empty() { "(none)" } else { &self.doc_text };
        out.push_str(&format!("## Documentation\n\n{doc}\n\n## Observed constraints\n\n"));
        if self.observed_constraints.is_empty() {
            out.push_str("(none)\n");
        }
        for c in &self.observed_constraints {
            out.push_str(&format!("- {c}\n"));
        }
        out.push_str(&format!("\n## Machine-readable\n\n{DOSSIER_FENCE}\n{}```\n", to_pretty_json(self)));
        out
    }

    pub fn from_markdown(text: &str) -> Result<Self, ArtifactError> {
        let start = text.rfind(DOSSIER_FENCE).ok_or_else(|| ArtifactError::Invalid("dossier lacks its JSON block".into()))?;
        let body = &text[start + DOSSIER_FENCE.len()..];
        let end = body.find("```").ok_or_else(|| ArtifactError::Invalid("unterminated dossier JSON block".into()))?;
        Ok(serde_json::from_str(&body[..end])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementKind {
    Semantic,
    Structural,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Requirement {
    pub req_id: String,
    pub kind: RequirementKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementSet {
    pub requirements: Vec<Requirement>,
}

impl RequirementSet {
    pub fn validate(&self) -> Result<(), ArtifactError> {
        if self.requirements.is_empty() {
            return invalid("requirement list is empty");
        }
        let mut seen = BTreeSet::new();
        for r in &self.requirements {
            if r.req_id.trim().is_empty() || r.text.trim().is_empty() {
                return invalid("requirements need a non-empty req_id and text");
            }
            if !seen.insert(r.req_id.as_str()) {
                return invalid(format!("duplicate req_id {}", r.req_id));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.requirements.iter().map(|r| r.req_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseCategory {
    Normal,
    Boundary,
    Exception,
    StateMutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CaseScope {
    #[serde(rename = "SMOKE")]
    Smoke,
    #[serde(rename = "DEFERRED")]
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedCase {
    pub case_id: String,
    pub title: String,
    pub category: CaseCategory,
    pub scope: CaseScope,
    pub covers: Vec<String>,
    pub oracle_sketch: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPlan {
    pub plan_version: u32,
    pub block_limit: u32,
    pub cases: Vec<PlannedCase>,
}

impl TestPlan {
    /// Schema checks plus requirement coverage against `reqs`.
    pub fn validate(&self, reqs: &RequirementSet) -> Result<(), ArtifactError> {
        if self.block_limit == 0 {
            return invalid("block_limit must be positive");
        }
        let known = reqs.ids();
        let mut seen = BTreeSet::new();
        for c in &self.cases {
            if case_number(&c.case_id).is_none() {
                return invalid(format!("case_id `{}` does not match CASE_<n>", c.case_id));
            }
            if !seen.insert(c.case_id.as_str()) {
                return invalid(format!("duplicate case_id {}", c.case_id));
            }
            if c.covers.is_empty() {
                return invalid(format!("{} covers no requirement", c.case_id));
            }
            if let Some(unknown) = c.covers.iter().find(|r| !known.contains(r.as_str())) {
                return invalid(format!("{} covers unknown requirement {unknown}", c.case_id));
            }
        }
        if !self.cases.iter().any(|c| c.scope == CaseScope::Smoke) {
            return invalid("plan has no SMOKE case");
        }
        let covered: BTreeSet<&str> = self.cases.iter().flat_map(|c| c.covers.iter().map(String::as_str)).collect();
        let uncovered: Vec<&str> = reqs.requirements.iter().map(|r| r.req_id.as_str()).filter(|id| !covered.contains(id)).collect();
        if !uncovered.is_empty() {
            return invalid(format!("uncovered requirements: {}", uncovered.join(", ")));
        }
        Ok(())
    }

    pub fn cases_in(&self, scope: CaseScope) -> impl Iterator<Item = &PlannedCase> {
        self.cases.iter().filter(move |c| c.scope == scope)
    }

    pub fn case(&self, id: &str) -> Option<&PlannedCase> {
        self.cases.iter().find(|c| c.case_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Passed,
    PartiallyPassed,
    Failed,
    CollectionError,
}

impl PlanStatus {
    pub fn from_counts(passed: u32, failed: u32, errors: u32, collection_errors: bool) -> Self {
        if collection_errors {
            PlanStatus::CollectionError
        } else if failed + errors == 0 {
            PlanStatus::Passed
        } else if passed == 0 {
            PlanStatus::Failed
        } else {
            PlanStatus::PartiallyPassed
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairAction {
    RewriteBlock,
    DeleteBlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureDirective {
    pub test: String,
    pub block_id: String,
    pub error_type: String,
    pub action: RepairAction,
    pub note: String,
}

/// Marker the analysis may put in a note to flag a planning defect.
pub const PLAN_DEFECT_TAG: &str = "plan_defect: true";

impl FailureDirective {
    pub fn is_plan_defect(&self) -> bool {
        self.note.contains(PLAN_DEFECT_TAG)
    }
}

/// Per-iteration failure localization and repair directives. Field order is
/// the serialized order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisPlan {
    pub status: PlanStatus,
    pub passed: u32,
    pub failed: u32,
    pub errors: u32,
    pub collection_errors: bool,
    pub block_limit: u32,
    pub failures: Vec<FailureDirective>,
    pub deferred: Vec<String>,
    pub stop_recommended: bool,
    pub stop_reason: String,
}

impl AnalysisPlan {
    /// A plan whose engine-owned fields come from `report`.
    pub fn skeleton(report: &ExecutionReport, block_limit: u32, deferred: Vec<String>) -> Self {
        AnalysisPlan {
            status: PlanStatus::from_counts(report.passed, report.failed, report.errors, report.collection_errors),
            passed: report.passed,
            failed: report.failed,
            errors: report.errors,
            collection_errors: report.collection_errors,
            block_limit,
            failures: Vec::new(),
            deferred,
            stop_recommended: false,
            stop_reason: String::new(),
        }
    }

    pub fn is_converged(&self) -> bool {
        self.failed == 0 && self.errors == 0 && !self.collection_errors && self.deferred.is_empty()
    }

    /// Checks the plan against the report it analyzes and the current block ids.
    pub fn validate(&self, report: &ExecutionReport, block_ids: &BTreeSet<String>) -> Result<(), ArtifactError> {
        if (self.passed, self.failed, self.errors, self.collection_errors) != (report.passed, report.failed, report.errors, report.collection_errors) {
            return invalid("plan counts differ from the execution report");
        }
        if self.status != PlanStatus::from_counts(self.passed, self.failed, self.errors, self.collection_errors) {
            return invalid("plan status inconsistent with counts");
        }
        let expected: BTreeSet<&str> = report.failing_tests().map(|t| t.test_name.as_str()).collect();
        let listed: Vec<&str> = self.failures.iter().map(|f| f.test.as_str()).collect();
        let listed_set: BTreeSet<&str> = listed.iter().copied().collect();
        if listed.len() != listed_set.len() || listed_set != expected {
            return invalid(format!("count mismatch: report has {} failing test(s), plan lists {}", expected.len(), listed.len()));
        }
        for f in &self.failures {
            if !block_ids.contains(&f.block_id) {
                return invalid(format!("block_id {} does not exist in the test file", f.block_id));
            }
            if f.error_type.trim().is_empty() {
                return invalid(format!("failure {} has an empty error_type", f.test));
            }
        }
        if self.stop_recommended && self.stop_reason.trim().is_empty() {
            return invalid("stop_recommended requires a stop_reason");
        }
        Ok(())
    }
}

/// A follow-up tool call the analysis may request before answering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToolRequest {
    Search {
        pattern: String,
        #[serde(default)]
        regex: bool,
        #[serde(default = "default_context")]
        context_lines: usize,
    },
    ReadSlice { start_line: usize, end_line: usize },
}

fn default_context() -> usize {
    2
}

/// The model-owned part of an analysis response. Count fields, if echoed,
/// are ignored; the engine owns them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct AnalysisResponse {
    #[serde(default)]
    pub failures: Vec<FailureDirective>,
    #[serde(default)]
    pub stop_recommended: bool,
    #[serde(default)]
    pub stop_reason: String,
    #[serde(default)]
    pub tool_requests: Vec<ToolRequest>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG2: &str = r#"{
  "status": "partially_passed",
  "passed": 6,
  "failed": 1,
  "errors": 0,
  "collection_errors": false,
  "block_limit": 3,
  "failures": [
    {
      "test": "TestSpectralNorm.test_invalid_dim_index_exception",
      "block_id": "CASE_12",
      "error_type": "RuntimeError",
      "action": "rewrite_block",
      "note": "A dimension mismatch occurs when dim = -1, where the tensor dimensionality does not match the required permutation ordering."
    }
  ],
  "deferred": [],
  "stop_recommended": false,
  "stop_reason": ""
}"#;

    #[test]
    fn analysis_plan_round_trips_byte_exact() {
        let plan: AnalysisPlan = serde_json::from_str(FIG2).unwrap();
        assert_eq!(serde_json::to_string_pretty(&plan).unwrap(), FIG2);
        assert_eq!(plan.status, PlanStatus::PartiallyPassed);
        assert_eq!(plan.failures[0].action, RepairAction::RewriteBlock);
    }

    #[test]
    fn extract_json_variants() {
        assert_eq!(extract_json("sure:\n```json\n{\"a\":1}\n```\nbye").unwrap()["a"], 1);
        assert_eq!(extract_json("prefix {\"a\":{\"b\":2}} suffix").unwrap()["a"]["b"], 2);
        assert!(extract_json("no json here").is_err());
    }

    #[test]
    fn requirement_kind_enum_guard() {
        let bad = r#"{"requirements":[{"req_id":"R1","kind":"other","text":"x"}]}"#;
        assert!(parse_json::<RequirementSet>(bad).is_err());
        let dup: RequirementSet = parse_json(r#"{"requirements":[{"req_id":"R1","kind":"semantic","text":"x"},{"req_id":"R1","kind":"structural","text":"y"}]}"#).unwrap();
        assert!(dup.validate().unwrap_err().to_string().contains("duplicate req_id R1"));
    }

    fn reqs(n: usize) -> RequirementSet {
        RequirementSet { requirements: (1..=n).map(|i| Requirement { req_id: format!("R{i}"), kind: RequirementKind::Semantic, text: "t".into() }).collect() }
    }

    fn case(id: &str, scope: CaseScope, covers: &[&str]) -> PlannedCase {
        PlannedCase { case_id: id.into(), title: "t".into(), category: CaseCategory::Normal, scope, covers: covers.iter().map(|s| s.to_string()).collect(), oracle_sketch: "o".into() }
    }

    #[test]
    fn plan_coverage_check_names_uncovered() {
        let plan = TestPlan { plan_version: 1, block_limit: 3, cases: vec![case("CASE_1", CaseScope::Smoke, &["R1", "R2"]), case("CASE_2", CaseScope::Deferred, &["R4"])] };
        let err = plan.validate(&reqs(4)).unwrap_err().to_string();
        assert!(err.contains("R3"), "{err}");
        let no_smoke = TestPlan { plan_version: 1, block_limit: 3, cases: vec![case("CASE_1", CaseScope::Deferred, &["R1"])] };
        assert!(no_smoke.validate(&reqs(1)).is_err());
        let bad_id = TestPlan { plan_version: 1, block_limit: 3, cases: vec![case("CASE_01", CaseScope::Smoke, &["R1"])] };
        assert!(bad_id.validate(&reqs(1)).is_err());
    }

    #[test]
    fn status_from_counts() {
        assert_eq!(PlanStatus::from_counts(7, 0, 0, false), PlanStatus::Passed);
        assert_eq!(PlanStatus::from_counts(6, 1, 0, false), PlanStatus::PartiallyPassed);
        assert_eq!(PlanStatus::from_counts(0, 2, 1, false), PlanStatus::Failed);
        assert_eq!(PlanStatus::from_counts(0, 0, 0, true), PlanStatus::CollectionError);
    }
}
