#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use attest_core::config::ConfigFile;
use attest_core::llm::{CallSlot, FnBackend, LlmError, LlmGateway, LlmRequest};
use attest_core::prompts::PromptSet;
use attest_core::stage::StageId;
use attest_core::stages::StageServices;
use attest_core::state::{init_workspace, TargetRef, WorkflowState};

/// Shell stand-in for pytest: a test file containing `FAILME` fails one
/// test and covers half the branches; otherwise both pass with full cover.
pub const RUNNER: &str = r#"#!/bin/sh
tf="$1"; res="$2"; cov="$3"
if [ -n "$RUNNER_SLEEP" ]; then sleep "$RUNNER_SLEEP"; fi
if grep -q FAILME "$tf"; then
  echo "=================================== FAILURES ==================================="
  echo "______________________________ TestToy.test_two ______________________________"
  echo ">       assert scale(FAILME) == 2"
  echo "E   ValueError: boom"
  echo "tests/test_scale.py:9: ValueError"
  echo "========================= 1 failed, 1 passed ========================="
  cat > "$res" <<XML
<?xml version="1.0" encoding="utf-8"?>
<testsuites><testsuite name="pytest" errors="0" failures="1" tests="2">
<testcase classname="TestToy" name="test_one"/>
<testcase classname="TestToy" name="test_two"><failure message="ValueError: boom">ValueError</failure></testcase>
</testsuite></testsuites>
XML
  echo '{"files": {"toy.py": {"covered_branches": 5, "total_branches": 10}}}' > "$cov"
  exit 1
fi
echo "========================= 2 passed ========================="
cat > "$res" <<XML
<?xml version="1.0" encoding="utf-8"?>
<testsuites><testsuite name="pytest" errors="0" failures="0" tests="2">
<testcase classname="TestToy" name="test_one"/>
<testcase classname="TestToy" name="test_two"/>
</testsuite></testsuites>
XML
echo '{"files": {"toy.py": {"covered_branches": 10, "total_branches": 10}}}' > "$cov"
"#;

pub const UNDERSTAND: &str = "```json\n{\"observed_constraints\": [\"x must be a number\"]}\n```";
pub const REQUIREMENTS: &str = r#"{"requirements": [{"req_id": "R1", "kind": "semantic", "text": "scale doubles its input"}]}"#;
pub const PLAN: &str = r#"{"plan_version": 1, "block_limit": 3, "cases": [
 {"case_id": "CASE_1", "title": "one", "category": "normal", "scope": "SMOKE", "covers": ["R1"], "oracle_sketch": "2"},
 {"case_id": "CASE_2", "title": "two", "category": "normal", "scope": "SMOKE", "covers": ["R1"], "oracle_sketch": "4"}]}"#;
pub const FILE: &str = "```python\n# ATTEST-BLOCK-BEGIN: HEADER\nfrom toy import scale\n\n\nclass TestToy:\n# ATTEST-BLOCK-END: HEADER\n# ATTEST-BLOCK-BEGIN: CASE_1\n    def test_one(self):\n        assert scale(1) == 2\n# ATTEST-BLOCK-END: CASE_1\n# ATTEST-BLOCK-BEGIN: CASE_2\n    def test_two(self):\n        assert scale(FAILME) == 2\n# ATTEST-BLOCK-END: CASE_2\n# ATTEST-BLOCK-BEGIN: FOOTER\n# ATTEST-BLOCK-END: FOOTER\n```";
pub const ANALYSIS: &str = r#"{"failures": [{"test": "TestToy.test_two", "block_id": "CASE_2", "error_type": "ValueError", "action": "rewrite_block", "note": "use a number"}], "stop_recommended": false, "stop_reason": ""}"#;
pub const REPAIR: &str = "```python\n    def test_two(self):\n        assert scale(2) == 4\n```";

/// Canned answer per stage for the toy scenario.
pub fn toy_answer(req: &LlmRequest) -> Result<String, LlmError> {
    Ok(match req.stage {
        StageId::Understand => UNDERSTAND,
        StageId::Requirements => REQUIREMENTS,
        StageId::Plan => PLAN,
        StageId::GenerateCode if req.iteration == 0 => FILE,
        StageId::GenerateCode => REPAIR,
        StageId::Analyze => ANALYSIS,
        other => panic!("unexpected model call from {other}"),
    }
    .to_string())
}

pub struct Toy {
    pub dir: tempfile::TempDir,
    pub state: WorkflowState,
}

impl Toy {
    pub fn root(&self) -> PathBuf {
        self.state.workspace_root.clone()
    }
}

/// Workspace for `toy.scale` with the shell runner; `extra_top` goes at the
/// config file's top level, `budget` into `[budget]`.
pub fn toy(extra_top: &str, budget: &str) -> Toy {
    toy_with(extra_top, budget, "")
}

/// Like [`toy`], with extra keys for the `[runner]` table.
pub fn toy_with(extra_top: &str, budget: &str, runner_extra: &str) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("toy.py");
    std::fs::write(&src, "def scale(x):\n    if not isinstance(x, (int, float)):\n        raise ValueError('x')\n    return 2 * x\n").unwrap();
    let runner = dir.path().join("runner.sh");
    std::fs::write(&runner, RUNNER).unwrap();
    let doc = format!(
        r#"{extra_top}
[budget]
{budget}

[llm]
backend = "live"

[runner]
command_template = "sh {runner} {{test_file}} {{results_out}} {{coverage_out}}"
working_dir = "."
timeout_secs = 20
results_format = "junit"
subject_files = ["toy.py"]
{runner_extra}
"#,
        runner = runner.display()
    );
    let cfg = ConfigFile::parse(&doc, dir.path()).unwrap().snapshot;
    let target = TargetRef { module_path: "toy".into(), function_name: "scale".into(), source_file: src };
    let state = init_workspace(&dir.path().join("ws"), target, cfg, false).unwrap();
    Toy { dir, state }
}

/// Services over a closure backend; every request is also logged.
pub fn services<F>(log: Arc<Mutex<Vec<LlmRequest>>>, mut answer: F) -> StageServices
where
    F: FnMut(&LlmRequest, CallSlot) -> Result<String, LlmError> + Send + 'static,
{
    let backend = FnBackend(move |req: &LlmRequest, slot: CallSlot| {
        log.lock().unwrap().push(req.clone());
        answer(req, slot)
    });
    StageServices::new(LlmGateway::new(Box::new(backend), None), PromptSet::builtin())
}

pub fn toy_services() -> StageServices {
    services(Arc::new(Mutex::new(Vec::new())), |req, _| toy_answer(req))
}

pub fn read(root: &Path, rel: &str) -> String {
    std::fs::read_to_string(root.join(rel)).unwrap()
}
