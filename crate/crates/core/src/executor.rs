//! Subprocess test execution and normalization of runner output.
//!
//! The configured command is spawned with a scrubbed environment in its own
//! process group, so a timeout can terminate the whole tree. Two result
//! formats are understood: JUnit-style XML and a JSON summary. Coverage is
//! read from the normalized `{"files":{path:{"covered_branches":n,"total_branches":m}}}`
//! document, or from coverage.py's native JSON report.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io;
use std::os::unix::process::CommandExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pct::ratio_pct;

pub const PLACEHOLDERS: [&str; 3] = ["{test_file}", "{results_out}", "{coverage_out}"];

/// Hard upper bound on time spent reaping a killed process group.
pub const KILL_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("runner config: {0}")]
    Config(String),
    #[error("environment: {0}")]
    Environment(String),
    #[error("protocol: {message}; log starts with: {log_head:?}")]
    Protocol { message: String, log_head: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultsFormat {
    #[default]
    Junit,
    Json,
}

impl ResultsFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            ResultsFormat::Junit => "results.xml",
            ResultsFormat::Json => "results.json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunnerConfig {
    /// Argument template; `{test_file}`, `{results_out}` and `{coverage_out}` are substituted.
    pub command_template: String,
    pub working_dir: PathBuf,
    pub timeout_secs: u64,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub results_format: ResultsFormat,
    /// Files whose branches count toward coverage.
    #[serde(default)]
    pub subject_files: Vec<PathBuf>,
}

impl RunnerConfig {
    pub fn validate(&self) -> Result<(), ExecError> {
        for p in PLACEHOLDERS {
            if !self.command_template.contains(p) {
                return Err(ExecError::Config(format!("command_template is missing placeholder {p}")));
            }
        }
        match shlex::split(&self.command_template) {
            Some(argv) if !argv.is_empty() => {}
            _ => return Err(ExecError::Config("command_template does not split into arguments".into())),
        }
        if self.timeout_secs == 0 {
            return Err(ExecError::Config("timeout_secs must be positive".into()));
        }
        if !self.working_dir.is_dir() {
            return Err(ExecError::Config(format!("working_dir {} does not exist", self.working_dir.display())));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    /// The argument vector with placeholders replaced.
    pub fn argv(&self, test_file: &Path, results_out: &Path, coverage_out: &Path) -> Result<Vec<String>, ExecError> {
        let argv = shlex::split(&self.command_template)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| ExecError::Config("command_template does not split into arguments".into()))?;
        Ok(argv
            .into_iter()
            .map(|a| {
                a.replace("{test_file}", &test_file.to_string_lossy())
                    .replace("{results_out}", &results_out.to_string_lossy())
                    .replace("{coverage_out}", &coverage_out.to_string_lossy())
            })
            .collect())
    }
}

/// Files produced by one runner invocation, plus how it ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRunArtifacts {
    pub run_dir: PathBuf,
    pub results_path: PathBuf,
    pub results_format: ResultsFormat,
    pub coverage_path: PathBuf,
    pub log_path: PathBuf,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
    pub duration_ms: u64,
}

#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    command: &'a [String],
    exit_code: Option<i32>,
    timed_out: bool,
    duration_ms: u64,
    results_format: ResultsFormat,
    subject_files: &'a [PathBuf],
}

/// Environment variables carried over from the engine, whatever their value.
const BASE_ENV: [&str; 3] = ["PATH", "HOME", "TMPDIR"];

/// Spawns the configured command for `test_file`, writing `log.txt`,
/// the results file, `coverage.json` and `meta.json` into `run_dir`.
pub fn run(config: &RunnerConfig, test_file: &Path, run_dir: &Path) -> Result<RawRunArtifacts, ExecError> {
    config.validate()?;
    if !test_file.is_file() {
        return Err(ExecError::Config(format!("test file {} does not exist", test_file.display())));
    }
    fs::create_dir_all(run_dir)?;
    let results_path = run_dir.join(config.results_format.file_name());
    let coverage_path = run_dir.join("coverage.json");
    let log_path = run_dir.join("log.txt");
    for stale in [&results_path, &coverage_path] {
        if stale.exists() {
            fs::remove_file(stale)?;
        }
    }
    let argv = config.argv(test_file, &results_path, &coverage_path)?;

    let log = File::create(&log_path)?;
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(&config.working_dir)
        .env_clear()
        .env("LANG", "C.UTF-8")
        .stdin(Stdio::null())
        .stdout(Stdio::from(log.try_clone()?))
        .stderr(Stdio::from(log))
        .process_group(0);
    for key in BASE_ENV {
        if let Some(v) = std::env::var_os(key) {
            cmd.env(key, v);
        }
    }
    cmd.envs(&config.env);

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|e| ExecError::Environment(format!("cannot spawn `{}`: {e}", argv[0])))?;
    let pgid = child.id() as libc::pid_t;
    let deadline = started + config.timeout();
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            // SAFETY: signalling our own child's process group.
            unsafe {
                libc::kill(-pgid, libc::SIGKILL);
            }
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    let duration_ms = started.elapsed().as_millis() as u64;

    let artifacts = RawRunArtifacts {
        run_dir: run_dir.to_path_buf(),
        results_path,
        results_format: config.results_format,
        coverage_path,
        log_path,
        exit_code: status.code(),
        timed_out,
        duration_ms,
    };
    let meta = RunMeta {
        command: &argv,
        exit_code: artifacts.exit_code,
        timed_out,
        duration_ms,
        results_format: config.results_format,
        subject_files: &config.subject_files,
    };
    fs::write(run_dir.join("meta.json"), serde_json::to_vec_pretty(&meta).expect("meta serializes"))?;
    Ok(artifacts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracebackRef {
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test_name: String,
    pub status: TestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceback_ref: Option<TracebackRef>,
}

/// Normalized outcome of one execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub passed: u32,
    pub failed: u32,
    pub errors: u32,
    pub collection_errors: bool,
    pub tests: Vec<TestOutcome>,
    pub branch_coverage_pct: f64,
    pub duration_ms: u64,
    #[serde(default)]
    pub timed_out: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ExecutionReport {
    fn from_tests(tests: Vec<TestOutcome>, duration_ms: u64) -> Self {
        let count = |s: TestStatus| tests.iter().filter(|t| t.status == s).count() as u32;
        ExecutionReport {
            passed: count(TestStatus::Pass),
            failed: count(TestStatus::Fail),
            errors: count(TestStatus::Error),
            collection_errors: false,
            tests,
            branch_coverage_pct: 0.0,
            duration_ms,
            timed_out: false,
            warnings: Vec::new(),
        }
    }

    fn collection_error(duration_ms: u64, warning: String) -> Self {
        ExecutionReport {
            passed: 0,
            failed: 0,
            errors: 0,
            collection_errors: true,
            tests: Vec::new(),
            branch_coverage_pct: 0.0,
            duration_ms,
            timed_out: false,
            warnings: vec![warning],
        }
    }

    pub fn failing_tests(&self) -> impl Iterator<Item = &TestOutcome> {
        self.tests.iter().filter(|t| t.status != TestStatus::Pass)
    }

    pub fn is_clean(&self) -> bool {
        !self.collection_errors && self.failed == 0 && self.errors == 0
    }
}

fn log_head(path: &Path) -> String {
    fs::read(path).map(|b| String::from_utf8_lossy(&b).chars().take(500).collect()).unwrap_or_default()
}

fn protocol(artifacts: &RawRunArtifacts, message: impl Into<String>) -> ExecError {
    ExecError::Protocol { message: message.into(), log_head: log_head(&artifacts.log_path) }
}

/// Normalizes the runner's results document into an [`ExecutionReport`]
/// with coverage left at zero.
pub fn parse_results(artifacts: &RawRunArtifacts) -> Result<ExecutionReport, ExecError> {
    let duration = artifacts.duration_ms;
    if artifacts.timed_out {
        let mut report = ExecutionReport::collection_error(duration, "runner timed out".into());
        report.timed_out = true;
        return Ok(report);
    }
    if !artifacts.results_path.is_file() {
        return match artifacts.exit_code {
            Some(0) => Err(protocol(artifacts, "runner exited 0 without writing a results file")),
            code => Ok(ExecutionReport::collection_error(duration, format!("no results file; runner exit status {code:?}"))),
        };
    }
    let text = fs::read_to_string(&artifacts.results_path)?;
    let parsed = match artifacts.results_format {
        ResultsFormat::Junit => parse_junit(&text),
        ResultsFormat::Json => parse_json_summary(&text),
    };
    let parsed = parsed.map_err(|e| protocol(artifacts, format!("unparseable results: {e}")))?;
    Ok(match parsed {
        Parsed::CollectionError(why) => ExecutionReport::collection_error(duration, why),
        Parsed::Tests(tests) if tests.is_empty() => ExecutionReport::collection_error(duration, "no tests were collected".into()),
        Parsed::Tests(tests) => ExecutionReport::from_tests(tests, duration),
    })
}

enum Parsed {
    Tests(Vec<TestOutcome>),
    CollectionError(String),
}

fn qualified(classname: &str, name: &str) -> String {
    if classname.is_empty() {
        name.to_string()
    } else {
        format!("{classname}.{name}")
    }
}

fn parse_junit(text: &str) -> Result<Parsed, String> {
    let doc = roxmltree::Document::parse(text).map_err(|e| e.to_string())?;
    let root = doc.root_element();
    if root.tag_name().name() != "testsuites" && root.tag_name().name() != "testsuite" {
        return Err(format!("unexpected root element <{}>", root.tag_name().name()));
    }
    let mut tests = Vec::new();
    for case in root.descendants().filter(|n| n.has_tag_name("testcase")) {
        let name = case.attribute("name").ok_or("testcase without name")?;
        let classname = case.attribute("classname").unwrap_or("");
        let child = |tag: &str| case.children().find(|c| c.has_tag_name(tag));
        if let Some(err) = child("error") {
            if err.attribute("message").is_some_and(|m| m.starts_with("collection failure")) {
                return Ok(Parsed::CollectionError(format!("collection failure in {name}")));
            }
        }
        let status = if child("failure").is_some() {
            TestStatus::Fail
        } else if child("error").is_some() {
            TestStatus::Error
        } else if child("skipped").is_some() {
            continue;
        } else {
            TestStatus::Pass
        };
        tests.push(TestOutcome { test_name: qualified(classname, name), status, traceback_ref: None });
    }
    Ok(Parsed::Tests(tests))
}

#[derive(Deserialize)]
struct JsonSummary {
    #[serde(default)]
    collection_errors: bool,
    #[serde(default)]
    tests: Vec<JsonTest>,
}

#[derive(Deserialize)]
struct JsonTest {
    #[serde(default)]
    name: Option<String>,
    /// pytest-json-report style `path::Class::test`
    #[serde(default)]
    nodeid: Option<String>,
    outcome: String,
}

fn parse_json_summary(text: &str) -> Result<Parsed, String> {
    let summary: JsonSummary = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if summary.collection_errors {
        return Ok(Parsed::CollectionError("runner reported collection errors".into()));
    }
    let mut tests = Vec::new();
    for t in summary.tests {
        let name = match (t.name, t.nodeid) {
            (Some(n), _) => n,
            (None, Some(node)) => {
                let mut parts: Vec<&str> = node.split("::").collect();
                if parts.len() > 1 {
                    parts.remove(0);
                }
                parts.join(".")
            }
            (None, None) => return Err("test entry without name".into()),
        };
        let status = match t.outcome.as_str() {
            "passed" | "pass" | "xpassed" => TestStatus::Pass,
            "failed" | "fail" => TestStatus::Fail,
            "error" => TestStatus::Error,
            "skipped" | "xfailed" => continue,
            other => return Err(format!("unknown outcome `{other}` for {name}")),
        };
        tests.push(TestOutcome { test_name: name, status, traceback_ref: None });
    }
    Ok(Parsed::Tests(tests))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileBranches {
    pub covered_branches: u64,
    pub total_branches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCoverage {
    pub files: BTreeMap<String, FileBranches>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageSummary {
    pub branch_coverage_pct: f64,
    pub covered: u64,
    pub total: u64,
    /// Subject-restricted per-file counts, keyed as in the source document.
    pub normalized: NormalizedCoverage,
    /// The source document used coverage.py's native layout.
    pub was_native: bool,
    pub warnings: Vec<String>,
}

/// Reads either the normalized layout or coverage.py's `files.<f>.summary`.
pub fn read_coverage_document(text: &str) -> Result<(NormalizedCoverage, bool), String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let files = value.get("files").and_then(|f| f.as_object()).ok_or("missing `files` object")?;
    let mut out = BTreeMap::new();
    let mut native = false;
    for (path, entry) in files {
        let (covered, total) = if let Some(summary) = entry.get("summary") {
            native = true;
            (summary.get("covered_branches"), summary.get("num_branches"))
        } else {
            (entry.get("covered_branches"), entry.get("total_branches"))
        };
        let covered = covered.and_then(|v| v.as_u64()).ok_or_else(|| format!("{path}: missing covered branch count"))?;
        let total = total.and_then(|v| v.as_u64()).ok_or_else(|| format!("{path}: missing total branch count"))?;
        out.insert(path.clone(), FileBranches { covered_branches: covered, total_branches: total });
    }
    Ok((NormalizedCoverage { files: out }, native))
}

fn lexical_normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

fn same_file(report_key: &Path, subject: &Path, working_dir: &Path) -> bool {
    let key = if report_key.is_absolute() { lexical_normalize(report_key) } else { lexical_normalize(&working_dir.join(report_key)) };
    let subject = lexical_normalize(subject);
    key == subject || (report_key.is_relative() && subject.ends_with(lexical_normalize(report_key)))
}

/// Branch coverage over `subject_files` only, rounded half-up to two decimals.
pub fn parse_coverage(artifacts: &RawRunArtifacts, subject_files: &[PathBuf], working_dir: &Path) -> Result<CoverageSummary, ExecError> {
    let succeeded = artifacts.exit_code == Some(0) || artifacts.results_path.is_file();
    if !artifacts.coverage_path.is_file() {
        if artifacts.exit_code == Some(0) {
            return Err(protocol(artifacts, "coverage file absent after a successful run"));
        }
        return Ok(CoverageSummary {
            branch_coverage_pct: 0.0,
            covered: 0,
            total: 0,
            normalized: NormalizedCoverage { files: BTreeMap::new() },
            was_native: false,
            warnings: vec![if succeeded { "coverage file absent".into() } else { "run failed before coverage was written".into() }],
        });
    }
    let text = fs::read_to_string(&artifacts.coverage_path)?;
    let (doc, was_native) = read_coverage_document(&text).map_err(|e| protocol(artifacts, format!("unparseable coverage: {e}")))?;
    let mut warnings = Vec::new();
    let mut restricted = BTreeMap::new();
    for subject in subject_files {
        let hit = doc.files.iter().find(|(key, _)| same_file(Path::new(key), subject, working_dir));
        match hit {
            Some((key, counts)) => {
                restricted.insert(key.clone(), *counts);
            }
            None => warnings.push(format!("subject file {} not present in coverage report", subject.display())),
        }
    }
    let covered: u64 = restricted.values().map(|c| c.covered_branches.min(c.total_branches)).sum();
    let total: u64 = restricted.values().map(|c| c.total_branches).sum();
    if total == 0 {
        warnings.push("no branches to cover in subject files".into());
    }
    Ok(CoverageSummary {
        branch_coverage_pct: ratio_pct(covered, total),
        covered,
        total,
        normalized: NormalizedCoverage { files: restricted },
        was_native,
        warnings,
    })
}
