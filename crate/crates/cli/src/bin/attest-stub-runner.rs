//! Deterministic stand-in for a pytest + coverage adapter.
//!
//! Usage: `attest-stub-runner TEST_FILE RESULTS_OUT COVERAGE_OUT [--manifest PATH]`
//!
//! Nothing is executed. Outcomes come from comment annotations in the test
//! file:
//!
//! - `# stub-collect: <ErrorType>: <message>` anywhere: the module fails to
//!   import; a collection failure is reported and no coverage is written.
//! - `# stub-outcome: pass` or `# stub-outcome: fail <ErrorType>: <message>`
//!   inside a test function (default: pass).
//! - `# stub-covers: 1-30, 41` inside a test function: branch ids of the first
//!   manifest subject exercised by that test; `path: ranges` names another.
//!
//! Branch totals come from the manifest (`manifest.json` in the working
//! directory by default): `{"subject_files": {"path": {"total_branches": n}}}`.
//! The log mimics pytest's layout so failure sections can be mined.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Deserialize)]
struct Manifest {
    subject_files: BTreeMap<String, SubjectEntry>,
}

#[derive(Deserialize)]
struct SubjectEntry {
    total_branches: u64,
}

#[derive(Debug, Clone, PartialEq)]
enum Outcome {
    Pass,
    Fail { error_type: String, message: String },
}

#[derive(Debug)]
struct StubTest {
    class: Option<String>,
    name: String,
    line: usize,
    /// First statement of the body, echoed in the traceback.
    first_stmt: Option<String>,
    outcome: Outcome,
    covers: Vec<(Option<String>, BTreeSet<u64>)>,
}

struct Parsed {
    collect_error: Option<(String, String)>,
    tests: Vec<StubTest>,
}

fn parse_ranges(spec: &str) -> Result<BTreeSet<u64>> {
    let mut out = BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
                if a > b {
                    bail!("descending range {part}");
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse()?);
            }
        }
    }
    Ok(out)
}

fn split_error(text: &str) -> (String, String) {
    match text.split_once(':') {
        Some((ty, msg)) => (ty.trim().to_string(), msg.trim().to_string()),
        None => (text.trim().to_string(), String::new()),
    }
}

fn parse_test_file(text: &str) -> Result<Parsed> {
    let mut parsed = Parsed { collect_error: None, tests: Vec::new() };
    let mut class: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_start();
        let indented = raw.len() != line.len();
        if let Some(rest) = line.strip_prefix("class ") {
            class = Some(rest.split(['(', ':']).next().unwrap_or("").trim().to_string());
            continue;
        }
        if !indented && !line.is_empty() && !line.starts_with('#') && !line.starts_with('@') {
            class = None;
        }
        if let Some(rest) = line.strip_prefix("def ") {
            let name = rest.split('(').next().unwrap_or("").trim();
            if name.starts_with("test") {
                let class = if indented { class.clone() } else { None };
                parsed.tests.push(StubTest { class, name: name.to_string(), line: i + 1, first_stmt: None, outcome: Outcome::Pass, covers: Vec::new() });
            }
            continue;
        }
        let Some(annotation) = line.strip_prefix("# stub-") else {
            if let Some(t) = parsed.tests.last_mut().filter(|t| t.first_stmt.is_none() && indented && !line.starts_with('#')) {
                t.first_stmt = Some(line.to_string());
            }
            continue;
        };
        let (key, value) = annotation.split_once(':').with_context(|| format!("line {}: malformed annotation", i + 1))?;
        let value = value.trim();
        match key {
            "collect" => parsed.collect_error = Some(split_error(value)),
            "outcome" => {
                let test = parsed.tests.last_mut().with_context(|| format!("line {}: outcome outside a test", i + 1))?;
                test.outcome = match value.split_once(' ') {
                    None if value == "pass" => Outcome::Pass,
                    Some(("fail", err)) => {
                        let (error_type, message) = split_error(err);
                        Outcome::Fail { error_type, message }
                    }
                    _ => bail!("line {}: unknown outcome `{value}`", i + 1),
                };
            }
            "covers" => {
                let test = parsed.tests.last_mut().with_context(|| format!("line {}: covers outside a test", i + 1))?;
                let (file, ranges) = match value.rsplit_once(':') {
                    Some((f, r)) => (Some(f.trim().to_string()), r),
                    None => (None, value),
                };
                test.covers.push((file, parse_ranges(ranges).with_context(|| format!("line {}: bad branch ids", i + 1))?));
            }
            other => bail!("line {}: unknown annotation stub-{other}", i + 1),
        }
    }
    Ok(parsed)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn rule(title: &str, fill: char) -> String {
    let side = 30usize.saturating_sub(title.len() / 2).max(3);
    let bar: String = std::iter::repeat_n(fill, side).collect();
    format!("{bar} {title} {bar}")
}

fn run(test_file: &Path, results_out: &Path, coverage_out: &Path, manifest_path: &Path) -> Result<u8> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?)
        .context("parsing manifest")?;
    let text = std::fs::read_to_string(test_file).with_context(|| format!("reading {}", test_file.display()))?;
    let parsed = parse_test_file(&text)?;
    let rel_name = test_file.file_name().map(|n| format!("tests/{}", n.to_string_lossy())).unwrap_or_default();

    println!("{}", rule("test session starts", '='));
    if let Some((error_type, message)) = &parsed.collect_error {
        println!("collected 0 items / 1 error\n");
        println!("{}", rule("ERRORS", '='));
        println!("{}", rule(&format!("ERROR collecting {rel_name}"), '_'));
        println!("ImportError while importing test module '{rel_name}'.");
        println!("E   {error_type}: {message}");
        println!("{}", rule("1 error", '='));
        let xml = format!(
            "<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<testsuites><testsuite name=\"pytest\" errors=\"1\" failures=\"0\" tests=\"1\"><testcase classname=\"\" name=\"{}\"><error message=\"collection failure: {}\">{}: {}</error></testcase></testsuite></testsuites>\n",
            xml_escape(&rel_name),
            xml_escape(error_type),
            xml_escape(error_type),
            xml_escape(message)
        );
        std::fs::write(results_out, xml)?;
        return Ok(2);
    }

    println!("collected {} items\n", parsed.tests.len());
    let qualified = |t: &StubTest| match &t.class {
        Some(c) => format!("{c}.{}", t.name),
        None => t.name.clone(),
    };
    let failing: Vec<&StubTest> = parsed.tests.iter().filter(|t| t.outcome != Outcome::Pass).collect();
    if !failing.is_empty() {
        println!("{}", rule("FAILURES", '='));
        for t in &failing {
            let Outcome::Fail { error_type, message } = &t.outcome else { continue };
            println!("{}", rule(&qualified(t), '_'));
            println!();
            println!("    def {}(self):", t.name);
            println!(">       {}", t.first_stmt.as_deref().unwrap_or("pass"));
            println!();
            println!("E   {error_type}: {message}");
            println!();
            println!("{rel_name}:{}: {error_type}", t.line);
        }
    }
    println!("{}", rule("short test summary info", '='));
    for t in &failing {
        if let Outcome::Fail { error_type, message } = &t.outcome {
            println!("FAILED {rel_name}::{} - {error_type}: {message}", qualified(t).replace('.', "::"));
        }
    }
    let passed = parsed.tests.len() - failing.len();
    println!("{}", rule(&format!("{} failed, {passed} passed", failing.len()), '='));

    let mut xml = format!(
        "<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<testsuites><testsuite name=\"pytest\" errors=\"0\" failures=\"{}\" tests=\"{}\">\n",
        failing.len(),
        parsed.tests.len()
    );
    for t in &parsed.tests {
        let class = t.class.clone().unwrap_or_default();
        match &t.outcome {
            Outcome::Pass => xml.push_str(&format!("<testcase classname=\"{}\" name=\"{}\" time=\"0.001\"/>\n", xml_escape(&class), xml_escape(&t.name))),
            Outcome::Fail { error_type, message } => xml.push_str(&format!(
                "<testcase classname=\"{}\" name=\"{}\" time=\"0.001\"><failure message=\"{}: {}\">{}</failure></testcase>\n",
                xml_escape(&class),
                xml_escape(&t.name),
                xml_escape(error_type),
                xml_escape(message),
                xml_escape(error_type)
            )),
        }
    }
    xml.push_str("</testsuite></testsuites>\n");
    std::fs::write(results_out, xml)?;

    let first = manifest.subject_files.keys().next().cloned();
    let mut covered: BTreeMap<String, BTreeSet<u64>> = BTreeMap::new();
    for t in &parsed.tests {
        for (file, ids) in &t.covers {
            let file = file.clone().or_else(|| first.clone()).context("manifest lists no subject files")?;
            covered.entry(file).or_default().extend(ids);
        }
    }
    let mut files = serde_json::Map::new();
    for (path, entry) in &manifest.subject_files {
        let hits = covered.get(path).map_or(0, |ids| ids.iter().filter(|&&b| b >= 1 && b <= entry.total_branches).count() as u64);
        files.insert(path.clone(), serde_json::json!({"covered_branches": hits, "total_branches": entry.total_branches}));
    }
    let doc = serde_json::json!({ "files": files });
    std::fs::write(coverage_out, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(if failing.is_empty() { 0 } else { 1 })
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (positional, manifest) = match args.iter().position(|a| a == "--manifest") {
        Some(i) if i + 1 < args.len() => {
            let mut rest = args.clone();
            let m = rest.remove(i + 1);
            rest.remove(i);
            (rest, PathBuf::from(m))
        }
        _ => (args, PathBuf::from("manifest.json")),
    };
    if positional.len() != 3 {
        eprintln!("usage: attest-stub-runner TEST_FILE RESULTS_OUT COVERAGE_OUT [--manifest PATH]");
        return ExitCode::from(4);
    }
    match run(Path::new(&positional[0]), Path::new(&positional[1]), Path::new(&positional[2]), &manifest) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("stub runner: {e:#}");
            ExitCode::from(4)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotations() {
        let text = "class TestX:\n    def test_a(self):\n        # stub-covers: 1-3, 7\n        pass\n    def test_b(self):\n        # stub-outcome: fail ValueError: bad\n        pass\n";
        let p = parse_test_file(text).unwrap();
        assert_eq!(p.tests.len(), 2);
        assert_eq!(p.tests[0].class.as_deref(), Some("TestX"));
        assert_eq!(p.tests[0].covers[0].1, BTreeSet::from([1, 2, 3, 7]));
        assert_eq!(p.tests[1].outcome, Outcome::Fail { error_type: "ValueError".into(), message: "bad".into() });
        assert!(parse_test_file("# stub-outcome: pass\n").is_err());
        assert!(parse_ranges("5-2").is_err());
    }
}
