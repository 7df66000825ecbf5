#![allow(dead_code)]

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

pub const ATTEST: &str = env!("CARGO_BIN_EXE_attest");
pub const STUB: &str = env!("CARGO_BIN_EXE_attest-stub-runner");

pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/demo")
}

pub fn demo_config() -> PathBuf {
    demo_dir().join("attest.toml")
}

/// Runs `attest` with the stub runner on PATH.
pub fn attest(args: &[&str], env: &[(&str, &str)], stdin: Option<&str>) -> Output {
    let bin_dir = Path::new(STUB).parent().unwrap();
    let path = format!("{}:{}", bin_dir.display(), std::env::var("PATH").unwrap_or_default());
    let mut cmd = Command::new(ATTEST);
    cmd.args(args).env("PATH", path).env_remove("ATTEST_HALT_AFTER").env_remove("VISUAL").env_remove("EDITOR");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = cmd.spawn().expect("attest binary runs");
    {
        let mut pipe = child.stdin.take().unwrap();
        if let Some(text) = stdin {
            pipe.write_all(text.as_bytes()).unwrap();
        }
    }
    child.wait_with_output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// Initializes a demo workspace at `<dir>/ws`.
pub fn init_demo(dir: &Path) -> PathBuf {
    let ws = dir.join("ws");
    let out = attest(&["init", ws.to_str().unwrap(), "--config", demo_config().to_str().unwrap()], &[], None);
    assert_eq!(code(&out), 0, "init failed: {}", stderr(&out));
    ws
}

pub fn read_report(ws: &Path) -> String {
    std::fs::read_to_string(ws.join("reports/final_report.md")).expect("final report exists")
}

/// Replaces RFC 3339 timestamps, the only run-dependent part of a report.
pub fn mask_timestamps(text: &str) -> String {
    let re = regex::Regex::new(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(?:\.\d+)?Z").unwrap();
    re.replace_all(text, "<ts>").into_owned()
}
