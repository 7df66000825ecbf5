//! Selective log ingestion.
//!
//! Runner logs can be large; only failure sections are read, through two
//! streaming primitives ([`search`] and [`read_slice`]). A failure section
//! starts at a pytest-style delimiter line (`____ Class.test_name ____`) and
//! runs until the next delimiter or `====` banner.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNLOCATED: &str = "UNLOCATED";
pub const UNKNOWN_ERROR: &str = "UNKNOWN";
pub const DEFAULT_MAX_MATCHES: usize = 100;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("invalid pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("invalid line range {start}..={end}")]
    Range { start: usize, end: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentBudget {
    pub per_fragment_chars: usize,
    pub total_chars: usize,
    pub tail_lines: usize,
}

impl Default for FragmentBudget {
    fn default() -> Self {
        FragmentBudget { per_fragment_chars: 2_000, total_chars: 6_000, tail_lines: 30 }
    }
}

impl FragmentBudget {
    pub fn validate(&self) -> Result<(), String> {
        if self.per_fragment_chars == 0 || self.total_chars == 0 || self.tail_lines == 0 {
            return Err("fragment budget values must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub path: String,
    pub start_line: usize,
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFragment {
    pub test_name: String,
    pub error_type: String,
    pub excerpt: String,
    pub source_span: SourceSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLine {
    pub line_no: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub line_no: usize,
    pub line: String,
    /// Lines `line_no - k ..= line_no + k`, clipped to the file.
    pub context: Vec<ContextLine>,
}

#[derive(Debug, Clone)]
pub enum Pattern {
    Literal(String),
    Regex(Regex),
}

impl Pattern {
    pub fn regex(re: &str) -> Result<Self, LogError> {
        Ok(Pattern::Regex(Regex::new(re)?))
    }

    fn is_match(&self, line: &str) -> bool {
        match self {
            Pattern::Literal(s) => line.contains(s.as_str()),
            Pattern::Regex(re) => re.is_match(line),
        }
    }
}

fn read_line_lossy<R: BufRead>(reader: &mut R, buf: &mut Vec<u8>) -> io::Result<Option<String>> {
    buf.clear();
    if reader.read_until(b'\n', buf)? == 0 {
        return Ok(None);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
    }
    Ok(Some(String::from_utf8_lossy(buf).into_owned()))
}

/// Streams `reader`, returning every line matching `pattern` (up to
/// `max_matches`) with `context_lines` of symmetric context.
pub fn search_reader<R: BufRead>(mut reader: R, pattern: &Pattern, context_lines: usize, max_matches: usize) -> io::Result<Vec<SearchHit>> {
    let mut hits: Vec<SearchHit> = Vec::new();
    // hits still collecting trailing context: (index into hits, last line wanted)
    let mut pending: Vec<(usize, usize)> = Vec::new();
    let mut before: VecDeque<ContextLine> = VecDeque::with_capacity(context_lines + 1);
    let mut buf = Vec::new();
    let mut line_no = 0;
    while let Some(line) = read_line_lossy(&mut reader, &mut buf)? {
        line_no += 1;
        pending.retain(|&(idx, last)| {
            hits[idx].context.push(ContextLine { line_no, text: line.clone() });
            line_no < last
        });
        if hits.len() < max_matches && pattern.is_match(&line) {
            let mut context: Vec<ContextLine> = before.iter().cloned().collect();
            context.push(ContextLine { line_no, text: line.clone() });
            hits.push(SearchHit { line_no, line: line.clone(), context });
            if context_lines > 0 {
                pending.push((hits.len() - 1, line_no + context_lines));
            }
        }
        if context_lines > 0 {
            if before.len() == context_lines {
                before.pop_front();
            }
            before.push_back(ContextLine { line_no, text: line });
        }
        if hits.len() >= max_matches && pending.is_empty() {
            break;
        }
    }
    Ok(hits)
}

pub fn search(pattern: &Pattern, path: &Path, context_lines: usize) -> Result<Vec<SearchHit>, LogError> {
    Ok(search_reader(BufReader::new(File::open(path)?), pattern, context_lines, DEFAULT_MAX_MATCHES)?)
}

/// Lines `start..=end` (1-based) of `reader`, joined with `\n`. Reading stops
/// at `end`; an `end` past EOF is clamped.
pub fn read_slice_reader<R: BufRead>(mut reader: R, start_line: usize, end_line: usize) -> Result<String, LogError> {
    if start_line == 0 || start_line > end_line {
        return Err(LogError::Range { start: start_line, end: end_line });
    }
    let mut out: Vec<String> = Vec::new();
    let mut buf = Vec::new();
    let mut line_no = 0;
    while line_no < end_line {
        let Some(line) = read_line_lossy(&mut reader, &mut buf)? else { break };
        line_no += 1;
        if line_no >= start_line {
            out.push(line);
        }
    }
    Ok(out.join("\n"))
}

pub fn read_slice(path: &Path, start_line: usize, end_line: usize) -> Result<String, LogError> {
    read_slice_reader(BufReader::new(File::open(path)?), start_line, end_line)
}

/// A located failure section of a runner log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub start_line: usize,
    /// Last non-blank line before the next delimiter.
    pub end_line: usize,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^_{3,} (.+?) _{3,}$").unwrap())
}

fn banner_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^={3,}").unwrap())
}

/// Regex matching the delimiter line of `test_name`'s failure section.
pub fn section_header_pattern(test_name: &str) -> String {
    let short = test_name.rsplit('.').next().unwrap_or(test_name);
    format!(r"^_{{3,}} (?:ERROR at (?:setup|teardown) of )?(?:[\w.\[\]-]*\.)?{} _{{3,}}$", regex::escape(short))
}

/// Scans the log once, returning every failure section.
pub fn locate_sections<R: BufRead>(mut reader: R) -> io::Result<(Vec<Section>, usize)> {
    let mut sections: Vec<Section> = Vec::new();
    let mut open: Option<Section> = None;
    let mut buf = Vec::new();
    let mut line_no = 0;
    while let Some(line) = read_line_lossy(&mut reader, &mut buf)? {
        line_no += 1;
        let header = header_re().captures(&line).map(|c| c[1].to_string());
        if header.is_some() || banner_re().is_match(&line) {
            if let Some(s) = open.take() {
                sections.push(s);
            }
        }
        if let Some(name) = header {
            let name = name
                .strip_prefix("ERROR at setup of ")
                .or_else(|| name.strip_prefix("ERROR at teardown of "))
                .unwrap_or(&name)
                .to_string();
            open = Some(Section { name, start_line: line_no, end_line: line_no });
        } else if let Some(s) = open.as_mut() {
            if !line.trim().is_empty() {
                s.end_line = line_no;
            }
        }
    }
    if let Some(s) = open {
        sections.push(s);
    }
    Ok((sections, line_no))
}

/// The last section whose name matches `test_name` (exactly or on a dotted suffix).
pub fn section_for<'a>(sections: &'a [Section], test_name: &str) -> Option<&'a Section> {
    sections.iter().rev().find(|s| names_match(&s.name, test_name))
}

fn names_match(section: &str, test: &str) -> bool {
    let dotted = |long: &str, short: &str| long.len() > short.len() && long.ends_with(short) && long.as_bytes()[long.len() - short.len() - 1] == b'.';
    section == test || dotted(test, section) || dotted(section, test)
}

/// Finds the error line of a section: `(line offset, error type)`.
///
/// Preference order: pytest's trailing `path:line: ErrorType` location line,
/// then the last `E   ErrorType:` line, then a bare `ErrorType: message` line.
fn find_error_line(lines: &[String]) -> Option<(usize, String)> {
    static LOC: OnceLock<Regex> = OnceLock::new();
    static E_LINE: OnceLock<Regex> = OnceLock::new();
    static BARE: OnceLock<Regex> = OnceLock::new();
    let loc = LOC.get_or_init(|| Regex::new(r"^\S.*:\d+: ([A-Za-z_][\w.]*)$").unwrap());
    let e_line = E_LINE.get_or_init(|| Regex::new(r"^E\s+([A-Za-z_][\w.]*(?:Error|Exception|Exit|Interrupt|Warning|Failure))\b").unwrap());
    let bare = BARE.get_or_init(|| Regex::new(r"^([A-Za-z_][\w.]*(?:Error|Exception|Exit|Interrupt))(?::|$)").unwrap());
    for re in [loc, e_line, bare] {
        if let Some((i, c)) = lines.iter().enumerate().rev().find_map(|(i, l)| re.captures(l).map(|c| (i, c))) {
            return Some((i, c[1].to_string()));
        }
    }
    None
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

fn truncate_chars(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// Builds an excerpt of at most `allowance` characters that always contains
/// `must_keep` (trimmed to `token` onward if needed), followed by as many of
/// the `tail` lines (bottom-up) as fit.
fn compose_excerpt(must_keep: &str, token: &str, must_pos: Option<usize>, tail: &[String], allowance: usize) -> String {
    let mut keep = must_keep.to_string();
    if char_len(&keep) > allowance {
        let from = keep.find(token).unwrap_or(0);
        keep = truncate_chars(&keep[from..], allowance);
    }
    let mut left = allowance.saturating_sub(char_len(&keep));
    let mut chosen: Vec<usize> = Vec::new();
    for (i, line) in tail.iter().enumerate().rev() {
        if Some(i) == must_pos {
            continue;
        }
        let cost = char_len(line) + 1;
        if cost > left {
            break;
        }
        left -= cost;
        chosen.push(i);
    }
    chosen.reverse();
    let mut parts: Vec<&str> = Vec::new();
    let mut placed = false;
    for i in chosen {
        if !placed && must_pos.is_none_or(|p| p < i) {
            parts.push(&keep);
            placed = true;
        }
        parts.push(&tail[i]);
    }
    if !placed {
        parts.push(&keep);
    }
    parts.join("\n")
}

/// One fragment per failing test, in input order, within `budget`.
pub fn extract_failure_fragments(log_path: &Path, failing_tests: &[String], budget: &FragmentBudget) -> Result<Vec<LogFragment>, LogError> {
    if failing_tests.is_empty() {
        return Ok(Vec::new());
    }
    let path_str = log_path.to_string_lossy().into_owned();
    let (sections, total_lines) = locate_sections(BufReader::new(File::open(log_path)?))?;

    let mut remaining_total = budget.total_chars;
    let mut fragments = Vec::with_capacity(failing_tests.len());
    for (k, test) in failing_tests.iter().enumerate() {
        let left_count = failing_tests.len() - k;
        let allowance = budget.per_fragment_chars.min(remaining_total / left_count);
        let section = section_for(&sections, test);

        let fragment = match section {
            Some(sec) => {
                let text = read_slice(log_path, sec.start_line, sec.end_line)?;
                let lines: Vec<String> = text.split('\n').map(str::to_string).collect();
                let tail_start = lines.len().saturating_sub(budget.tail_lines);
                let tail = &lines[tail_start..];
                let (error_type, excerpt) = match find_error_line(&lines) {
                    Some((idx, ty)) => {
                        let must_pos = idx.checked_sub(tail_start);
                        let excerpt = compose_excerpt(&lines[idx], &ty, must_pos, tail, allowance);
                        (ty, excerpt)
                    }
                    None => {
                        let last = lines.iter().rev().find(|l| !l.trim().is_empty()).cloned().unwrap_or_default();
                        let marker = format!("{UNKNOWN_ERROR}: {}", last.trim());
                        (UNKNOWN_ERROR.to_string(), compose_excerpt(&marker, UNKNOWN_ERROR, None, tail, allowance))
                    }
                };
                // degenerate budgets: keep the token itself inside the excerpt
                let error_type = if excerpt.contains(&error_type) { error_type } else { excerpt.clone() };
                LogFragment {
                    test_name: test.clone(),
                    error_type,
                    excerpt,
                    source_span: SourceSpan { path: path_str.clone(), start_line: sec.start_line, end_line: sec.end_line },
                }
            }
            None => {
                let start = total_lines.saturating_sub(budget.tail_lines) + 1;
                let tail: Vec<String> = if total_lines == 0 {
                    Vec::new()
                } else {
                    read_slice(log_path, start, total_lines)?.split('\n').map(str::to_string).collect()
                };
                let marker = format!("{UNLOCATED}: no failure section for {test}");
                let excerpt = compose_excerpt(&marker, UNLOCATED, None, &tail, allowance);
                let error_type = if excerpt.contains(UNLOCATED) { UNLOCATED.to_string() } else { excerpt.clone() };
                LogFragment {
                    test_name: test.clone(),
                    error_type,
                    excerpt,
                    source_span: SourceSpan { path: path_str.clone(), start_line: start.min(total_lines.max(1)), end_line: total_lines },
                }
            }
        };
        remaining_total -= char_len(&fragment.excerpt).min(remaining_total);
        fragments.push(fragment);
    }
    Ok(fragments)
}
