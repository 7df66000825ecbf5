use std::collections::BTreeMap;

use regex::Regex;
use serde::Deserialize;

use super::{StageCtx, StageError, StageOutput};
use crate::artifacts::{extract_json, FunctionDossier};
use crate::state::ArtifactKind;

pub const TRUNCATION_MARKER: &str = "\n# ... [truncated]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceInspection {
    pub signature: String,
    pub doc_text: String,
    /// The function's source, cut to the context budget.
    pub excerpt: String,
    pub truncated: bool,
}

fn indent_of(line: &str) -> usize {
    line.len() - line.trim_start().len()
}

/// Locates `def <name>(` in Python source and extracts its signature,
/// docstring and a bounded excerpt of its body.
pub fn inspect_source(source: &str, name: &str, budget: usize) -> Option<SourceInspection> {
    let def_re = Regex::new(&format!(r"^\s*(?:async\s+)?def\s+{}\s*\(", regex::escape(name))).expect("escaped name");
    let lines: Vec<&str> = source.lines().collect();
    let start = lines.iter().position(|l| def_re.is_match(l))?;
    let base = indent_of(lines[start]);

    // the signature runs until the colon closing the parameter list
    let mut depth = 0i32;
    let mut sig_end = start;
    'outer: for (i, line) in lines.iter().enumerate().skip(start) {
        for c in line.chars() {
            match c {
                '(' | '[' | '{' => depth += 1,
                ')' | ']' | '}' => depth -= 1,
                '#' => break,
                _ => {}
            }
        }
        if depth <= 0 && line.trim_end().ends_with(':') {
            sig_end = i;
            break 'outer;
        }
        sig_end = i;
    }
    let signature = lines[start..=sig_end].iter().map(|l| l.trim()).collect::<Vec<_>>().join(" ");

    let mut end = sig_end;
    for (i, line) in lines.iter().enumerate().skip(sig_end + 1) {
        if line.trim().is_empty() {
            continue;
        }
        if indent_of(line) <= base {
            break;
        }
        end = i;
    }
    let body = &lines[sig_end + 1..=end.max(sig_end)];

    let mut doc_text = String::new();
    if let Some(first) = body.iter().position(|l| !l.trim().is_empty()) {
        let t = body[first].trim();
        let quote = ["\"\"\"", "'''"].into_iter().find(|q| t.starts_with(q) || t.starts_with(&format!("r{q}")));
        if let Some(q) = quote {
            let opened = t.trim_start_matches('r').strip_prefix(q).unwrap_or("");
            let mut parts = Vec::new();
            if let Some(close) = opened.find(q) {
                parts.push(opened[..close].to_string());
            } else {
                parts.push(opened.to_string());
                for l in &body[first + 1..] {
                    if let Some(close) = l.find(q) {
                        parts.push(l[..close].trim().to_string());
                        break;
                    }
                    parts.push(l.trim().to_string());
                }
            }
            doc_text = parts.join("\n").trim().to_string();
        }
    }

    let full = lines[start..=end.max(sig_end)].join("\n");
    let (excerpt, truncated) = if full.chars().count() > budget {
        let keep = budget.saturating_sub(TRUNCATION_MARKER.chars().count());
        (full.chars().take(keep).collect::<String>() + TRUNCATION_MARKER, true)
    } else {
        (full, false)
    };
    Some(SourceInspection { signature, doc_text, excerpt, truncated })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintsAnswer {
    observed_constraints: Vec<String>,
}

pub(super) fn run(ctx: &mut StageCtx<'_>) -> Result<StageOutput, StageError> {
    let target = ctx.state.target.clone();
    let source = std::fs::read_to_string(&target.source_file).map_err(|e| StageError::fatal(format!("cannot read target source {}: {e}", target.source_file.display())))?;
    let budget = ctx.state.config.context_chars;
    let found = inspect_source(&source, &target.function_name, budget)
        .ok_or_else(|| StageError::fatal(format!("target not found: no `def {}(` in {}", target.function_name, target.source_file.display())))?;

    let vars = BTreeMap::from([
        ("module_path", target.module_path.clone()),
        ("function_name", target.function_name.clone()),
        ("signature", found.signature.clone()),
        ("doc_text", if found.doc_text.is_empty() { "(none)".to_string() } else { found.doc_text.clone() }),
        ("source_excerpt", found.excerpt.clone()),
    ]);
    let constraints = ctx.ask_valid("understand", &vars, |text| {
        let value = extract_json(text).map_err(super::artifact_err)?;
        let answer: ConstraintsAnswer = serde_json::from_value(value).map_err(|e| format!("expected {{\"observed_constraints\": [..]}}: {e}"))?;
        Ok(answer.observed_constraints.into_iter().map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect::<Vec<_>>())
    })?;

    let dossier = FunctionDossier { target, signature: found.signature, doc_text: found.doc_text, source_excerpt: found.excerpt, observed_constraints: constraints };
    dossier.validate(budget).map_err(|e| StageError::fatal(e.to_string()))?;
    let n = dossier.observed_constraints.len();
    ctx.stage_write(ArtifactKind::Dossier, "artifacts/dossier.md", dossier.to_markdown());
    let trunc = if found.truncated { ", excerpt truncated" } else { "" };
    Ok(StageOutput::note(format!("dossier with {n} observed constraint(s){trunc}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = "import math\n\n\ndef clipped_scale(x,\n                 lo, hi):\n    \"\"\"Scale x into [lo, hi].\n\n    Raises ValueError when lo > hi.\n    \"\"\"\n    if lo > hi:\n        raise ValueError('lo > hi')\n    return min(max(x, lo), hi)\n\n\ndef other():\n    pass\n";

    #[test]
    fn finds_signature_doc_and_body() {
        let s = inspect_source(SRC, "clipped_scale", 8000).unwrap();
        assert_eq!(s.signature, "def clipped_scale(x, lo, hi):");
        assert_eq!(s.doc_text, "Scale x into [lo, hi].\n\nRaises ValueError when lo > hi.");
        assert!(s.excerpt.ends_with("return min(max(x, lo), hi)"));
        assert!(!s.excerpt.contains("other"));
        assert!(!s.truncated);
    }

    #[test]
    fn missing_function() {
        assert!(inspect_source(SRC, "absent", 8000).is_none());
        assert!(inspect_source(SRC, "clipped", 8000).is_none());
    }

    #[test]
    fn long_source_truncated_exactly_at_budget() {
        let mut src = String::from("def huge(x):\n");
        for i in 0..10_000 {
            src.push_str(&format!("    x = x + {i}\n"));
        }
        let s = inspect_source(&src, "huge", 8000).unwrap();
        assert!(s.truncated);
        assert_eq!(s.excerpt.chars().count(), 8000);
        assert!(s.excerpt.ends_with(TRUNCATION_MARKER));
    }
}
