//! Versioned prompt templates.
//!
//! A template is a text resource with a `# prompt-version: N` first line and
//! `[system]` / `[user]` sections; `{{name}}` placeholders are substituted
//! at render time. Built-in templates can be overridden per file from a
//! configured directory.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

pub const TEMPLATE_NAMES: [&str; 7] = ["understand", "requirements", "plan", "generate_code", "repair_block", "promote_case", "analyze"];

const BUILTIN: [(&str, &str); 7] = [
    ("understand", include_str!("../prompts/understand.txt")),
    ("requirements", include_str!("../prompts/requirements.txt")),
    ("plan", include_str!("../prompts/plan.txt")),
    ("generate_code", include_str!("../prompts/generate_code.txt")),
    ("repair_block", include_str!("../prompts/repair_block.txt")),
    ("promote_case", include_str!("../prompts/promote_case.txt")),
    ("analyze", include_str!("../prompts/analyze.txt")),
];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {name}: {message}")]
    Template { name: String, message: String },
    #[error("template {name}: unbound placeholder {{{{{var}}}}}")]
    Unbound { name: String, var: String },
    #[error("unknown template {0}")]
    Unknown(String),
    #[error("reading template override: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub version: u32,
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Result<Self, PromptError> {
        let err = |message: &str| PromptError::Template { name: name.to_string(), message: message.to_string() };
        let mut lines = text.lines();
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("# prompt-version:"))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| err("first line must be `# prompt-version: N`"))?;
        let (mut system, mut user) = (Vec::new(), Vec::new());
        let mut section: Option<&mut Vec<&str>> = None;
        for line in lines {
            match line.trim_end() {
                "[system]" => section = Some(&mut system),
                "[user]" => section = Some(&mut user),
                _ => match section.as_mut() {
                    Some(s) => s.push(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(err("text before the first section")),
                },
            }
        }
        if system.is_empty() || user.is_empty() {
            return Err(err("needs non-empty [system] and [user] sections"));
        }
        Ok(Template { name: name.to_string(), version, system: system.join("\n"), user: user.join("\n") })
    }

    fn fill(&self, text: &str, vars: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").ok_or_else(|| PromptError::Template { name: self.name.clone(), message: "unterminated placeholder".into() })?;
            let var = after[..end].trim();
            let value = vars.get(var).ok_or_else(|| PromptError::Unbound { name: self.name.clone(), var: var.to_string() })?;
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }

    /// Returns the `(system, user)` texts.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<(String, String), PromptError> {
        Ok((self.fill(&self.system, vars)?, self.fill(&self.user, vars)?))
    }
}

#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<String, Template>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN.iter().map(|(n, t)| (n.to_string(), Template::parse(n, t).expect("built-in templates are well-formed"))).collect();
        PromptSet { templates }
    }

    /// Built-ins, with `<dir>/<name>.txt` replacing any template it names.
    pub fn load(override_dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        if let Some(dir) = override_dir {
            for name in TEMPLATE_NAMES {
                let path = dir.join(format!("{name}.txt"));
                if path.is_file() {
                    set.templates.insert(name.to_string(), Template::parse(name, &std::fs::read_to_string(path)?)?);
                }
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&Template, PromptError> {
        self.templates.get(name).ok_or_else(|| PromptError::Unknown(name.to_string()))
    }

    pub fn render(&self, name: &str, vars: &BTreeMap<&str, String>) -> Result<(String, String), PromptError> {
        self.get(name)?.render(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_with_versions() {
        let set = PromptSet::builtin();
        for name in TEMPLATE_NAMES {
            assert_eq!(set.get(name).unwrap().version, 1, "{name}");
        }
    }

    #[test]
    fn render_substitutes_and_rejects_unbound() {
        let t = Template::parse("t", "# prompt-version: 2\n[system]\nsys {{a}}\n[user]\nuser {{ b }} {{a}}\n").unwrap();
        let vars = BTreeMap::from([("a", "1".to_string()), ("b", "2".to_string())]);
        assert_eq!(t.render(&vars).unwrap(), ("sys 1".to_string(), "user 2 1".to_string()));
        let err = t.render(&BTreeMap::from([("a", "1".to_string())])).unwrap_err();
        assert_eq!(err.to_string(), "template t: unbound placeholder {{b}}");
    }

    #[test]
    fn malformed_templates() {
        assert!(Template::parse("t", "[system]\nx\n[user]\ny").is_err());
        assert!(Template::parse("t", "# prompt-version: 1\n[system]\nx\n").is_err());
    }

    #[test]
    fn override_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("plan.txt"), "# prompt-version: 7\n[system]\ns\n[user]\nu\n").unwrap();
        let set = PromptSet::load(Some(dir.path())).unwrap();
        assert_eq!(set.get("plan").unwrap().version, 7);
        assert_eq!(set.get("analyze").unwrap().version, 1);
    }
}
