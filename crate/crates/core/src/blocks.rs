//! Block-structured test files.
//!
//! A generated test file is a sequence of sentinel-delimited blocks:
//!
//! ```text
//! # ATTEST-BLOCK-BEGIN: HEADER
//! # ATTEST-INDEX: {"TestFoo.test_bar":"CASE_1"}
//! import foo
//! # ATTEST-BLOCK-END: HEADER
//!
//! # ATTEST-BLOCK-BEGIN: CASE_1
//! ...
//! # ATTEST-BLOCK-END: CASE_1
//!
//! # ATTEST-BLOCK-BEGIN: FOOTER
//! # ATTEST-BLOCK-END: FOOTER
//! ```
//!
//! Bodies are opaque text. Edits are applied through [`apply_edits`], which
//! enforces a per-call limit on the number of distinct blocks touched and
//! leaves every other block byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BEGIN_PREFIX: &str = "# ATTEST-BLOCK-BEGIN: ";
pub const END_PREFIX: &str = "# ATTEST-BLOCK-END: ";
pub const INDEX_PREFIX: &str = "# ATTEST-INDEX: ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("block limit exceeded: {} distinct blocks touched ({}), limit {limit}", touched.len(), touched.join(", "))]
    BoundViolation { touched: Vec<String>, limit: usize },
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("invalid file: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BlockKind {
    Header,
    Case,
    Footer,
}

/// Classifies a block id, rejecting anything that is not `HEADER`, `FOOTER`
/// or `CASE_<positive integer>` (no leading zeros).
pub fn kind_of_id(id: &str) -> Option<BlockKind> {
    match id {
        "HEADER" => Some(BlockKind::Header),
        "FOOTER" => Some(BlockKind::Footer),
        _ => case_number(id).map(|_| BlockKind::Case),
    }
}

/// The `n` of `CASE_<n>`.
pub fn case_number(id: &str) -> Option<u64> {
    let digits = id.strip_prefix("CASE_")?;
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub kind: BlockKind,
    /// Body lines joined by `\n`, excluding sentinel lines. Empty means no lines.
    pub body: String,
}

impl Block {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Result<Self, BlockError> {
        let id = id.into();
        let kind = kind_of_id(&id).ok_or_else(|| BlockError::Invalid(format!("invalid block id `{id}`")))?;
        Ok(Block { id, kind, body: body.into() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockedTestFile {
    pub blocks: Vec<Block>,
    /// test name → block id
    pub index: BTreeMap<String, String>,
}

fn body_has_sentinel(body: &str) -> bool {
    body.split('\n').any(|l| l.starts_with(BEGIN_PREFIX) || l.starts_with(END_PREFIX))
}

impl BlockedTestFile {
    /// A file with empty HEADER and FOOTER and the given CASE blocks.
    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self, BlockError> {
        let file = BlockedTestFile { blocks, index: BTreeMap::new() };
        file.validate()?;
        Ok(file)
    }

    pub fn get(&self, id: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.id.as_str())
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.blocks.iter().filter(|b| b.kind == BlockKind::Case).map(|b| b.id.clone()).collect()
    }

    /// Checks every structural invariant `render` relies on.
    pub fn validate(&self) -> Result<(), BlockError> {
        let (first, last) = match (self.blocks.first(), self.blocks.last()) {
            (Some(f), Some(l)) if self.blocks.len() >= 2 => (f, l),
            _ => return Err(BlockError::Invalid("a file needs at least HEADER and FOOTER".into())),
        };
        if first.kind != BlockKind::Header || first.id != "HEADER" {
            return Err(BlockError::Invalid("first block must be HEADER".into()));
        }
        if last.kind != BlockKind::Footer || last.id != "FOOTER" {
            return Err(BlockError::Invalid("last block must be FOOTER".into()));
        }
        let mut seen = BTreeSet::new();
        for (pos, block) in self.blocks.iter().enumerate() {
            if kind_of_id(&block.id) != Some(block.kind) {
                return Err(BlockError::Invalid(format!("block `{}` has kind {:?}", block.id, block.kind)));
            }
            let inner = pos > 0 && pos + 1 < self.blocks.len();
            if inner && block.kind != BlockKind::Case {
                return Err(BlockError::Invalid(format!("{} must not appear in the middle", block.id)));
            }
            if !seen.insert(block.id.as_str()) {
                return Err(BlockError::Invalid(format!("duplicate block id {}", block.id)));
            }
            if body_has_sentinel(&block.body) {
                return Err(BlockError::Invalid(format!("block {} contains a sentinel line", block.id)));
            }
        }
        if first.body.split('\n').next().is_some_and(|l| l.starts_with(INDEX_PREFIX)) {
            return Err(BlockError::Invalid("HEADER body must not start with an index line".into()));
        }
        for (test, id) in &self.index {
            if !seen.contains(id.as_str()) {
                return Err(BlockError::Invalid(format!("index maps `{test}` to missing block {id}")));
            }
        }
        Ok(())
    }

    /// Deterministic serialization. Assumes [`validate`](Self::validate) holds.
    pub fn render(&self) -> String {
        debug_assert!(self.validate().is_ok());
        let mut out = String::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(BEGIN_PREFIX);
            out.push_str(&block.id);
            out.push('\n');
            if block.kind == BlockKind::Header && !self.index.is_empty() {
                out.push_str(INDEX_PREFIX);
                out.push_str(&serde_json::to_string(&self.index).expect("string map serializes"));
                out.push('\n');
            }
            if !block.body.is_empty() {
                out.push_str(&block.body);
                out.push('\n');
            }
            out.push_str(END_PREFIX);
            out.push_str(&block.id);
            out.push('\n');
        }
        out
    }

    /// Resolves a runner-reported test name to its block.
    ///
    /// Lookup order: exact index entry, index entry matching on a dotted
    /// suffix (`Class.test` vs `module.Class.test`), then the `_case<n>`
    /// function-name suffix convention.
    pub fn block_for_test(&self, test_name: &str) -> Option<String> {
        if let Some(id) = self.index.get(test_name) {
            return Some(id.clone());
        }
        let dotted_suffix = |long: &str, short: &str| long.len() > short.len() && long.ends_with(short) && long.as_bytes()[long.len() - short.len() - 1] == b'.';
        if let Some((_, id)) = self
            .index
            .iter()
            .find(|(name, _)| dotted_suffix(test_name, name) || dotted_suffix(name, test_name))
        {
            return Some(id.clone());
        }
        let func = test_name.rsplit('.').next().unwrap_or(test_name);
        let (_, n) = func.rsplit_once("_case")?;
        let id = format!("CASE_{n}");
        (case_number(&id).is_some() && self.contains(&id)).then_some(id)
    }

    /// Recomputes the test-name index from `def test_*` lines in CASE bodies.
    ///
    /// Indented definitions are qualified by the nearest preceding
    /// column-zero `class` line in rendered order.
    pub fn rebuild_index(&mut self) {
        static DEF: OnceLock<Regex> = OnceLock::new();
        static CLASS: OnceLock<Regex> = OnceLock::new();
        let def_re = DEF.get_or_init(|| Regex::new(r"^(\s*)(?:async\s+)?def\s+(test\w*)\s*\(").unwrap());
        let class_re = CLASS.get_or_init(|| Regex::new(r"^class\s+(\w+)").unwrap());

        let mut index = BTreeMap::new();
        let mut current_class: Option<String> = None;
        for block in &self.blocks {
            for line in block.body.split('\n') {
                if let Some(c) = class_re.captures(line) {
                    current_class = Some(c[1].to_string());
                    continue;
                }
                if !line.is_empty() && !line.starts_with(char::is_whitespace) && !line.starts_with('#') {
                    // dedented code closes the class
                    if !line.starts_with('@') {
                        current_class = None;
                    }
                }
                if block.kind != BlockKind::Case {
                    continue;
                }
                if let Some(c) = def_re.captures(line) {
                    let name = match (&current_class, c[1].is_empty()) {
                        (Some(class), false) => format!("{class}.{}", &c[2]),
                        _ => c[2].to_string(),
                    };
                    index.insert(name, block.id.clone());
                }
            }
        }
        self.index = index;
    }
}

impl fmt::Display for BlockedTestFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Splits `text` into blocks, rejecting anything that would not survive a
/// render round-trip unchanged in meaning.
pub fn parse_blocks(text: &str) -> Result<BlockedTestFile, BlockError> {
    let err = |line: usize, message: String| BlockError::Parse { line, message };

    struct Open<'a> {
        id: &'a str,
        line: usize,
        body: Vec<&'a str>,
    }

    let mut blocks: Vec<Block> = Vec::new();
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut begin_lines: Vec<usize> = Vec::new();
    let mut open: Option<Open<'_>> = None;
    let mut line_count = 0;

    for (i, line) in text.split('\n').enumerate() {
        let line_no = i + 1;
        line_count = line_no;
        if let Some(id) = line.strip_prefix(BEGIN_PREFIX) {
            if let Some(o) = &open {
                return Err(err(line_no, format!("BEGIN {id} while block {} (line {}) is open", o.id, o.line)));
            }
            if kind_of_id(id).is_none() {
                return Err(err(line_no, format!("invalid block id `{id}`")));
            }
            if !seen.insert(id) {
                return Err(err(line_no, format!("duplicate block id {id}")));
            }
            open = Some(Open { id, line: line_no, body: Vec::new() });
            begin_lines.push(line_no);
        } else if let Some(id) = line.strip_prefix(END_PREFIX) {
            let Some(o) = open.take() else {
                return Err(err(line_no, format!("END {id} without matching BEGIN")));
            };
            if o.id != id {
                return Err(err(line_no, format!("END {id} does not match open block {}", o.id)));
            }
            let kind = kind_of_id(id).expect("checked at BEGIN");
            blocks.push(Block { id: id.to_string(), kind, body: o.body.join("\n") });
        } else if let Some(o) = open.as_mut() {
            o.body.push(line);
        } else if !line.trim().is_empty() {
            return Err(err(line_no, "content outside of any block".into()));
        }
    }
    if let Some(o) = open {
        return Err(err(o.line, format!("block {} is never closed", o.id)));
    }

    let n = blocks.len();
    for (pos, block) in blocks.iter().enumerate() {
        let line = begin_lines[pos];
        match block.kind {
            BlockKind::Header if pos != 0 => return Err(err(line, "HEADER must be the first block".into())),
            BlockKind::Footer if pos + 1 != n => return Err(err(line, "FOOTER must be the last block".into())),
            BlockKind::Case if pos == 0 => return Err(err(line, "missing HEADER before first block".into())),
            _ => {}
        }
    }
    match (blocks.first(), blocks.last()) {
        (Some(f), _) if f.kind != BlockKind::Header => return Err(err(1, "missing HEADER".into())),
        (None, _) => return Err(err(1, "missing HEADER".into())),
        (_, Some(l)) if l.kind != BlockKind::Footer => return Err(err(line_count, "missing FOOTER".into())),
        _ => {}
    }

    let mut index: BTreeMap<String, String> = BTreeMap::new();
    let header = &mut blocks[0];
    if let Some(first) = header.body.split('\n').next() {
        if let Some(json) = first.strip_prefix(INDEX_PREFIX) {
            let header_line = begin_lines[0] + 1;
            index = serde_json::from_str(json).map_err(|e| err(header_line, format!("malformed index: {e}")))?;
            header.body = header.body.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap_or_default();
        }
    }
    for (test, id) in &index {
        if !seen.contains(id.as_str()) {
            return Err(err(begin_lines[0] + 1, format!("index maps `{test}` to missing block {id}")));
        }
    }
    Ok(BlockedTestFile { blocks, index })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditAction {
    RewriteBlock { block_id: String, new_body: String },
    AddCase { block_id: String, body: String, insert_after: String },
    DeleteBlock { block_id: String },
}

impl EditAction {
    pub fn block_id(&self) -> &str {
        match self {
            EditAction::RewriteBlock { block_id, .. }
            | EditAction::AddCase { block_id, .. }
            | EditAction::DeleteBlock { block_id } => block_id,
        }
    }
}

/// Applies `edits` in order, all-or-nothing.
///
/// The number of distinct block ids named by the edit list must not exceed
/// `block_limit`; a block both added and rewritten counts once.
pub fn apply_edits(file: &BlockedTestFile, edits: &[EditAction], block_limit: usize) -> Result<BlockedTestFile, BlockError> {
    if block_limit == 0 {
        return Err(BlockError::InvalidEdit("block_limit must be positive".into()));
    }
    let mut touched: Vec<String> = Vec::new();
    for e in edits {
        if !touched.iter().any(|t| t == e.block_id()) {
            touched.push(e.block_id().to_string());
        }
    }
    if touched.len() > block_limit {
        return Err(BlockError::BoundViolation { touched, limit: block_limit });
    }

    let mut out = file.clone();
    for edit in edits {
        match edit {
            EditAction::RewriteBlock { block_id, new_body } => {
                if body_has_sentinel(new_body) {
                    return Err(BlockError::InvalidEdit(format!("new body for {block_id} contains a sentinel line")));
                }
                if block_id == "HEADER" && new_body.split('\n').next().is_some_and(|l| l.starts_with(INDEX_PREFIX)) {
                    return Err(BlockError::InvalidEdit("HEADER body must not start with an index line".into()));
                }
                let block = out
                    .blocks
                    .iter_mut()
                    .find(|b| &b.id == block_id)
                    .ok_or_else(|| BlockError::InvalidEdit(format!("no block {block_id} to rewrite")))?;
                block.body = new_body.clone();
            }
            EditAction::AddCase { block_id, body, insert_after } => {
                if case_number(block_id).is_none() {
                    return Err(BlockError::InvalidEdit(format!("`{block_id}` is not a CASE id")));
                }
                if out.contains(block_id) {
                    return Err(BlockError::InvalidEdit(format!("block {block_id} already exists")));
                }
                if body_has_sentinel(body) {
                    return Err(BlockError::InvalidEdit(format!("body for {block_id} contains a sentinel line")));
                }
                if insert_after == "FOOTER" {
                    return Err(BlockError::InvalidEdit("cannot insert after FOOTER".into()));
                }
                let pos = out
                    .blocks
                    .iter()
                    .position(|b| &b.id == insert_after)
                    .ok_or_else(|| BlockError::InvalidEdit(format!("no block {insert_after} to insert after")))?;
                out.blocks.insert(pos + 1, Block { id: block_id.clone(), kind: BlockKind::Case, body: body.clone() });
            }
            EditAction::DeleteBlock { block_id } => {
                if kind_of_id(block_id) != Some(BlockKind::Case) {
                    return Err(BlockError::InvalidEdit(format!("only CASE blocks can be deleted, not {block_id}")));
                }
                let pos = out
                    .blocks
                    .iter()
                    .position(|b| &b.id == block_id)
                    .ok_or_else(|| BlockError::InvalidEdit(format!("no block {block_id} to delete")))?;
                out.blocks.remove(pos);
                out.index.retain(|_, id| id != block_id);
            }
        }
    }
    Ok(out)
}

/// Ids whose body differs between `old` and `new`, plus ids present in only one.
pub fn diff_blocks(old: &BlockedTestFile, new: &BlockedTestFile) -> BTreeSet<String> {
    let old_map: BTreeMap<&str, &str> = old.blocks.iter().map(|b| (b.id.as_str(), b.body.as_str())).collect();
    let new_map: BTreeMap<&str, &str> = new.blocks.iter().map(|b| (b.id.as_str(), b.body.as_str())).collect();
    let mut changed = BTreeSet::new();
    for (id, body) in &old_map {
        if new_map.get(id) != Some(body) {
            changed.insert(id.to_string());
        }
    }
    for id in new_map.keys() {
        if !old_map.contains_key(id) {
            changed.insert(id.to_string());
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BlockedTestFile {
        let mut f = BlockedTestFile::from_blocks(vec![
            Block::new("HEADER", "import torch\n\nclass TestSpectralNorm:").unwrap(),
            Block::new("CASE_1", "    def test_basic(self):\n        assert True").unwrap(),
            Block::new("CASE_12", "    def test_invalid_dim_index_exception(self):\n        raise RuntimeError").unwrap(),
            Block::new("FOOTER", "").unwrap(),
        ])
        .unwrap();
        f.rebuild_index();
        f
    }

    #[test]
    fn render_layout_is_exact() {
        let f = BlockedTestFile::from_blocks(vec![
            Block::new("HEADER", "h").unwrap(),
            Block::new("CASE_1", "").unwrap(),
            Block::new("FOOTER", "f").unwrap(),
        ])
        .unwrap();
        let expected = "# ATTEST-BLOCK-BEGIN: HEADER\nh\n# ATTEST-BLOCK-END: HEADER\n\n\
# ATTEST-BLOCK-BEGIN: CASE_1\n# ATTEST-BLOCK-END: CASE_1\n\n\
# ATTEST-BLOCK-BEGIN: FOOTER\nf\n# ATTEST-BLOCK-END: FOOTER\n";
        assert_eq!(f.render(), expected);
        assert_eq!(f.render(), f.render());
        assert_eq!(parse_blocks(expected).unwrap(), f);
    }

    #[test]
    fn index_is_embedded_in_header() {
        let f = sample();
        let text = f.render();
        assert!(text.contains(
            r#"# ATTEST-INDEX: {"TestSpectralNorm.test_basic":"CASE_1","TestSpectralNorm.test_invalid_dim_index_exception":"CASE_12"}"#
        ));
        let back = parse_blocks(&text).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.get("HEADER").unwrap().body, "import torch\n\nclass TestSpectralNorm:");
    }

    #[test]
    fn duplicate_id_reports_second_begin_line() {
        let text = "# ATTEST-BLOCK-BEGIN: HEADER\n# ATTEST-BLOCK-END: HEADER\n\
# ATTEST-BLOCK-BEGIN: CASE_3\n# ATTEST-BLOCK-END: CASE_3\n\
# ATTEST-BLOCK-BEGIN: CASE_3\n# ATTEST-BLOCK-END: CASE_3\n\
# ATTEST-BLOCK-BEGIN: FOOTER\n# ATTEST-BLOCK-END: FOOTER\n";
        assert_eq!(
            parse_blocks(text).unwrap_err(),
            BlockError::Parse { line: 5, message: "duplicate block id CASE_3".into() }
        );
    }

    #[test]
    fn parse_errors() {
        let stray = "x = 1\n# ATTEST-BLOCK-BEGIN: HEADER\n# ATTEST-BLOCK-END: HEADER\n";
        assert!(matches!(parse_blocks(stray), Err(BlockError::Parse { line: 1, .. })));
        let unclosed = "# ATTEST-BLOCK-BEGIN: HEADER\nfoo\n";
        assert!(matches!(parse_blocks(unclosed), Err(BlockError::Parse { line: 1, .. })));
        let mismatched = "# ATTEST-BLOCK-BEGIN: HEADER\n# ATTEST-BLOCK-END: FOOTER\n";
        assert!(matches!(parse_blocks(mismatched), Err(BlockError::Parse { line: 2, .. })));
        let no_footer = "# ATTEST-BLOCK-BEGIN: HEADER\n# ATTEST-BLOCK-END: HEADER\n";
        assert!(parse_blocks(no_footer).unwrap_err().to_string().contains("missing FOOTER"));
        let no_header = "# ATTEST-BLOCK-BEGIN: CASE_1\n# ATTEST-BLOCK-END: CASE_1\n";
        assert!(parse_blocks(no_header).is_err());
        let bad_id = "# ATTEST-BLOCK-BEGIN: CASE_01\n";
        assert!(parse_blocks(bad_id).unwrap_err().to_string().contains("invalid block id"));
        assert!(parse_blocks("").is_err());
    }

    #[test]
    fn rewrite_touches_only_named_block() {
        let f = sample();
        let edits = [EditAction::RewriteBlock { block_id: "CASE_12".into(), new_body: "    def test_invalid_dim_index_exception(self):\n        pass".into() }];
        let g = apply_edits(&f, &edits, 3).unwrap();
        assert_eq!(diff_blocks(&f, &g), BTreeSet::from(["CASE_12".to_string()]));
        for id in ["HEADER", "CASE_1", "FOOTER"] {
            assert_eq!(f.get(id), g.get(id));
        }
    }

    #[test]
    fn bound_violation_leaves_file_unchanged() {
        let f = sample();
        let edits: Vec<_> = ["HEADER", "CASE_1", "CASE_12", "FOOTER"]
            .iter()
            .map(|id| EditAction::RewriteBlock { block_id: id.to_string(), new_body: "x".into() })
            .collect();
        match apply_edits(&f, &edits, 3) {
            Err(BlockError::BoundViolation { touched, limit }) => {
                assert_eq!(touched.len(), 4);
                assert_eq!(limit, 3);
            }
            other => panic!("expected bound violation, got {other:?}"),
        }
    }

    #[test]
    fn empty_edit_list_is_identity() {
        let f = sample();
        assert_eq!(apply_edits(&f, &[], 1).unwrap(), f);
    }

    #[test]
    fn add_then_rewrite_counts_once() {
        let f = sample();
        let edits = [
            EditAction::AddCase { block_id: "CASE_9".into(), body: "a".into(), insert_after: "CASE_1".into() },
            EditAction::RewriteBlock { block_id: "CASE_9".into(), new_body: "b".into() },
        ];
        let g = apply_edits(&f, &edits, 1).unwrap();
        assert_eq!(g.ids().collect::<Vec<_>>(), ["HEADER", "CASE_1", "CASE_9", "CASE_12", "FOOTER"]);
        assert_eq!(g.get("CASE_9").unwrap().body, "b");
        assert_eq!(diff_blocks(&f, &g), BTreeSet::from(["CASE_9".to_string()]));
    }

    #[test]
    fn invalid_edits_apply_nothing() {
        let f = sample();
        let missing = [EditAction::RewriteBlock { block_id: "CASE_7".into(), new_body: String::new() }];
        assert!(matches!(apply_edits(&f, &missing, 3), Err(BlockError::InvalidEdit(_))));
        let collide = [EditAction::AddCase { block_id: "CASE_1".into(), body: String::new(), insert_after: "HEADER".into() }];
        assert!(matches!(apply_edits(&f, &collide, 3), Err(BlockError::InvalidEdit(_))));
        let header = [EditAction::DeleteBlock { block_id: "HEADER".into() }];
        assert!(matches!(apply_edits(&f, &header, 3), Err(BlockError::InvalidEdit(_))));
        let sentinel = [EditAction::RewriteBlock { block_id: "CASE_1".into(), new_body: "# ATTEST-BLOCK-END: CASE_1".into() }];
        assert!(matches!(apply_edits(&f, &sentinel, 3), Err(BlockError::InvalidEdit(_))));
    }

    #[test]
    fn delete_prunes_index() {
        let f = sample();
        let g = apply_edits(&f, &[EditAction::DeleteBlock { block_id: "CASE_12".into() }], 1).unwrap();
        assert!(!g.contains("CASE_12"));
        assert!(g.index.values().all(|id| id != "CASE_12"));
        assert!(g.validate().is_ok());
    }

    #[test]
    fn test_name_resolution() {
        let f = sample();
        assert_eq!(f.block_for_test("TestSpectralNorm.test_invalid_dim_index_exception").as_deref(), Some("CASE_12"));
        assert_eq!(f.block_for_test("tests.test_x.TestSpectralNorm.test_basic").as_deref(), Some("CASE_1"));
        let mut g = f.clone();
        g.index.clear();
        assert_eq!(g.block_for_test("TestFoo.test_whatever_case12").as_deref(), Some("CASE_12"));
        assert_eq!(g.block_for_test("test_whatever_case4"), None);
    }

    #[test]
    fn diff_of_identical_is_empty() {
        let f = sample();
        assert!(diff_blocks(&f, &f).is_empty());
    }
}
