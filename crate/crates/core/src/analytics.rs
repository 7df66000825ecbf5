//! Relative coverage and cross-library aggregation of branch-coverage records.
//!
//! `cov_r(s, e) = (cov(s, e) - min cov(s)) / (max cov(s) - min cov(s))`, where
//! the min and max range over every record of subject `s` in the dataset.
//! A subject whose configurations all tie has `cov_r = 1` for each of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pct::format_fixed;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no record for subject `{subject}` with config `{config}`")]
    Lookup { subject: String, config: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("subject `{0}` has no library in the grouping map")]
    Ungrouped(String),
    #[error("config `{0}` has no tool in the tool map")]
    Unmapped(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub subject: String,
    pub config: String,
    pub branch_coverage_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeCoverageResult {
    pub subject: String,
    pub config: String,
    pub cov_r: f64,
}

/// Validated set of records: percentages in range, (subject, config) unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    records: Vec<CoverageRecord>,
}

impl Dataset {
    pub fn new(records: Vec<CoverageRecord>) -> Result<Self, AnalyticsError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !(0.0..=100.0).contains(&r.branch_coverage_pct) {
                return Err(AnalyticsError::Invalid(format!(
                    "coverage {} for ({}, {}) outside [0, 100]",
                    r.branch_coverage_pct, r.subject, r.config
                )));
            }
            if !seen.insert((r.subject.as_str(), r.config.as_str())) {
                return Err(AnalyticsError::Invalid(format!("duplicate record ({}, {})", r.subject, r.config)));
            }
        }
        Ok(Dataset { records })
    }

    pub fn records(&self) -> &[CoverageRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.subject.as_str()).collect()
    }

    fn subject_range(&self, subject: &str) -> Option<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.subject == subject)
            .map(|r| r.branch_coverage_pct)
            .fold(None, |acc, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }

    /// Reads `subject,config,branch_coverage_pct` rows (header required).
    pub fn from_csv_reader<R: io::Read>(reader: R) -> Result<Self, AnalyticsError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in ["subject", "config", "branch_coverage_pct"] {
            if !headers.iter().any(|h| h == col) {
                return Err(AnalyticsError::Invalid(format!("missing column `{col}` in header")));
            }
        }
        let records = rdr.deserialize().collect::<Result<Vec<CoverageRecord>, _>>()?;
        Dataset::new(records)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, AnalyticsError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}

/// Reads a two-column sidecar map (`subject,library` or `config,tool`).
pub fn read_map_csv(path: &Path) -> Result<BTreeMap<String, String>, AnalyticsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut map = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() < 2 {
            return Err(AnalyticsError::Invalid(format!("{}: expected two columns", path.display())));
        }
        map.insert(row[0].to_string(), row[1].to_string());
    }
    Ok(map)
}

/// Full-precision relative coverage of one (subject, config) pair.
pub fn relative_coverage(dataset: &Dataset, subject: &str, config: &str) -> Result<f64, AnalyticsError> {
    let record = dataset
        .records
        .iter()
        .find(|r| r.subject == subject && r.config == config)
        .ok_or_else(|| AnalyticsError::Lookup { subject: subject.into(), config: config.into() })?;
    let (lo, hi) = dataset.subject_range(subject).expect("subject has at least the found record");
    Ok(normalize(record.branch_coverage_pct, lo, hi))
}

fn normalize(value: f64, lo: f64, hi: f64) -> f64 {
    if hi == lo {
        return 1.0;
    }
    ((value - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// `cov_r` for every record, in dataset order.
pub fn relative_coverage_all(dataset: &Dataset) -> Vec<RelativeCoverageResult> {
    let mut ranges: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for r in &dataset.records {
        let v = r.branch_coverage_pct;
        ranges
            .entry(r.subject.as_str())
            .and_modify(|(lo, hi)| {
                *lo = lo.min(v);
                *hi = hi.max(v);
            })
            .or_insert((v, v));
    }
    dataset
        .records
        .iter()
        .map(|r| {
            let (lo, hi) = ranges[r.subject.as_str()];
            RelativeCoverageResult { subject: r.subject.clone(), config: r.config.clone(), cov_r: normalize(r.branch_coverage_pct, lo, hi) }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverallMode {
    /// Mean over all of a tool's records.
    #[default]
    RecordWeighted,
    /// Mean of the tool's per-library means.
    LibraryWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub tool: String,
    pub library: String,
    pub records: usize,
    pub avg_pct: f64,
    pub overall_avg_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AggregateTable {
    pub rows: Vec<AggregateRow>,
    pub mode: OverallMode,
    pub warnings: Vec<String>,
}

/// Per-(tool, library) mean coverage plus each tool's overall mean.
pub fn aggregate_by_library(
    dataset: &Dataset,
    grouping: &BTreeMap<String, String>,
    tool_of: &BTreeMap<String, String>,
    mode: OverallMode,
) -> Result<AggregateTable, AnalyticsError> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in &dataset.records {
        let library = grouping.get(&r.subject).ok_or_else(|| AnalyticsError::Ungrouped(r.subject.clone()))?;
        let tool = tool_of.get(&r.config).ok_or_else(|| AnalyticsError::Unmapped(r.config.clone()))?;
        groups.entry((tool.as_str(), library.as_str())).or_default().push(r.branch_coverage_pct);
    }

    let libraries: BTreeSet<&str> = grouping.values().map(String::as_str).collect();
    let tools: BTreeSet<&str> = groups.keys().map(|(t, _)| *t).collect();
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    for tool in &tools {
        let tool_groups: Vec<(&str, &Vec<f64>)> =
            groups.iter().filter(|((t, _), _)| t == tool).map(|((_, lib), vals)| (*lib, vals)).collect();
        for lib in &libraries {
            if !tool_groups.iter().any(|(l, _)| l == lib) {
                warnings.push(format!("no records for tool `{tool}` on library `{lib}`; row omitted"));
            }
        }
        let overall = match mode {
            OverallMode::RecordWeighted => {
                let all: Vec<f64> = tool_groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
                mean(&all)
            }
            OverallMode::LibraryWeighted => {
                let means: Vec<f64> = tool_groups.iter().map(|(_, v)| mean(v)).collect();
                mean(&means)
            }
        };
        for (lib, vals) in tool_groups {
            rows.push(AggregateRow {
                tool: tool.to_string(),
                library: lib.to_string(),
                records: vals.len(),
                avg_pct: mean(vals),
                overall_avg_pct: overall,
            });
        }
    }
    Ok(AggregateTable { rows, mode, warnings })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Number of subjects (optionally restricted to one library) on which some
/// configuration of `focal_tool` attains the subject maximum, i.e. `cov_r = 1`.
pub fn count_full_relative(
    dataset: &Dataset,
    grouping: &BTreeMap<String, String>,
    tool_of: &BTreeMap<String, String>,
    library_filter: Option<&str>,
    focal_tool: &str,
) -> usize {
    let mut hits = BTreeSet::new();
    for res in relative_coverage_all(dataset) {
        if let Some(lib) = library_filter {
            if grouping.get(&res.subject).map(String::as_str) != Some(lib) {
                continue;
            }
        }
        if tool_of.get(&res.config).map(String::as_str) == Some(focal_tool) && res.cov_r == 1.0 {
            hits.insert(res.subject);
        }
    }
    hits.len()
}

impl AggregateTable {
    /// Aligned plain-text rendering; percentages are rounded half-up to two
    /// decimals here and nowhere earlier.
    pub fn to_text(&self) -> String {
        let header = ["Tool", "Library", "Records", "Avg. Branch Coverage (%)", "Overall Avg. (%)"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.tool.clone(),
                    r.library.clone(),
                    r.records.to_string(),
                    format_fixed(r.avg_pct, 2),
                    format_fixed(r.overall_avg_pct, 2),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        let line = |cells: &[&str], out: &mut String| {
            let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header, &mut out);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("  "));
        for row in &body {
            let cells: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&cells, &mut out);
        }
        out
    }

    pub fn to_csv(&self) -> Result<String, AnalyticsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tool", "library", "records", "avg_pct", "overall_avg_pct"])?;
        for r in &self.rows {
            w.write_record([
                r.tool.as_str(),
                r.library.as_str(),
                &r.records.to_string(),
                &format_fixed(r.avg_pct, 2),
                &format_fixed(r.overall_avg_pct, 2),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| AnalyticsError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
