//! Stage identifiers and supervisory transitions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the seven workflow stages, in fixed forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    Understand,
    Requirements,
    Plan,
    GenerateCode,
    Execute,
    Analyze,
    Report,
}

impl StageId {
    pub const ALL: [StageId; 7] = [
        StageId::Understand,
        StageId::Requirements,
        StageId::Plan,
        StageId::GenerateCode,
        StageId::Execute,
        StageId::Analyze,
        StageId::Report,
    ];

    /// The stage that follows in forward order; `None` for `Report`.
    pub fn next(self) -> Option<StageId> {
        let idx = self as usize;
        Self::ALL.get(idx + 1).copied()
    }

    pub fn is_terminal(self) -> bool {
        self == StageId::Report
    }

    /// Lower-case identifier used in file names (playbooks, prompt templates).
    pub fn slug(self) -> &'static str {
        match self {
            StageId::Understand => "understand",
            StageId::Requirements => "requirements",
            StageId::Plan => "plan",
            StageId::GenerateCode => "generate_code",
            StageId::Execute => "execute",
            StageId::Analyze => "analyze",
            StageId::Report => "report",
        }
    }

    pub fn from_slug(s: &str) -> Option<StageId> {
        Self::ALL.iter().copied().find(|st| st.slug() == s)
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            StageId::Understand => "Understand",
            StageId::Requirements => "Requirements",
            StageId::Plan => "Plan",
            StageId::GenerateCode => "GenerateCode",
            StageId::Execute => "Execute",
            StageId::Analyze => "Analyze",
            StageId::Report => "Report",
        };
        f.write_str(name)
    }
}

impl FromStr for StageId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.to_string().eq_ignore_ascii_case(s) || st.slug() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

/// A supervisory decision recorded after each stage execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transition {
    Proceed,
    Repeat { target: StageId },
    Backtrack { target: StageId },
    Stop { reason: String },
}

impl Transition {
    pub fn stop(reason: impl Into<String>) -> Self {
        Transition::Stop { reason: reason.into() }
    }

    /// Stage entered after taking this transition out of `from`.
    ///
    /// `Stop` always leads to `Report` (consolidation) unless `from` is
    /// already `Report`; leaving `Report` ends the workflow.
    pub fn target(&self, from: StageId) -> Option<StageId> {
        match self {
            Transition::Proceed => from.next(),
            Transition::Repeat { target } | Transition::Backtrack { target } => Some(*target),
            Transition::Stop { .. } => (!from.is_terminal()).then_some(StageId::Report),
        }
    }

    /// Checks the structural invariants relative to the stage being left.
    pub fn is_legal_from(&self, from: StageId) -> bool {
        match self {
            Transition::Proceed => true,
            Transition::Repeat { target } => *target == from,
            Transition::Backtrack { target } => *target < from,
            Transition::Stop { .. } => true,
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transition::Proceed => f.write_str("Proceed"),
            Transition::Repeat { target } => write!(f, "Repeat({target})"),
            Transition::Backtrack { target } => write!(f, "Backtrack({target})"),
            Transition::Stop { reason } => write!(f, "Stop({reason})"),
        }
    }
}
