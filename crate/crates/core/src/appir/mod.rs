//! Application IR: a line-oriented pipeline DSL, its parser and printer, and
//! the compiler that turns a manifest into a minimally mapped design.

mod compile;
mod parse;

pub use compile::{compile_minimal, footprint, footprint_with_capacity, CompileError, MinimalDesign};
pub use parse::{parse_app, render, ParseError};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Table capacity used when the DSL omits `capacity`.
pub const DEFAULT_INITIAL_CAPACITY: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyKind {
    FiveTuple,
    DstIp,
    SrcIp,
    /// Leading `width` bytes of the canonical 5-tuple encoding.
    Custom(u32),
}

impl KeyKind {
    pub fn width_bytes(&self) -> usize {
        match self {
            KeyKind::FiveTuple => 13,
            KeyKind::DstIp | KeyKind::SrcIp => 4,
            KeyKind::Custom(w) => *w as usize,
        }
    }
}

impl fmt::Display for KeyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyKind::FiveTuple => f.write_str("five_tuple"),
            KeyKind::DstIp => f.write_str("dst_ip"),
            KeyKind::SrcIp => f.write_str("src_ip"),
            KeyKind::Custom(w) => write!(f, "custom({w})"),
        }
    }
}

impl FromStr for KeyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "five_tuple" => Ok(KeyKind::FiveTuple),
            "dst_ip" => Ok(KeyKind::DstIp),
            "src_ip" => Ok(KeyKind::SrcIp),
            _ => {
                let width = s
                    .strip_prefix("custom(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| format!("unknown key kind `{s}`"))?;
                match width.parse::<u32>() {
                    Ok(w) if w >= 1 => Ok(KeyKind::Custom(w)),
                    _ => Err(format!("custom key width must be a positive integer, got `{width}`")),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Ternary,
}

impl fmt::Display for MatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchKind::Exact => "exact",
            MatchKind::Ternary => "ternary",
        })
    }
}

impl FromStr for MatchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MatchKind::Exact),
            "ternary" => Ok(MatchKind::Ternary),
            _ => Err(format!("unknown match kind `{s}`")),
        }
    }
}

/// What a stage does with the result of its table lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Pass the packet on; a hit on a backend record pins the egress backend.
    Forward,
    /// Permit on a `permit` hit, deny on a `deny` hit or a miss.
    DropOrForward,
    /// Pick a backend from a pool record.
    Rewrite,
    /// Per-flow state: insert a fresh record on miss.
    InsertState,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Forward => "forward",
            ActionKind::DropOrForward => "drop_or_forward",
            ActionKind::Rewrite => "rewrite",
            ActionKind::InsertState => "insert_state",
        })
    }
}

impl FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(ActionKind::Forward),
            "drop_or_forward" => Ok(ActionKind::DropOrForward),
            "rewrite" => Ok(ActionKind::Rewrite),
            "insert_state" => Ok(ActionKind::InsertState),
            _ => Err(format!("unknown action kind `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub key_kind: KeyKind,
    pub entry_bytes: u64,
    pub initial_capacity: u64,
    pub expandable: bool,
    pub match_kind: MatchKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDef {
    pub name: String,
    /// At most one table per stage.
    pub tables: Vec<TableDef>,
    pub alu_cost: u64,
    pub action_kind: ActionKind,
}

impl StageDef {
    pub fn table(&self) -> Option<&TableDef> {
        self.tables.first()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppManifest {
    pub app_name: String,
    pub stages: Vec<StageDef>,
    pub partition_key: Option<KeyKind>,
    pub slo_max_latency_us: Option<u64>,
    /// Non-fatal findings from validation.
    pub warnings: Vec<String>,
}

impl AppManifest {
    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }

    /// Stage index hosting table `name`.
    pub fn table_stage(&self, name: &str) -> Option<usize> {
        self.stages
            .iter()
            .position(|s| s.tables.iter().any(|t| t.name == name))
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.stages
            .iter()
            .flat_map(|s| s.tables.iter())
            .find(|t| t.name == name)
    }

    /// Whether stages `range` may be replicated with traffic split by the
    /// partition key.
    pub fn horizontal_eligibility(&self, range: std::ops::Range<usize>) -> Result<KeyKind, String> {
        let key = self
            .partition_key
            .ok_or_else(|| format!("app {} declares no partition_key", self.app_name))?;
        for stage in &self.stages[range] {
            if let Some(t) = stage.tables.iter().find(|t| t.match_kind == MatchKind::Ternary) {
                return Err(format!("table {} uses ternary match", t.name));
            }
        }
        Ok(key)
    }

    /// Re-derives the warning list from the manifest content.
    pub(crate) fn refresh_warnings(&mut self) {
        self.warnings.clear();
        if self.partition_key.is_some() {
            return;
        }
        for stage in &self.stages {
            if stage.action_kind == ActionKind::InsertState
                && stage.tables.iter().any(|t| t.expandable)
            {
                self.warnings.push(format!(
                    "stage {} keeps per-flow state in an expandable table but the app has no \
                     partition_key; horizontal scaling disabled",
                    stage.name
                ));
            }
        }
    }
}
