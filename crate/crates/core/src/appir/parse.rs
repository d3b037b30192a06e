use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use super::{
    ActionKind, AppManifest, KeyKind, MatchKind, StageDef, TableDef, DEFAULT_INITIAL_CAPACITY,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no app declaration")]
    NoApp,
    #[error("line {line}: unknown keyword `{keyword}`")]
    UnknownKeyword { line: usize, keyword: String },
    #[error("line {line}: duplicate stage `{name}`")]
    DuplicateStage { line: usize, name: String },
    #[error("line {line}: duplicate table `{name}`")]
    DuplicateTable { line: usize, name: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

fn invalid(line: usize, message: impl Into<String>) -> ParseError {
    ParseError::Invalid {
        line,
        message: message.into(),
    }
}

fn number(line: usize, field: &str, tok: Option<&str>) -> Result<u64, ParseError> {
    let tok = tok.ok_or_else(|| invalid(line, format!("`{field}` needs a value")))?;
    tok.parse::<u64>()
        .map_err(|_| invalid(line, format!("`{field}` expects a non-negative integer, got `{tok}`")))
}

fn parsed<T: FromStr<Err = String>>(line: usize, field: &str, tok: Option<&str>) -> Result<T, ParseError> {
    let tok = tok.ok_or_else(|| invalid(line, format!("`{field}` needs a value")))?;
    tok.parse::<T>().map_err(|m| invalid(line, m))
}

/// Parse an `.iapp` document.
///
/// Lines are `keyword args...`; `#` starts a comment. `table` lines belong to
/// the most recent `stage`.
pub fn parse_app(text: &str) -> Result<AppManifest, ParseError> {
    let mut app_name: Option<String> = None;
    let mut partition_key = None;
    let mut slo = None;
    let mut stages: Vec<StageDef> = Vec::new();
    let mut stage_names = BTreeSet::new();
    let mut table_names = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        let Some(keyword) = toks.next() else { continue };

        if keyword != "app" && app_name.is_none() {
            return Err(invalid(line, format!("`{keyword}` before app declaration")));
        }
        match keyword {
            "app" => {
                if app_name.is_some() {
                    return Err(invalid(line, "second app declaration"));
                }
                let name = toks.next().ok_or(ParseError::MissingField { line, field: "name" })?;
                app_name = Some(name.to_owned());
            }
            "slo" => match toks.next() {
                Some("max_latency_us") => {
                    let v = number(line, "max_latency_us", toks.next())?;
                    if v == 0 {
                        return Err(invalid(line, "max_latency_us must be positive"));
                    }
                    slo = Some(v);
                }
                Some(other) => {
                    return Err(ParseError::UnknownKeyword {
                        line,
                        keyword: other.to_owned(),
                    })
                }
                None => return Err(ParseError::MissingField { line, field: "max_latency_us" }),
            },
            "partition_key" => {
                partition_key = Some(parsed::<KeyKind>(line, "partition_key", toks.next())?);
            }
            "stage" => {
                let name = toks.next().ok_or(ParseError::MissingField { line, field: "name" })?;
                if !stage_names.insert(name.to_owned()) {
                    return Err(ParseError::DuplicateStage {
                        line,
                        name: name.to_owned(),
                    });
                }
                let mut action = None;
                let mut alus = 0;
                while let Some(field) = toks.next() {
                    match field {
                        "action" => action = Some(parsed::<ActionKind>(line, field, toks.next())?),
                        "alus" => alus = number(line, field, toks.next())?,
                        other => {
                            return Err(ParseError::UnknownKeyword {
                                line,
                                keyword: other.to_owned(),
                            })
                        }
                    }
                }
                stages.push(StageDef {
                    name: name.to_owned(),
                    tables: Vec::new(),
                    alu_cost: alus,
                    action_kind: action.ok_or(ParseError::MissingField { line, field: "action" })?,
                });
            }
            "table" => {
                let Some(stage) = stages.last_mut() else {
                    return Err(invalid(line, "table declared outside a stage"));
                };
                if !stage.tables.is_empty() {
                    return Err(invalid(
                        line,
                        format!("stage {} already has a table (one table per stage)", stage.name),
                    ));
                }
                let name = toks.next().ok_or(ParseError::MissingField { line, field: "name" })?;
                if !table_names.insert(name.to_owned()) {
                    return Err(ParseError::DuplicateTable {
                        line,
                        name: name.to_owned(),
                    });
                }
                let mut key = None;
                let mut entry_bytes = None;
                let mut capacity = DEFAULT_INITIAL_CAPACITY;
                let mut expandable = false;
                let mut match_kind = MatchKind::Exact;
                while let Some(field) = toks.next() {
                    match field {
                        "key" => key = Some(parsed::<KeyKind>(line, field, toks.next())?),
                        "entry_bytes" => entry_bytes = Some(number(line, field, toks.next())?),
                        "capacity" => capacity = number(line, field, toks.next())?,
                        "expandable" => expandable = true,
                        "match" => match_kind = parsed::<MatchKind>(line, field, toks.next())?,
                        other => {
                            return Err(ParseError::UnknownKeyword {
                                line,
                                keyword: other.to_owned(),
                            })
                        }
                    }
                }
                let entry_bytes =
                    entry_bytes.ok_or(ParseError::MissingField { line, field: "entry_bytes" })?;
                if entry_bytes == 0 {
                    return Err(invalid(line, "entry_bytes must be >= 1"));
                }
                if capacity == 0 {
                    return Err(invalid(line, "capacity must be >= 1"));
                }
                stage.tables.push(TableDef {
                    name: name.to_owned(),
                    key_kind: key.ok_or(ParseError::MissingField { line, field: "key" })?,
                    entry_bytes,
                    initial_capacity: capacity,
                    expandable,
                    match_kind,
                });
            }
            other => {
                return Err(ParseError::UnknownKeyword {
                    line,
                    keyword: other.to_owned(),
                })
            }
        }
    }

    let app_name = app_name.ok_or(ParseError::NoApp)?;
    if stages.is_empty() {
        return Err(ParseError::MissingField {
            line: text.lines().count().max(1),
            field: "stage",
        });
    }
    let mut manifest = AppManifest {
        app_name,
        stages,
        partition_key,
        slo_max_latency_us: slo,
        warnings: Vec::new(),
    };
    manifest.refresh_warnings();
    Ok(manifest)
}

/// Canonical printer; `parse_app(&render(m)) == m` for every valid manifest.
pub fn render(manifest: &AppManifest) -> String {
    let mut out = String::new();
    writeln!(out, "app {}", manifest.app_name).unwrap();
    if let Some(slo) = manifest.slo_max_latency_us {
        writeln!(out, "slo max_latency_us {slo}").unwrap();
    }
    if let Some(key) = manifest.partition_key {
        writeln!(out, "partition_key {key}").unwrap();
    }
    for stage in &manifest.stages {
        writeln!(
            out,
            "stage {} action {} alus {}",
            stage.name, stage.action_kind, stage.alu_cost
        )
        .unwrap();
        for t in &stage.tables {
            write!(
                out,
                "  table {} key {} entry_bytes {} capacity {}",
                t.name, t.key_kind, t.entry_bytes, t.initial_capacity
            )
            .unwrap();
            if t.expandable {
                out.push_str(" expandable");
            }
            writeln!(out, " match {}", t.match_kind).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const L4LB: &str = "app l4lb
slo max_latency_us 500
partition_key five_tuple
stage classify action insert_state alus 4
  table conn_table key five_tuple entry_bytes 32 capacity 128 expandable match exact
stage rewrite action rewrite alus 2
  table backend_map key dst_ip entry_bytes 16 capacity 64 match exact
";

    #[test]
    fn parses_l4lb() {
        let m = parse_app(L4LB).unwrap();
        assert_eq!(m.app_name, "l4lb");
        assert_eq!(m.stages.len(), 2);
        assert_eq!(m.partition_key, Some(KeyKind::FiveTuple));
        assert_eq!(m.slo_max_latency_us, Some(500));
        let conn = m.stages[0].table().unwrap();
        assert_eq!(conn.name, "conn_table");
        assert!(conn.expandable);
        assert_eq!(conn.initial_capacity, 128);
        assert_eq!(conn.entry_bytes, 32);
        assert_eq!(m.stages[0].alu_cost, 4);
        assert_eq!(m.stages[1].action_kind, ActionKind::Rewrite);
        assert!(!m.stages[1].table().unwrap().expandable);
        assert!(m.warnings.is_empty());
        assert!(m.horizontal_eligibility(0..2).is_ok());
    }

    #[test]
    fn empty_document_has_no_app() {
        assert_eq!(parse_app(""), Err(ParseError::NoApp));
        assert_eq!(parse_app("# just a comment\n\n"), Err(ParseError::NoApp));
        assert_eq!(ParseError::NoApp.to_string(), "no app declaration");
    }

    #[test]
    fn insert_state_without_partition_key_warns() {
        let m = parse_app(
            "app nat\nstage xlate action insert_state alus 1\n  table nat_table key five_tuple entry_bytes 16 expandable\n",
        )
        .unwrap();
        assert_eq!(m.warnings.len(), 1);
        assert!(m.horizontal_eligibility(0..1).is_err());
        assert_eq!(m.stages[0].tables[0].initial_capacity, DEFAULT_INITIAL_CAPACITY);
    }

    #[test]
    fn error_paths_carry_line_numbers() {
        assert_eq!(
            parse_app("app a\nfrobnicate\n"),
            Err(ParseError::UnknownKeyword { line: 2, keyword: "frobnicate".into() })
        );
        assert_eq!(
            parse_app("app a\nstage s action forward\nstage s action forward\n"),
            Err(ParseError::DuplicateStage { line: 3, name: "s".into() })
        );
        assert_eq!(
            parse_app("app a\nstage s alus 2\n"),
            Err(ParseError::MissingField { line: 2, field: "action" })
        );
        assert_eq!(
            parse_app("app a\nstage s action forward\n table t key dst_ip\n"),
            Err(ParseError::MissingField { line: 3, field: "entry_bytes" })
        );
        assert!(matches!(
            parse_app("app a\nstage s action forward\n table t key dst_ip entry_bytes 4\n table u key dst_ip entry_bytes 4\n"),
            Err(ParseError::Invalid { line: 4, .. })
        ));
        assert!(matches!(
            parse_app("app a\nstage s action forward\n table t key bogus entry_bytes 4\n"),
            Err(ParseError::Invalid { line: 3, .. })
        ));
        assert!(matches!(parse_app("app a\n"), Err(ParseError::MissingField { field: "stage", .. })));
    }

    #[test]
    fn custom_key_round_trips() {
        assert_eq!("custom(6)".parse::<KeyKind>(), Ok(KeyKind::Custom(6)));
        assert!("custom(0)".parse::<KeyKind>().is_err());
        assert_eq!(KeyKind::Custom(6).to_string(), "custom(6)");
    }

    fn arb_key() -> impl Strategy<Value = KeyKind> {
        prop_oneof![
            Just(KeyKind::FiveTuple),
            Just(KeyKind::DstIp),
            Just(KeyKind::SrcIp),
            (1u32..32).prop_map(KeyKind::Custom),
        ]
    }

    fn arb_action() -> impl Strategy<Value = ActionKind> {
        prop_oneof![
            Just(ActionKind::Forward),
            Just(ActionKind::DropOrForward),
            Just(ActionKind::Rewrite),
            Just(ActionKind::InsertState),
        ]
    }

    fn arb_table(i: usize) -> impl Strategy<Value = TableDef> {
        (arb_key(), 1u64..512, 1u64..5000, any::<bool>(), any::<bool>()).prop_map(
            move |(key_kind, entry_bytes, initial_capacity, expandable, ternary)| TableDef {
                name: format!("t{i}"),
                key_kind,
                entry_bytes,
                initial_capacity,
                expandable,
                match_kind: if ternary { MatchKind::Ternary } else { MatchKind::Exact },
            },
        )
    }

    fn arb_manifest() -> impl Strategy<Value = AppManifest> {
        let stages = prop::collection::vec((arb_action(), 0u64..16), 1..6)
            .prop_flat_map(|specs| {
                let parts: Vec<_> = specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (action_kind, alu_cost))| {
                        prop::option::of(arb_table(i))
                            .prop_map(move |table| StageDef {
                                name: format!("s{i}"),
                                tables: table.into_iter().collect(),
                                alu_cost,
                                action_kind,
                            })
                    })
                    .collect();
                parts
            });
        (
            "[a-z][a-z0-9_]{0,8}",
            stages,
            prop::option::of(arb_key()),
            prop::option::of(1u64..100_000),
        )
            .prop_map(|(app_name, stages, partition_key, slo)| {
                let mut m = AppManifest {
                    app_name,
                    stages,
                    partition_key,
                    slo_max_latency_us: slo,
                    warnings: Vec::new(),
                };
                m.refresh_warnings();
                m
            })
    }

    proptest! {
        #[test]
        fn render_then_parse_is_identity(m in arb_manifest()) {
            let text = render(&m);
            prop_assert_eq!(parse_app(&text).unwrap(), m);
        }
    }
}
