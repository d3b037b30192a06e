use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dataplane::SimReport;
use crate::primitives::write_audit_jsonl;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const AUDIT_LOG: &str = "audit.jsonl";
pub const REPORT_JSON: &str = "report.json";

/// One scope of one epoch snapshot. Columns that do not apply to the scope
/// are left empty.
#[derive(Debug, Default, Serialize)]
struct Row<'a> {
    time_us: u64,
    app: &'a str,
    switch: &'a str,
    table: &'a str,
    occupancy: Option<f64>,
    link_load: Option<f64>,
    drops_capacity: Option<u64>,
    drops_other: Option<u64>,
    p50_us: Option<u64>,
    p99_us: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportedFiles {
    pub summary_csv: PathBuf,
    pub audit_log: PathBuf,
    pub report_json: PathBuf,
}

fn write_summary<W: Write>(report: &SimReport, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if report.snapshots.is_empty() {
        w.write_record([
            "time_us",
            "app",
            "switch",
            "table",
            "occupancy",
            "link_load",
            "drops_capacity",
            "drops_other",
            "p50_us",
            "p99_us",
        ])?;
    }
    for s in &report.snapshots {
        for sw in &s.switches {
            let link_load = s
                .links
                .iter()
                .filter(|l| l.a == sw.switch || l.b == sw.switch)
                .map(|l| l.load)
                .fold(0.0, f64::max);
            let occupancy = if sw.capacity.sram_bytes == 0 {
                0.0
            } else {
                sw.usage.sram_bytes as f64 / sw.capacity.sram_bytes as f64
            };
            w.serialize(Row {
                time_us: s.time_us,
                switch: sw.switch.as_str(),
                occupancy: Some(occupancy),
                link_load: Some(link_load),
                drops_capacity: Some(sw.drops_capacity),
                drops_other: Some(sw.drops_other),
                ..Row::default()
            })?;
        }
        for t in &s.tables {
            w.serialize(Row {
                time_us: s.time_us,
                app: &t.app,
                switch: t.switch.as_str(),
                table: &t.table,
                occupancy: Some(t.occupancy),
                ..Row::default()
            })?;
        }
        for a in &s.apps {
            w.serialize(Row {
                time_us: s.time_us,
                app: &a.app,
                drops_capacity: Some(a.drops_capacity),
                drops_other: Some(a.drops_other),
                p50_us: a.p50_us,
                p99_us: a.p99_us,
                ..Row::default()
            })?;
        }
    }
    w.flush()
}

/// Writes the per-epoch summary CSV, the scaling audit log and the canonical
/// report into `dir`, creating it if needed.
pub fn export_metrics(report: &SimReport, dir: &Path) -> io::Result<ExportedFiles> {
    fs::create_dir_all(dir)?;
    let files = ExportedFiles {
        summary_csv: dir.join(SUMMARY_CSV),
        audit_log: dir.join(AUDIT_LOG),
        report_json: dir.join(REPORT_JSON),
    };
    write_summary(report, BufWriter::new(File::create(&files.summary_csv)?))?;
    let mut audit = BufWriter::new(File::create(&files.audit_log)?);
    write_audit_jsonl(&report.actions, &mut audit)?;
    audit.flush()?;
    fs::write(&files.report_json, report.to_canonical_json())?;
    Ok(files)
}

/// Reads back a report written by [`export_metrics`].
pub fn load_report(dir: &Path) -> io::Result<SimReport> {
    let path = dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path)?;
    SimReport::from_json(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{SwitchUsage, UtilizationSnapshot};
    use crate::fabric::{ResourceVector, SwitchId};

    fn snapshot(t: u64, switches: &[&str]) -> UtilizationSnapshot {
        UtilizationSnapshot {
            time_us: t,
            tables: vec![],
            switches: switches
                .iter()
                .map(|s| SwitchUsage {
                    switch: SwitchId::from(*s),
                    usage: ResourceVector::new(512, 1, 0),
                    capacity: ResourceVector::new(2048, 4, 8),
                    drops_capacity: 0,
                    drops_other: 1,
                })
                .collect(),
            links: vec![],
            apps: vec![],
            segments: vec![],
            drops_by_reason: Default::default(),
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let f = export_metrics(&SimReport::default(), dir.path()).unwrap();
        let csv = fs::read_to_string(&f.summary_csv).unwrap();
        assert_eq!(csv, "time_us,app,switch,table,occupancy,link_load,drops_capacity,drops_other,p50_us,p99_us\n");
        assert_eq!(fs::read_to_string(&f.audit_log).unwrap(), "");
        assert_eq!(load_report(dir.path()).unwrap(), SimReport::default());
    }

    #[test]
    fn one_row_per_switch_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let snaps = (1..=3).map(|e| snapshot(e * 1000, &["s1", "s2"])).collect();
        let r = SimReport::new(vec![], snaps, vec![], vec![]);
        let f = export_metrics(&r, dir.path()).unwrap();
        let csv = fs::read_to_string(&f.summary_csv).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[1], "1000,,s1,,0.25,0.0,0,1,,");
        let again = tempfile::tempdir().unwrap();
        let g = export_metrics(&r, again.path()).unwrap();
        for (a, b) in [(&f.summary_csv, &g.summary_csv), (&f.audit_log, &g.audit_log), (&f.report_json, &g.report_json)] {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
