use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DropReason, FlowKey, Verdict};
use crate::controller::{Unresolved, UtilizationSnapshot};
use crate::primitives::{ScalingAction, ScalingKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub seq: u64,
    pub app: String,
    pub flow: FlowKey,
    pub size_bytes: u64,
    pub ingress_us: u64,
    pub completion_us: u64,
    pub deferred: bool,
    pub deferrals: u32,
    pub encaps: u32,
    pub stage_us: u64,
    pub link_us: u64,
    pub remote_us: u64,
    pub queue_us: u64,
    pub verdict: Verdict,
}

impl PacketRecord {
    pub fn latency_us(&self) -> u64 {
        self.completion_us - self.ingress_us
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppSummary {
    pub packets: u64,
    pub delivered: u64,
    pub p50_us: Option<u64>,
    pub p99_us: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub packets_total: u64,
    pub delivered: u64,
    pub deferred_packets: u64,
    pub drops_by_reason: BTreeMap<DropReason, u64>,
    pub per_app: BTreeMap<String, AppSummary>,
    pub actions_by_kind: BTreeMap<ScalingKind, u64>,
    pub unresolved: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub summary: Summary,
    pub packets: Vec<PacketRecord>,
    pub snapshots: Vec<UtilizationSnapshot>,
    pub actions: Vec<ScalingAction>,
    pub unresolved: Vec<Unresolved>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

impl SimReport {
    pub fn new(
        packets: Vec<PacketRecord>,
        snapshots: Vec<UtilizationSnapshot>,
        actions: Vec<ScalingAction>,
        unresolved: Vec<Unresolved>,
    ) -> Self {
        let mut summary = Summary {
            packets_total: packets.len() as u64,
            unresolved: unresolved.len() as u64,
            ..Summary::default()
        };
        let mut latencies: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for p in &packets {
            let app = summary.per_app.entry(p.app.clone()).or_default();
            app.packets += 1;
            if p.deferred {
                summary.deferred_packets += 1;
            }
            match &p.verdict {
                Verdict::Delivered(_) => {
                    summary.delivered += 1;
                    app.delivered += 1;
                    latencies.entry(&p.app).or_default().push(p.latency_us());
                }
                Verdict::Dropped(r) => *summary.drops_by_reason.entry(*r).or_default() += 1,
            }
        }
        for (app, mut l) in latencies {
            l.sort_unstable();
            let s = summary.per_app.get_mut(app).unwrap();
            s.p50_us = percentile(&l, 50.0);
            s.p99_us = percentile(&l, 99.0);
        }
        for a in &actions {
            *summary.actions_by_kind.entry(a.kind).or_default() += 1;
        }
        SimReport {
            summary,
            packets,
            snapshots,
            actions,
            unresolved,
        }
    }

    /// Stable serialization used for golden comparisons.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<SimReport, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Capacity drops at or after `time_us`.
    pub fn capacity_drops_since(&self, time_us: u64) -> u64 {
        self.packets
            .iter()
            .filter(|p| p.verdict == Verdict::Dropped(DropReason::Capacity) && p.completion_us >= time_us)
            .count() as u64
    }

    pub fn drops(&self, reason: DropReason) -> u64 {
        self.summary.drops_by_reason.get(&reason).copied().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), Some(50));
        assert_eq!(percentile(&v, 99.0), Some(99));
        assert_eq!(percentile(&[7], 99.0), Some(7));
        assert_eq!(percentile(&[1, 2, 3], 0.0), Some(1));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn empty_report_round_trips() {
        let r = SimReport::new(vec![], vec![], vec![], vec![]);
        assert_eq!(r.summary.packets_total, 0);
        assert_eq!(SimReport::from_json(&r.to_canonical_json()).unwrap(), r);
    }
}
