use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataplane::{DropReason, FlowKey, SimReport, Verdict, VerdictKind};

/// Divergences listed in full; the rest are only counted.
pub const MAX_LISTED: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub seq: u64,
    pub flow: FlowKey,
    pub observed: String,
    pub oracle: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equivalence {
    pub compared: u64,
    /// Packets skipped because either side dropped them for lack of
    /// resources, by reason.
    pub excluded: BTreeMap<DropReason, u64>,
    pub divergent: u64,
    pub first_divergences: Vec<Divergence>,
}

impl Equivalence {
    pub fn passed(&self) -> bool {
        self.divergent == 0
    }
}

impl fmt::Display for Equivalence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let excluded: u64 = self.excluded.values().sum();
        writeln!(
            f,
            "{}: {} compared, {} excluded, {} divergent",
            if self.passed() { "PASS" } else { "FAIL" },
            self.compared,
            excluded,
            self.divergent
        )?;
        for (r, n) in &self.excluded {
            writeln!(f, "  excluded {r}: {n}")?;
        }
        for d in &self.first_divergences {
            writeln!(f, "  seq {} flow {}: observed {} oracle {}", d.seq, d.flow, d.observed, d.oracle)?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EquivalenceError {
    #[error("reports cover different packets: {observed} vs {oracle} records")]
    PacketCount { observed: usize, oracle: usize },
    #[error("packet {index} differs in identity (seq {observed} vs {oracle}); were both runs given the same workload and seed?")]
    Misaligned { index: usize, observed: u64, oracle: u64 },
}

fn describe(v: &Verdict) -> String {
    match v {
        Verdict::Delivered(d) => match d.verdict_kind {
            VerdictKind::Accept => "accept".into(),
            VerdictKind::Deny => "deny".into(),
            VerdictKind::ForwardTo(b) => format!("forward_to({b})"),
            VerdictKind::NatMap(id) => format!("nat_map({id})"),
        },
        Verdict::Dropped(r) => format!("drop({r})"),
    }
}

/// Bijection between NAT ids allocated by the two runs.
#[derive(Default)]
struct IdMatching {
    forward: BTreeMap<u64, u64>,
    backward: BTreeMap<u64, u64>,
}

impl IdMatching {
    fn pair(&mut self, ours: u64, theirs: u64) -> bool {
        match (self.forward.get(&ours), self.backward.get(&theirs)) {
            (None, None) => {
                self.forward.insert(ours, theirs);
                self.backward.insert(theirs, ours);
                true
            }
            (Some(t), Some(o)) => *t == theirs && *o == ours,
            _ => false,
        }
    }
}

/// Compares per-packet verdicts of a deployment run against the oracle run
/// of the same workload.
///
/// Packets either side dropped for lack of resources are excluded. NAT ids
/// match when a consistent one-to-one renaming maps one run onto the other.
pub fn check_equivalence(report: &SimReport, oracle: &SimReport) -> Result<Equivalence, EquivalenceError> {
    if report.packets.len() != oracle.packets.len() {
        return Err(EquivalenceError::PacketCount {
            observed: report.packets.len(),
            oracle: oracle.packets.len(),
        });
    }
    let mut out = Equivalence::default();
    let mut ids = IdMatching::default();
    for (i, (p, o)) in report.packets.iter().zip(&oracle.packets).enumerate() {
        if p.seq != o.seq || p.flow != o.flow || p.ingress_us != o.ingress_us {
            return Err(EquivalenceError::Misaligned { index: i, observed: p.seq, oracle: o.seq });
        }
        let resource_drop = [&p.verdict, &o.verdict]
            .into_iter()
            .find_map(|v| v.drop_reason().filter(DropReason::is_resource_drop));
        if let Some(r) = resource_drop {
            *out.excluded.entry(r).or_default() += 1;
            continue;
        }
        out.compared += 1;
        let same = match (&p.verdict, &o.verdict) {
            (Verdict::Delivered(a), Verdict::Delivered(b)) => match (a.verdict_kind, b.verdict_kind) {
                (VerdictKind::NatMap(x), VerdictKind::NatMap(y)) => ids.pair(x, y),
                (x, y) => x == y,
            },
            (a, b) => a == b,
        };
        if !same {
            out.divergent += 1;
            if out.first_divergences.len() < MAX_LISTED {
                out.first_divergences.push(Divergence {
                    seq: p.seq,
                    flow: p.flow,
                    observed: describe(&p.verdict),
                    oracle: describe(&o.verdict),
                });
            }
        }
    }
    Ok(out)
}
