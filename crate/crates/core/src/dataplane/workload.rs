use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::{Action, EntryKey};
use super::{project_key, FlowKey};
use crate::appir::{MatchKind, TableDef};

fn default_size() -> u64 {
    64
}

/// A constant-rate packet stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub start_us: u64,
    pub duration_us: u64,
    pub pps: u64,
    #[serde(default = "default_size")]
    pub size_bytes: u64,
    pub flow: FlowKey,
    /// Target application; defaults to the deployment's first app.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
}

/// Header fields a rule matches on. Absent fields are wildcards; IPs take
/// CIDR notation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<u8>,
}

fn parse_cidr(s: &str) -> Result<(Ipv4Addr, u32), String> {
    let (addr, len) = match s.split_once('/') {
        Some((a, l)) => (a, l.parse::<u32>().map_err(|_| format!("bad prefix length in `{s}`"))?),
        None => (s, 32),
    };
    if len > 32 {
        return Err(format!("prefix length {len} exceeds 32 in `{s}`"));
    }
    let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad IPv4 address in `{s}`"))?;
    Ok((addr, len))
}

impl MatchSpec {
    /// Value and mask over the canonical 13-byte 5-tuple layout.
    pub fn canonical(&self) -> Result<([u8; 13], [u8; 13]), String> {
        let mut value = [0u8; 13];
        let mut mask = [0u8; 13];
        for (field, off) in [(&self.src_ip, 0usize), (&self.dst_ip, 4)] {
            if let Some(cidr) = field {
                let (addr, len) = parse_cidr(cidr)?;
                let m: u32 = if len == 0 { 0 } else { u32::MAX << (32 - len) };
                value[off..off + 4].copy_from_slice(&(u32::from(addr) & m).to_be_bytes());
                mask[off..off + 4].copy_from_slice(&m.to_be_bytes());
            }
        }
        for (field, off) in [(self.src_port, 8usize), (self.dst_port, 10)] {
            if let Some(p) = field {
                value[off..off + 2].copy_from_slice(&p.to_be_bytes());
                mask[off..off + 2].copy_from_slice(&[0xff, 0xff]);
            }
        }
        if let Some(p) = self.proto {
            value[12] = p;
            mask[12] = 0xff;
        }
        Ok((value, mask))
    }

    /// Whether `flow` satisfies this match.
    pub fn matches(&self, flow: &FlowKey) -> Result<bool, String> {
        let (value, mask) = self.canonical()?;
        let c = flow.canonical_bytes();
        Ok((0..13).all(|i| c[i] & mask[i] == value[i]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Permit,
    Deny,
    Pool(Vec<u32>),
    Backend(u32),
}

impl From<&RuleAction> for Action {
    fn from(a: &RuleAction) -> Action {
        match a {
            RuleAction::Permit => Action::Permit,
            RuleAction::Deny => Action::Deny,
            RuleAction::Pool(p) => Action::Pool(p.clone()),
            RuleAction::Backend(b) => Action::Backend(*b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSpec {
    #[serde(rename = "match", default)]
    pub match_spec: MatchSpec,
    pub action: RuleAction,
    #[serde(default)]
    pub priority: u32,
}

impl RuleSpec {
    /// Table key for this rule. Exact tables need every key byte specified.
    pub fn entry_key(&self, def: &TableDef) -> Result<EntryKey, String> {
        let (value, mask) = self.match_spec.canonical()?;
        let v = project_key(&value, def.key_kind);
        let m = project_key(&mask, def.key_kind);
        match def.match_kind {
            MatchKind::Exact => {
                if m.iter().any(|b| *b != 0xff) {
                    return Err(format!(
                        "rule for exact-match table {} must fully specify its {} key",
                        def.name, def.key_kind
                    ));
                }
                Ok(EntryKey::exact(v))
            }
            MatchKind::Ternary => Ok(EntryKey::ternary(v, m, self.priority)),
        }
    }
}

/// A control-plane rule insertion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlOp {
    pub at_us: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
    pub table: String,
    pub rule: RuleSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub control: Vec<ControlOp>,
}

impl Workload {
    pub fn is_empty(&self) -> bool {
        self.flows.is_empty() && self.control.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduledPacket {
    pub seq: u64,
    pub time_us: u64,
    pub flow_index: usize,
    pub app: Option<String>,
    pub flow: FlowKey,
    pub size_bytes: u64,
}

/// Expands flows into individual packets with ingress before `horizon_us`.
///
/// Packets of a flow are spaced `1e6 / pps` µs apart, offset by a per-flow
/// phase drawn from `seed`. Sequence numbers follow (time, flow, k) order.
pub fn packet_schedule(workload: &Workload, seed: u64, horizon_us: u64) -> Vec<ScheduledPacket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw: Vec<(u64, usize, u64)> = Vec::new();
    for (i, f) in workload.flows.iter().enumerate() {
        if f.pps == 0 {
            continue;
        }
        let interval = 1e6 / f.pps as f64;
        let phase = rng.gen::<f64>() * interval;
        let end = f.start_us.saturating_add(f.duration_us).min(horizon_us);
        let mut k = 0u64;
        loop {
            let t = f.start_us + (phase + k as f64 * interval).floor() as u64;
            if t >= end {
                break;
            }
            raw.push((t, i, k));
            k += 1;
        }
    }
    raw.sort_unstable();
    raw.into_iter()
        .enumerate()
        .map(|(seq, (time_us, flow_index, _))| {
            let f = &workload.flows[flow_index];
            ScheduledPacket {
                seq: seq as u64,
                time_us,
                flow_index,
                app: f.app.clone(),
                flow: f.flow,
                size_bytes: f.size_bytes,
            }
        })
        .collect()
}
