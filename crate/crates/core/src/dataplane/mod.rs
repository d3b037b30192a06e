//! Deterministic discrete-event simulation of packets crossing deployed
//! pipeline segments.
//!
//! A packet enters at its app's ingress switch, is routed segment by segment
//! (encapsulated with an [`InfinityTag`] whenever the next segment lives on
//! another switch) and leaves with a [`Verdict`]. Latency is accounted in
//! four buckets (stage processing, link propagation, remote round trips and
//! queueing) which always sum to `completion - ingress`.

mod hash;
mod report;
mod sim;
mod table;
mod workload;

pub use hash::{fnv1a64, flow_pin, lb_select, LbError};
pub use report::{percentile, AppSummary, PacketRecord, SimReport, Summary};
pub use sim::{run, run_oracle, Continuation, SimConfig, SimOutcome, Simulation, DEFAULT_IDLE_TIMEOUT_US};
pub use table::{Action, Entry, EntryKey, InsertError, Lookup, PendingInsert, TableLedger, TableState};
pub use workload::{packet_schedule, ControlOp, FlowSpec, MatchSpec, RuleAction, RuleSpec, ScheduledPacket, Workload};

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::appir::KeyKind;
use crate::fabric::SwitchId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FlowKey {
    pub fn new(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, src_port: u16, dst_port: u16, proto: u8) -> Self {
        FlowKey {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            proto,
        }
    }

    /// Big-endian concatenation of the five fields.
    pub fn canonical_bytes(&self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[0..4].copy_from_slice(&self.src_ip.octets());
        out[4..8].copy_from_slice(&self.dst_ip.octets());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out[12] = self.proto;
        out
    }

    /// Bytes of the key a table of kind `kind` matches on.
    pub fn key_bytes(&self, kind: KeyKind) -> Vec<u8> {
        project_key(&self.canonical_bytes(), kind)
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}/{}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto
        )
    }
}

/// Projects a canonical 13-byte 5-tuple onto the bytes used by `kind`.
pub fn project_key(canonical: &[u8; 13], kind: KeyKind) -> Vec<u8> {
    match kind {
        KeyKind::FiveTuple => canonical.to_vec(),
        KeyKind::SrcIp => canonical[0..4].to_vec(),
        KeyKind::DstIp => canonical[4..8].to_vec(),
        KeyKind::Custom(w) => {
            let w = w as usize;
            let mut v = canonical[..w.min(13)].to_vec();
            v.resize(w, 0);
            v
        }
    }
}

/// Overlay encapsulation header: only the id of the switch hosting the next
/// segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfinityTag {
    pub target_switch_id: SwitchId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Table full, or the table lacks rules the control plane already asked for.
    Capacity,
    /// Pause buffer overflow during a reconfiguration.
    Migration,
    RemoteCapacity,
    OverlayMisroute,
    /// No segment hosts the next stage.
    NoRoute,
}

impl DropReason {
    /// Drops that reflect resource exhaustion rather than an application
    /// decision.
    pub fn is_resource_drop(&self) -> bool {
        matches!(
            self,
            DropReason::Capacity | DropReason::Migration | DropReason::RemoteCapacity
        )
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::Capacity => "capacity",
            DropReason::Migration => "migration",
            DropReason::RemoteCapacity => "remote_capacity",
            DropReason::OverlayMisroute => "overlay_misroute",
            DropReason::NoRoute => "no_route",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Accept,
    Deny,
    ForwardTo(u32),
    NatMap(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceHop {
    pub switch: SwitchId,
    /// Ordinal of the segment along the app pipeline.
    pub segment: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub app_name: String,
    pub verdict_kind: VerdictKind,
    pub serviced_by: Vec<ServiceHop>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Delivered(DecisionRecord),
    Dropped(DropReason),
}

impl Verdict {
    pub fn decision(&self) -> Option<&DecisionRecord> {
        match self {
            Verdict::Delivered(d) => Some(d),
            Verdict::Dropped(_) => None,
        }
    }

    pub fn drop_reason(&self) -> Option<DropReason> {
        match self {
            Verdict::Dropped(r) => Some(*r),
            Verdict::Delivered(_) => None,
        }
    }
}

/// Values carried between stages of one packet's pipeline traversal.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageContext {
    pub pin: Option<u64>,
    pub flow_id: Option<u64>,
    pub backend: Option<u32>,
    pub denied: bool,
}

/// A packet in flight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub seq: u64,
    pub app: String,
    pub flow: FlowKey,
    pub size_bytes: u64,
    pub ingress_time_us: u64,
    pub completion_time_us: Option<u64>,
    pub tag: Option<InfinityTag>,
    pub deferred: bool,
    pub verdict: Option<Verdict>,
    /// Index of the next pipeline stage to execute.
    pub next_stage: usize,
    pub ctx: StageContext,
    pub deferrals: u32,
    pub encaps: u32,
    pub stage_us: u64,
    pub link_us: u64,
    pub remote_us: u64,
    pub queue_us: u64,
    pub serviced_by: Vec<ServiceHop>,
}

impl Packet {
    pub fn new(seq: u64, app: impl Into<String>, flow: FlowKey, size_bytes: u64, ingress_time_us: u64) -> Self {
        Packet {
            seq,
            app: app.into(),
            flow,
            size_bytes,
            ingress_time_us,
            completion_time_us: None,
            tag: None,
            deferred: false,
            verdict: None,
            next_stage: 0,
            ctx: StageContext::default(),
            deferrals: 0,
            encaps: 0,
            stage_us: 0,
            link_us: 0,
            remote_us: 0,
            queue_us: 0,
            serviced_by: Vec::new(),
        }
    }
}
