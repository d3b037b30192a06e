use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;

use super::report::{PacketRecord, SimReport};
use super::table::{Action, Entry, EntryKey, Lookup, PendingInsert, TableState};
use super::workload::{packet_schedule, ControlOp, Workload};
use super::{flow_pin, lb_select, DecisionRecord, DropReason, FlowKey, InfinityTag, Packet, ServiceHop, StageContext, Verdict, VerdictKind};
use crate::appir::{ActionKind, AppManifest, MatchKind};
use crate::controller::{collect, Controller, EpochCounters, Policy, Unresolved, UtilizationSnapshot};
use crate::fabric::{SwitchId, Topology};
use crate::primitives::{oracle_topology, Deployment, ScalingAction, SegmentId};

pub const DEFAULT_IDLE_TIMEOUT_US: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub horizon_us: u64,
    pub epoch_us: u64,
    pub stage_latency_us: u64,
    pub idle_timeout_us: u64,
    /// Runs the controller loop when set.
    pub policy: Option<Policy>,
    pub trace: bool,
}

impl SimConfig {
    pub fn new(seed: u64, horizon_us: u64) -> Self {
        SimConfig {
            seed,
            horizon_us,
            epoch_us: 1000,
            stage_latency_us: 1,
            idle_timeout_us: DEFAULT_IDLE_TIMEOUT_US,
            policy: None,
            trace: false,
        }
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.epoch_us = policy.epoch_us;
        self.policy = Some(policy);
        self
    }
}

/// Event kinds in tie-breaking priority order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    RemoteReply,
    ControlInsert,
    PacketArrival,
    EntryTimeout,
    ReconfigDone,
    ControllerEpoch,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Payload {
    Arrival { pkt: usize, switch: SwitchId },
    Reply { pkt: usize, switch: SwitchId, segment: SegmentId },
    Control(usize),
    Tick,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Event {
    time: u64,
    kind: Kind,
    seq: u64,
    payload: Payload,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.kind, self.seq).cmp(&(other.time, other.kind, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// What happened to a packet at one switch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Continuation {
    Forwarded { to: SwitchId, arrive_at_us: u64 },
    Executed { segment: SegmentId, stage: usize },
    Deferred { segment: SegmentId, reply_at_us: u64 },
    Buffered { segment: SegmentId },
    Finished,
    Dropped(DropReason),
}

impl fmt::Display for Continuation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Continuation::Forwarded { to, arrive_at_us } => write!(f, "forward to={to} at={arrive_at_us}"),
            Continuation::Executed { segment, stage } => write!(f, "exec seg={segment} stage={stage}"),
            Continuation::Deferred { segment, reply_at_us } => write!(f, "defer seg={segment} reply={reply_at_us}"),
            Continuation::Buffered { segment } => write!(f, "buffer seg={segment}"),
            Continuation::Finished => f.write_str("finish"),
            Continuation::Dropped(r) => write!(f, "drop reason={r}"),
        }
    }
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub report: SimReport,
    pub deployment: Deployment,
    pub topology: Topology,
    pub trace: Vec<String>,
}

struct Parked {
    pkt: usize,
    switch: SwitchId,
    since_us: u64,
}

pub struct Simulation {
    topology: Topology,
    deployment: Deployment,
    cfg: SimConfig,
    controller: Option<Controller>,
    packets: Vec<Packet>,
    control: Vec<ControlOp>,
    queue: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    /// Time each (link, direction) transmitter becomes free.
    port_free_at: BTreeMap<(usize, bool), u64>,
    buffers: BTreeMap<SegmentId, VecDeque<Parked>>,
    counters: EpochCounters,
    snapshots: Vec<UtilizationSnapshot>,
    actions: Vec<ScalingAction>,
    unresolved: Vec<Unresolved>,
    trace: Option<Vec<String>>,
    default_app: String,
    now: u64,
}

impl Simulation {
    pub fn new(topology: Topology, deployment: Deployment, workload: &Workload, cfg: SimConfig) -> Self {
        let default_app = deployment.apps.keys().next().cloned().unwrap_or_default();
        let mut sim = Simulation {
            controller: cfg.policy.clone().map(Controller::new),
            trace: cfg.trace.then(Vec::new),
            topology,
            deployment,
            packets: Vec::new(),
            control: workload.control.clone(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            port_free_at: BTreeMap::new(),
            buffers: BTreeMap::new(),
            counters: EpochCounters::default(),
            snapshots: Vec::new(),
            actions: Vec::new(),
            unresolved: Vec::new(),
            default_app,
            now: 0,
            cfg,
        };
        for (i, op) in workload.control.iter().enumerate() {
            if op.at_us < sim.cfg.horizon_us {
                sim.push(op.at_us, Kind::ControlInsert, Payload::Control(i));
            }
        }
        for sp in packet_schedule(workload, sim.cfg.seed, sim.cfg.horizon_us) {
            let app = sp.app.unwrap_or_else(|| sim.default_app.clone());
            sim.inject(Packet::new(sp.seq, app, sp.flow, sp.size_bytes, sp.time_us));
        }
        let settling: Vec<u64> = sim.deployment.segments().filter_map(|s| s.paused_until_us).collect();
        for t in settling {
            sim.push(t, Kind::ReconfigDone, Payload::Tick);
        }
        let epoch = sim.cfg.epoch_us.max(1);
        let mut t = epoch;
        while t <= sim.cfg.horizon_us {
            sim.push(t, Kind::EntryTimeout, Payload::Tick);
            sim.push(t, Kind::ControllerEpoch, Payload::Tick);
            t += epoch;
        }
        sim
    }

    /// Adds a packet entering at its app's ingress switch at its ingress
    /// time. Its `seq` is reassigned to its position in the run.
    pub fn inject(&mut self, packet: Packet) -> u64 {
        let switch = self
            .deployment
            .ingress(&packet.app)
            .cloned()
            .unwrap_or_else(|| self.topology.switches()[0].id.clone());
        self.inject_at(packet, switch)
    }

    /// Adds a packet arriving at `switch` at its ingress time.
    pub fn inject_at(&mut self, mut packet: Packet, switch: SwitchId) -> u64 {
        let idx = self.packets.len();
        packet.seq = idx as u64;
        let t = packet.ingress_time_us;
        self.packets.push(packet);
        self.push(t, Kind::PacketArrival, Payload::Arrival { pkt: idx, switch });
        idx as u64
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn packet(&self, seq: u64) -> Option<&Packet> {
        self.packets.get(seq as usize)
    }

    fn push(&mut self, time: u64, kind: Kind, payload: Payload) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Event { time, kind, seq, payload }));
    }

    fn log(&mut self, line: impl FnOnce() -> String) {
        if let Some(t) = &mut self.trace {
            t.push(line());
        }
    }

    /// Processes the next event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.queue.pop() else {
            return false;
        };
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        match ev.payload {
            Payload::Arrival { pkt, switch } => {
                let c = self.process_at_switch(pkt, &switch);
                self.log(|| format!("t={} ev=arrival pkt={pkt} sw={switch} {c}", ev.time));
            }
            Payload::Reply { pkt, switch, segment } => {
                let c = self.on_reply(pkt, &switch, segment);
                self.log(|| format!("t={} ev=remote_reply pkt={pkt} sw={switch} {c}", ev.time));
            }
            Payload::Control(i) => self.on_control(i),
            Payload::Tick => match ev.kind {
                Kind::EntryTimeout => self.on_timeout(),
                Kind::ReconfigDone => self.on_reconfig_done(),
                Kind::ControllerEpoch => self.on_epoch(),
                _ => unreachable!("tick payload on {:?}", ev.kind),
            },
        }
        true
    }

    pub fn run(self) -> SimReport {
        self.finish().report
    }

    /// Drains the event queue and returns the report with final state.
    pub fn finish(mut self) -> SimOutcome {
        while self.step() {}
        let records = self
            .packets
            .iter()
            .map(|p| {
                let completion = p.completion_time_us.expect("every packet completes");
                debug_assert_eq!(
                    completion - p.ingress_time_us,
                    p.stage_us + p.link_us + p.remote_us + p.queue_us,
                    "latency buckets of packet {}",
                    p.seq
                );
                PacketRecord {
                    seq: p.seq,
                    app: p.app.clone(),
                    flow: p.flow,
                    size_bytes: p.size_bytes,
                    ingress_us: p.ingress_time_us,
                    completion_us: completion,
                    deferred: p.deferred,
                    deferrals: p.deferrals,
                    encaps: p.encaps,
                    stage_us: p.stage_us,
                    link_us: p.link_us,
                    remote_us: p.remote_us,
                    queue_us: p.queue_us,
                    verdict: p.verdict.clone().expect("every packet has a verdict"),
                }
            })
            .collect();
        SimOutcome {
            report: SimReport::new(records, self.snapshots, self.actions, self.unresolved),
            deployment: self.deployment,
            topology: self.topology,
            trace: self.trace.unwrap_or_default(),
        }
    }

    fn drop_packet(&mut self, pkt: usize, switch: &SwitchId, reason: DropReason) -> Continuation {
        let p = &mut self.packets[pkt];
        p.completion_time_us = Some(self.now);
        p.verdict = Some(Verdict::Dropped(reason));
        p.tag = None;
        *self.counters.app_drops.entry((p.app.clone(), reason)).or_default() += 1;
        *self.counters.switch_drops.entry((switch.clone(), reason)).or_default() += 1;
        Continuation::Dropped(reason)
    }

    fn complete(&mut self, pkt: usize) -> Continuation {
        let now = self.now;
        let p = &mut self.packets[pkt];
        let ctx = &p.ctx;
        let verdict_kind = if ctx.denied {
            VerdictKind::Deny
        } else if let Some(b) = ctx.backend {
            VerdictKind::ForwardTo(b)
        } else if let Some(id) = ctx.flow_id {
            VerdictKind::NatMap(id)
        } else {
            VerdictKind::Accept
        };
        p.completion_time_us = Some(now);
        p.verdict = Some(Verdict::Delivered(DecisionRecord {
            app_name: p.app.clone(),
            verdict_kind,
            serviced_by: std::mem::take(&mut p.serviced_by),
        }));
        self.counters
            .latencies
            .entry(p.app.clone())
            .or_default()
            .push(now - p.ingress_time_us);
        Continuation::Finished
    }

    /// Sends `pkt` one overlay hop from `from` toward `target`.
    fn forward(&mut self, pkt: usize, from: &SwitchId, target: &SwitchId) -> Continuation {
        let Ok(port) = self.topology.overlay_next_hop(from, target) else {
            return self.drop_packet(pkt, from, DropReason::OverlayMisroute);
        };
        let (li, peer) = self.topology.port_peer(from, port).expect("overlay ports exist");
        let peer = peer.clone();
        let link = &self.topology.links()[li];
        let dir = *from == link.endpoint_a;
        let latency = link.latency_us;
        let p = &mut self.packets[pkt];
        let tx = link.transmit_us(p.size_bytes);
        let free_at = self.port_free_at.entry((li, dir)).or_insert(0);
        let start = (*free_at).max(self.now);
        *free_at = start + tx;
        let arrive = start + tx + latency;
        p.queue_us += start - self.now + tx;
        p.link_us += latency;
        *self.counters.link_bytes.entry(li).or_default() += p.size_bytes;
        self.push(arrive, Kind::PacketArrival, Payload::Arrival { pkt, switch: peer.clone() });
        Continuation::Forwarded { to: peer, arrive_at_us: arrive }
    }

    /// Handles a packet present at `switch`: transit forwarding, decap,
    /// routing to the next segment and stage execution.
    pub fn process_at_switch(&mut self, pkt: usize, switch: &SwitchId) -> Continuation {
        if let Some(tag) = self.packets[pkt].tag.clone() {
            if tag.target_switch_id != *switch {
                if !self.topology.contains(&tag.target_switch_id) {
                    return self.drop_packet(pkt, switch, DropReason::OverlayMisroute);
                }
                return self.forward(pkt, switch, &tag.target_switch_id);
            }
            self.packets[pkt].tag = None;
        }
        let p = &self.packets[pkt];
        let Some(n_stages) = self.deployment.apps.get(&p.app).map(|m| m.stages.len()) else {
            return self.drop_packet(pkt, switch, DropReason::NoRoute);
        };
        if p.next_stage >= n_stages {
            return self.complete(pkt);
        }
        let stage = p.next_stage;
        let Some(seg_id) = self.deployment.route(&p.app, stage, &p.flow) else {
            return self.drop_packet(pkt, switch, DropReason::NoRoute);
        };
        let seg = self.deployment.segment(seg_id).expect("routed segment exists");
        if seg.host != *switch {
            let target = seg.host.clone();
            let p = &mut self.packets[pkt];
            p.tag = Some(InfinityTag { target_switch_id: target.clone() });
            p.encaps += 1;
            return self.forward(pkt, switch, &target);
        }
        if seg.is_paused(self.now) {
            let buf = self.buffers.entry(seg_id).or_default();
            if buf.len() >= self.deployment.config.pause_buffer {
                return self.drop_packet(pkt, switch, DropReason::Migration);
            }
            buf.push_back(Parked { pkt, switch: switch.clone(), since_us: self.now });
            return Continuation::Buffered { segment: seg_id };
        }
        self.execute_stage(pkt, switch, seg_id, stage)
    }

    fn remote_rtt(&self, host: &SwitchId, ts: &TableState) -> u64 {
        let store = self.topology.store(ts.remote.as_ref().unwrap()).expect("bound store exists");
        let path = if store.attached_switch == *host {
            0
        } else {
            self.topology.overlay_cost(host, &store.attached_switch).unwrap_or(0)
        };
        store.rtt_us + 2 * path
    }

    fn execute_stage(&mut self, pkt: usize, switch: &SwitchId, seg_id: SegmentId, stage: usize) -> Continuation {
        let app = self.packets[pkt].app.clone();
        let action_kind = self.deployment.apps[&app].stages[stage].action_kind;
        let ordinal = self
            .deployment
            .groups(&app)
            .iter()
            .position(|g| g.stage_lo <= stage && stage < g.stage_hi)
            .unwrap_or(0);
        {
            let p = &mut self.packets[pkt];
            let hop = ServiceHop { switch: switch.clone(), segment: ordinal };
            if p.serviced_by.last() != Some(&hop) {
                p.serviced_by.push(hop);
            }
        }
        *self.counters.stage_runs.entry(seg_id).or_default() += 1;

        let flow = self.packets[pkt].flow;
        let ingress = self.packets[pkt].ingress_time_us;
        let seg = self.deployment.segment(seg_id).unwrap();
        if let Some(ts) = seg.tables.get(&stage) {
            if ts.incomplete_for(ingress) {
                return self.drop_packet(pkt, switch, DropReason::Capacity);
            }
            let bound = ts.remote.is_some();
            let remote_may_override = bound && ts.def.match_kind == MatchKind::Ternary && ts.remote_len() > 0;
            let rtt = if bound { self.remote_rtt(switch, ts) } else { 0 };
            let key = flow.key_bytes(ts.def.key_kind);
            let ts = self.deployment.segment_mut(seg_id).unwrap().tables.get_mut(&stage).unwrap();
            match ts.lookup(&key, ingress, ingress) {
                Lookup::Hit(a) if !remote_may_override => apply_action(&mut self.packets[pkt].ctx, &a, &flow),
                _ if bound => {
                    let reply_at = self.now + rtt;
                    let p = &mut self.packets[pkt];
                    p.deferred = true;
                    p.deferrals += 1;
                    p.remote_us += rtt;
                    self.push(reply_at, Kind::RemoteReply, Payload::Reply { pkt, switch: switch.clone(), segment: seg_id });
                    return Continuation::Deferred { segment: seg_id, reply_at_us: reply_at };
                }
                _ => {
                    if let Some(reason) = self.on_miss(pkt, seg_id, stage, key, action_kind) {
                        return self.drop_packet(pkt, switch, reason);
                    }
                }
            }
        }
        self.finish_stage(pkt, switch, seg_id, stage)
    }

    fn finish_stage(&mut self, pkt: usize, switch: &SwitchId, seg_id: SegmentId, stage: usize) -> Continuation {
        let p = &mut self.packets[pkt];
        p.next_stage = stage + 1;
        p.stage_us += self.cfg.stage_latency_us;
        let at = self.now + self.cfg.stage_latency_us;
        self.push(at, Kind::PacketArrival, Payload::Arrival { pkt, switch: switch.clone() });
        Continuation::Executed { segment: seg_id, stage }
    }

    /// Miss handling after local (and, if bound, remote) lookup failed.
    fn on_miss(
        &mut self,
        pkt: usize,
        seg_id: SegmentId,
        stage: usize,
        key: Vec<u8>,
        action_kind: ActionKind,
    ) -> Option<DropReason> {
        let flow = self.packets[pkt].flow;
        let ingress = self.packets[pkt].ingress_time_us;
        match action_kind {
            ActionKind::DropOrForward => {
                self.packets[pkt].ctx.denied = true;
                None
            }
            ActionKind::InsertState => {
                let ts = self.deployment.segment_mut(seg_id).unwrap().tables.get_mut(&stage).unwrap();
                let pin = flow_pin(&flow.canonical_bytes());
                let key = EntryKey::exact(key);
                if ts.used() < ts.capacity {
                    let id = ts.next_flow_id();
                    let action = Action::Flow { id, pin };
                    ts.insert(key, Entry::dynamic(action.clone(), ingress)).expect("room checked");
                    apply_action(&mut self.packets[pkt].ctx, &action, &flow);
                    return None;
                }
                let Some(store) = ts.remote.clone() else {
                    return Some(DropReason::Capacity);
                };
                if self.topology.reserve_store(&store, ts.def.entry_bytes).is_err() {
                    return Some(DropReason::RemoteCapacity);
                }
                let id = ts.next_flow_id();
                let action = Action::Flow { id, pin };
                ts.spill(key, Entry::dynamic(action.clone(), ingress));
                apply_action(&mut self.packets[pkt].ctx, &action, &flow);
                None
            }
            ActionKind::Forward | ActionKind::Rewrite => None,
        }
    }

    fn on_reply(&mut self, pkt: usize, switch: &SwitchId, seg_id: SegmentId) -> Continuation {
        let p = &self.packets[pkt];
        let stage = p.next_stage;
        let still_valid = self.deployment.segment(seg_id).is_ok_and(|s| {
            s.host == *switch && !s.is_paused(self.now) && s.tables.contains_key(&stage)
        }) && self.deployment.route(&p.app, stage, &p.flow) == Some(seg_id);
        if !still_valid {
            // The segment moved or paused while the lookup was in flight.
            return self.process_at_switch(pkt, switch);
        }
        let app = p.app.clone();
        let flow = p.flow;
        let ingress = p.ingress_time_us;
        let action_kind = self.deployment.apps[&app].stages[stage].action_kind;
        let ts = self.deployment.segment_mut(seg_id).unwrap().tables.get_mut(&stage).unwrap();
        if ts.incomplete_for(ingress) {
            return self.drop_packet(pkt, switch, DropReason::Capacity);
        }
        let key = flow.key_bytes(ts.def.key_kind);
        match ts.lookup_with_remote(&key, ingress, ingress) {
            Lookup::Hit(a) => apply_action(&mut self.packets[pkt].ctx, &a, &flow),
            Lookup::Miss => {
                if let Some(reason) = self.on_miss(pkt, seg_id, stage, key, action_kind) {
                    return self.drop_packet(pkt, switch, reason);
                }
            }
        }
        self.finish_stage(pkt, switch, seg_id, stage)
    }

    /// Tables that receive control-plane rules for `table` of `app`.
    fn control_targets(&self, app: &str, manifest: &AppManifest, table: &str, key: &EntryKey) -> Vec<(SegmentId, usize)> {
        let Some(stage) = manifest.table_stage(table) else {
            return Vec::new();
        };
        let partitioned = manifest.partition_key == manifest.table(table).map(|t| t.key_kind);
        let Some(g) = self.deployment.groups(app).iter().find(|g| g.stage_lo <= stage && stage < g.stage_hi) else {
            return Vec::new();
        };
        if partitioned && g.replicas.len() > 1 {
            vec![(*lb_select(&key.value, &g.replicas).unwrap(), stage)]
        } else {
            g.replicas.iter().map(|r| (*r, stage)).collect()
        }
    }

    fn install(&mut self, seg: SegmentId, stage: usize, pending: PendingInsert) {
        let now = self.now;
        let ts = self.deployment.segment_mut(seg).unwrap().tables.get_mut(&stage).unwrap();
        let entry = Entry::control(pending.action.clone(), pending.requested_at_us, now);
        if ts.insert(pending.key.clone(), entry.clone()).is_ok() {
            return;
        }
        if let Some(store) = ts.remote.clone() {
            if self.topology.reserve_store(&store, ts.def.entry_bytes).is_ok() {
                ts.spill(pending.key, entry);
                return;
            }
        }
        ts.push_pending(pending);
    }

    fn on_control(&mut self, i: usize) {
        let op = self.control[i].clone();
        let app = op.app.clone().unwrap_or_else(|| self.default_app.clone());
        let Some(m) = self.deployment.apps.get(&app) else {
            self.log(|| format!("t={} ev=control_insert op={i} skipped=unknown_app", op.at_us));
            return;
        };
        let key = match m.table(&op.table).ok_or("unknown table".to_string()).and_then(|d| op.rule.entry_key(d)) {
            Ok(k) => k,
            Err(e) => {
                self.log(|| format!("t={} ev=control_insert op={i} skipped={e:?}", op.at_us));
                return;
            }
        };
        let targets = self.control_targets(&app, m, &op.table, &key);
        let action = Action::from(&op.rule.action);
        for (seg, stage) in &targets {
            self.install(*seg, *stage, PendingInsert { key: key.clone(), action: action.clone(), requested_at_us: self.now });
        }
        self.log(|| format!("t={} ev=control_insert op={i} table={} targets={}", op.at_us, op.table, targets.len()));
    }

    fn retry_pending(&mut self) {
        let slots: Vec<(SegmentId, usize)> = self
            .deployment
            .segments()
            .flat_map(|s| s.tables.iter().filter(|(_, t)| !t.pending().is_empty()).map(move |(i, _)| (s.id, *i)))
            .collect();
        for (seg, stage) in slots {
            let ts = self.deployment.segment_mut(seg).unwrap().tables.get_mut(&stage).unwrap();
            for p in ts.take_pending() {
                self.install(seg, stage, p);
            }
        }
    }

    fn on_timeout(&mut self) {
        let now = self.now;
        let idle = self.cfg.idle_timeout_us;
        let ids: Vec<SegmentId> = self.deployment.segments().map(|s| s.id).collect();
        let mut expired = 0;
        for id in ids {
            let seg = self.deployment.segment_mut(id).unwrap();
            for ts in seg.tables.values_mut() {
                let (local, remote) = ts.expire_idle(now, idle);
                expired += local + remote;
                if remote > 0 {
                    let store = ts.remote.clone().unwrap();
                    self.topology
                        .release_store(&store, remote * ts.def.entry_bytes)
                        .expect("store held spilled entries");
                }
            }
        }
        self.retry_pending();
        self.log(|| format!("t={now} ev=entry_timeout expired={expired}"));
    }

    fn on_reconfig_done(&mut self) {
        let now = self.now;
        let ids: Vec<SegmentId> = self
            .deployment
            .segments()
            .filter(|s| s.paused_until_us.is_some_and(|t| t <= now))
            .map(|s| s.id)
            .collect();
        let mut released = 0;
        for id in &ids {
            self.deployment.segment_mut(*id).unwrap().paused_until_us = None;
            for parked in self.buffers.remove(id).unwrap_or_default() {
                self.packets[parked.pkt].queue_us += now - parked.since_us;
                self.push(now, Kind::PacketArrival, Payload::Arrival { pkt: parked.pkt, switch: parked.switch });
                released += 1;
            }
        }
        self.retry_pending();
        self.log(|| format!("t={now} ev=reconfig_done segments={} released={released}", ids.len()));
    }

    fn on_epoch(&mut self) {
        let now = self.now;
        let counters = std::mem::take(&mut self.counters);
        let snapshot = collect(now, self.cfg.epoch_us, &self.topology, &self.deployment, &counters);
        if let Some(c) = &mut self.controller {
            let out = c.on_epoch(&snapshot, &mut self.deployment, &mut self.topology, now);
            for a in &out.actions {
                self.push(a.done_at_us, Kind::ReconfigDone, Payload::Tick);
            }
            for a in &out.actions {
                self.log(|| format!("t={now} ev=controller_epoch action={} subject={} done_at={}", a.kind, a.subject, a.done_at_us));
            }
            for u in &out.unresolved {
                self.log(|| format!("t={now} ev=controller_epoch unresolved={} reason={:?}", u.subject, u.reason));
            }
            self.actions.extend(out.actions);
            self.unresolved.extend(out.unresolved);
        }
        let n = self.snapshots.len();
        self.log(|| format!("t={now} ev=controller_epoch snapshot={n}"));
        self.snapshots.push(snapshot);
    }
}

fn apply_action(ctx: &mut StageContext, action: &Action, flow: &FlowKey) {
    match action {
        Action::Permit => {}
        Action::Deny => ctx.denied = true,
        Action::Pool(pool) if !pool.is_empty() => {
            let pin = ctx.pin.unwrap_or_else(|| flow_pin(&flow.canonical_bytes()));
            ctx.backend = Some(pool[(pin % pool.len() as u64) as usize]);
        }
        Action::Pool(_) => {}
        Action::Backend(b) => ctx.backend = Some(*b),
        Action::Flow { id, pin } => {
            ctx.flow_id = Some(*id);
            ctx.pin = Some(*pin);
        }
    }
}

/// Simulates `workload` over `deployment` until every packet completes.
pub fn run(topology: Topology, deployment: Deployment, workload: &Workload, cfg: SimConfig) -> SimReport {
    Simulation::new(topology, deployment, workload, cfg).run()
}

/// Runs the whole pipeline of `manifest` on one unbounded switch without a
/// controller.
pub fn run_oracle(manifest: &AppManifest, workload: &Workload, cfg: SimConfig) -> SimReport {
    let cfg = SimConfig { policy: None, ..cfg };
    run(oracle_topology(), Deployment::oracle(manifest), workload, cfg)
}
