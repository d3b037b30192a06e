//! Telemetry collection, hot-spot detection and primitive selection.
//!
//! The controller is a deterministic state machine driven once per epoch by
//! the simulator. It reads a [`UtilizationSnapshot`] and changes the
//! deployment only through the operations in [`crate::primitives`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataplane::DropReason;
use crate::fabric::{ResourceVector, StoreId, SwitchId, Topology};
use crate::primitives::{best_fit, Applied, Deployment, PrimitiveError, ScalingAction, SegmentId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Horizontal,
    Sequential,
    Disaggregate,
    Migrate,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 4] = [
        PrimitiveKind::Horizontal,
        PrimitiveKind::Sequential,
        PrimitiveKind::Disaggregate,
        PrimitiveKind::Migrate,
    ];
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrimitiveKind::Horizontal => "horizontal",
            PrimitiveKind::Sequential => "sequential",
            PrimitiveKind::Disaggregate => "disaggregate",
            PrimitiveKind::Migrate => "migrate",
        })
    }
}

impl FromStr for PrimitiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown primitive `{s}` (expected horizontal, sequential, disaggregate or migrate)"))
    }
}

/// Per-app override of primitive choice.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppPolicy {
    pub primitive_preference: Option<Vec<PrimitiveKind>>,
    pub enabled_primitives: Option<BTreeSet<PrimitiveKind>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub occupancy_threshold: f64,
    pub link_threshold: f64,
    pub sustain_epochs: u32,
    pub cooldown_epochs: u32,
    pub primitive_preference: Vec<PrimitiveKind>,
    pub enabled_primitives: BTreeSet<PrimitiveKind>,
    pub epoch_us: u64,
    pub growth_factor: f64,
    /// Replicas added per horizontal action.
    pub replica_step: usize,
    pub per_app: BTreeMap<String, AppPolicy>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            occupancy_threshold: 0.85,
            link_threshold: 0.8,
            sustain_epochs: 3,
            cooldown_epochs: 10,
            primitive_preference: PrimitiveKind::ALL.to_vec(),
            enabled_primitives: PrimitiveKind::ALL.into_iter().collect(),
            epoch_us: 1000,
            growth_factor: crate::primitives::DEFAULT_GROWTH_FACTOR,
            replica_step: 1,
            per_app: BTreeMap::new(),
        }
    }
}

impl Policy {
    pub fn from_json(text: &str) -> Result<Policy, String> {
        let p: Policy = serde_json::from_str(text).map_err(|e| format!("policy: {e}"))?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("occupancy_threshold", self.occupancy_threshold), ("link_threshold", self.link_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("policy: {name} must be in (0, 1], got {v}"));
            }
        }
        if self.primitive_preference.is_empty() {
            return Err("policy: primitive_preference is empty".into());
        }
        if self.sustain_epochs == 0 {
            return Err("policy: sustain_epochs must be at least 1".into());
        }
        if self.epoch_us == 0 {
            return Err("policy: epoch_us must be positive".into());
        }
        if !(self.growth_factor > 1.0) {
            return Err(format!("policy: growth_factor must exceed 1, got {}", self.growth_factor));
        }
        if self.replica_step == 0 {
            return Err("policy: replica_step must be at least 1".into());
        }
        Ok(())
    }

    /// Enabled primitives for `app` in preference order.
    pub fn preference_for(&self, app: &str) -> Vec<PrimitiveKind> {
        let over = self.per_app.get(app);
        let order = over
            .and_then(|o| o.primitive_preference.as_ref())
            .unwrap_or(&self.primitive_preference);
        let enabled = over
            .and_then(|o| o.enabled_primitives.as_ref())
            .unwrap_or(&self.enabled_primitives);
        let mut seen = BTreeSet::new();
        order
            .iter()
            .filter(|k| enabled.contains(k) && self.enabled_primitives.contains(k) && seen.insert(**k))
            .copied()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableUsage {
    pub app: String,
    pub table: String,
    pub segment: SegmentId,
    pub switch: SwitchId,
    pub used: u64,
    pub capacity: u64,
    pub remote_entries: u64,
    pub occupancy: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchUsage {
    pub switch: SwitchId,
    pub usage: ResourceVector,
    pub capacity: ResourceVector,
    pub drops_capacity: u64,
    pub drops_other: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkLoad {
    pub a: SwitchId,
    pub b: SwitchId,
    pub bytes: u64,
    /// Offered load over bandwidth for the epoch.
    pub load: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppLatency {
    pub app: String,
    pub packets: u64,
    pub p50_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub drops_capacity: u64,
    pub drops_other: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLoad {
    pub segment: SegmentId,
    pub app: String,
    pub switch: SwitchId,
    pub stage_runs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSnapshot {
    pub time_us: u64,
    pub tables: Vec<TableUsage>,
    pub switches: Vec<SwitchUsage>,
    pub links: Vec<LinkLoad>,
    pub apps: Vec<AppLatency>,
    pub segments: Vec<SegmentLoad>,
    pub drops_by_reason: BTreeMap<DropReason, u64>,
}

/// Data-plane counters accumulated over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpochCounters {
    pub link_bytes: BTreeMap<usize, u64>,
    pub latencies: BTreeMap<String, Vec<u64>>,
    pub app_drops: BTreeMap<(String, DropReason), u64>,
    pub switch_drops: BTreeMap<(SwitchId, DropReason), u64>,
    pub stage_runs: BTreeMap<SegmentId, u64>,
}

fn split_drops<'a, K: 'a + PartialEq>(
    it: impl Iterator<Item = (&'a (K, DropReason), &'a u64)>,
    key: &K,
) -> (u64, u64) {
    let (mut cap, mut other) = (0, 0);
    for ((k, r), n) in it {
        if k == key {
            if *r == DropReason::Capacity {
                cap += n;
            } else {
                other += n;
            }
        }
    }
    (cap, other)
}

/// Snapshot of the fabric at an epoch boundary.
pub fn collect(
    time_us: u64,
    epoch_us: u64,
    topology: &Topology,
    deployment: &Deployment,
    counters: &EpochCounters,
) -> UtilizationSnapshot {
    let mut tables = Vec::new();
    let mut segments = Vec::new();
    for s in deployment.segments() {
        for t in s.tables.values() {
            tables.push(TableUsage {
                app: s.app.clone(),
                table: t.name().to_string(),
                segment: s.id,
                switch: s.host.clone(),
                used: t.used(),
                capacity: t.capacity,
                remote_entries: t.remote_len(),
                occupancy: t.occupancy(),
            });
        }
        segments.push(SegmentLoad {
            segment: s.id,
            app: s.app.clone(),
            switch: s.host.clone(),
            stage_runs: counters.stage_runs.get(&s.id).copied().unwrap_or(0),
        });
    }
    let mut switches: Vec<SwitchUsage> = topology
        .switches()
        .iter()
        .map(|n| {
            let (drops_capacity, drops_other) = split_drops(counters.switch_drops.iter(), &n.id);
            SwitchUsage {
                switch: n.id.clone(),
                usage: n.usage,
                capacity: n.capacity,
                drops_capacity,
                drops_other,
            }
        })
        .collect();
    switches.sort_by(|a, b| a.switch.cmp(&b.switch));
    let links = topology
        .links()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let bytes = counters.link_bytes.get(&i).copied().unwrap_or(0);
            let capacity_bits = l.bandwidth_bps as f64 * epoch_us as f64 / 1e6;
            LinkLoad {
                a: l.endpoint_a.clone(),
                b: l.endpoint_b.clone(),
                bytes,
                load: bytes as f64 * 8.0 / capacity_bits,
            }
        })
        .collect();
    let apps = deployment
        .apps
        .keys()
        .map(|app| {
            let mut l = counters.latencies.get(app).cloned().unwrap_or_default();
            l.sort_unstable();
            let (drops_capacity, drops_other) = split_drops(counters.app_drops.iter(), app);
            AppLatency {
                app: app.clone(),
                packets: l.len() as u64,
                p50_us: crate::dataplane::percentile(&l, 50.0),
                p99_us: crate::dataplane::percentile(&l, 99.0),
                drops_capacity,
                drops_other,
            }
        })
        .collect();
    let mut drops_by_reason = BTreeMap::new();
    for ((_, r), n) in &counters.app_drops {
        *drops_by_reason.entry(*r).or_default() += n;
    }
    UtilizationSnapshot {
        time_us,
        tables,
        switches,
        links,
        apps,
        segments,
        drops_by_reason,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HotSpotKind {
    TableOccupancy,
    LinkLoad,
    SloViolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotSpot {
    pub kind: HotSpotKind,
    pub subject: String,
    pub observed: f64,
    pub threshold: f64,
    /// Segment the controller acts on, when one can be attributed.
    pub segment: Option<SegmentId>,
    pub table: Option<String>,
}

/// Sustain and cooldown bookkeeping across epochs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DetectorState {
    pub epoch: u64,
    pub streaks: BTreeMap<String, u32>,
    /// First epoch at which a subject may fire again.
    pub cooldown_until: BTreeMap<String, u64>,
}

impl DetectorState {
    pub fn start_cooldown(&mut self, subject: &str, policy: &Policy) {
        self.cooldown_until
            .insert(subject.to_string(), self.epoch + policy.cooldown_epochs as u64 + 1);
        self.streaks.remove(subject);
    }

    pub fn in_cooldown(&self, subject: &str) -> bool {
        self.cooldown_until.get(subject).is_some_and(|e| self.epoch < *e)
    }
}

fn busiest_segment<'a>(loads: impl Iterator<Item = &'a SegmentLoad>) -> Option<SegmentId> {
    loads
        .filter(|s| s.stage_runs > 0)
        .max_by(|a, b| a.stage_runs.cmp(&b.stage_runs).then(b.segment.cmp(&a.segment)))
        .map(|s| s.segment)
}

/// Threshold crossings in `snapshot`, before the sustain rule.
pub fn candidates(snapshot: &UtilizationSnapshot, policy: &Policy, deployment: &Deployment) -> Vec<HotSpot> {
    let mut out = Vec::new();
    let mut by_table: BTreeMap<(String, String), &TableUsage> = BTreeMap::new();
    for t in &snapshot.tables {
        let e = by_table.entry((t.app.clone(), t.table.clone())).or_insert(t);
        if t.occupancy > e.occupancy || (t.occupancy == e.occupancy && t.segment < e.segment) {
            *e = t;
        }
    }
    for ((app, table), t) in by_table {
        if t.occupancy >= policy.occupancy_threshold {
            out.push(HotSpot {
                kind: HotSpotKind::TableOccupancy,
                subject: format!("table:{app}/{table}"),
                observed: t.occupancy,
                threshold: policy.occupancy_threshold,
                segment: Some(t.segment),
                table: Some(table),
            });
        }
    }
    for l in &snapshot.links {
        if l.load >= policy.link_threshold {
            out.push(HotSpot {
                kind: HotSpotKind::LinkLoad,
                subject: format!("link:{}-{}", l.a, l.b),
                observed: l.load,
                threshold: policy.link_threshold,
                segment: busiest_segment(snapshot.segments.iter().filter(|s| s.switch == l.a || s.switch == l.b)),
                table: None,
            });
        }
    }
    for a in &snapshot.apps {
        let Some(slo) = deployment.apps.get(&a.app).and_then(|m| m.slo_max_latency_us) else {
            continue;
        };
        if let Some(p99) = a.p99_us.filter(|p| *p > slo) {
            out.push(HotSpot {
                kind: HotSpotKind::SloViolation,
                subject: format!("slo:{}", a.app),
                observed: p99 as f64,
                threshold: slo as f64,
                segment: busiest_segment(snapshot.segments.iter().filter(|s| s.app == a.app)),
                table: None,
            });
        }
    }
    out.sort_by(|a, b| a.subject.cmp(&b.subject));
    out
}

/// Advances the detector one epoch and returns the hot spots that have been
/// above threshold for `sustain_epochs` epochs and are not cooling down.
pub fn detect(
    snapshot: &UtilizationSnapshot,
    state: &mut DetectorState,
    policy: &Policy,
    deployment: &Deployment,
) -> Vec<HotSpot> {
    state.epoch += 1;
    let hot = candidates(snapshot, policy, deployment);
    let subjects: BTreeSet<&str> = hot.iter().map(|h| h.subject.as_str()).collect();
    state.streaks.retain(|s, _| subjects.contains(s.as_str()));
    for s in &subjects {
        *state.streaks.entry(s.to_string()).or_default() += 1;
    }
    hot.into_iter()
        .filter(|h| state.streaks[&h.subject] >= policy.sustain_epochs && !state.in_cooldown(&h.subject))
        .collect()
}

/// Best-fit switch for `footprint` outside `exclude`.
pub fn placement_search(
    footprint: &ResourceVector,
    topology: &Topology,
    exclude: &BTreeSet<SwitchId>,
) -> Option<SwitchId> {
    best_fit(topology, footprint, exclude)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannedOp {
    Horizontal { segment: SegmentId, replicas: Vec<SwitchId> },
    Sequential { segment: SegmentId, cut: usize, target: SwitchId },
    Disaggregate { segment: SegmentId, table: String, store: StoreId },
    Migrate { segment: SegmentId, target: SwitchId, growth_factor: f64 },
}

impl PlannedOp {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            PlannedOp::Horizontal { .. } => PrimitiveKind::Horizontal,
            PlannedOp::Sequential { .. } => PrimitiveKind::Sequential,
            PlannedOp::Disaggregate { .. } => PrimitiveKind::Disaggregate,
            PlannedOp::Migrate { .. } => PrimitiveKind::Migrate,
        }
    }

    fn execute(&self, d: &mut Deployment, t: &mut Topology, now_us: u64) -> Result<Applied, PrimitiveError> {
        match self {
            PlannedOp::Horizontal { segment, replicas } => d.horizontal_scale(t, *segment, replicas, now_us),
            PlannedOp::Sequential { segment, cut, target } => d.sequential_decompose(t, *segment, *cut, target, now_us),
            PlannedOp::Disaggregate { segment, table, store } => {
                d.vertical_scale_disaggregate(t, *segment, table, store, now_us)
            }
            PlannedOp::Migrate { segment, target, growth_factor } => {
                d.vertical_scale_migrate(t, *segment, target, *growth_factor, now_us)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub hotspot: HotSpot,
    pub op: PlannedOp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Planned(Plan),
    /// The target segment is mid-reconfiguration; try again next epoch.
    Busy,
    Unresolvable(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unresolved {
    pub time_us: u64,
    pub subject: String,
    pub reason: String,
}

fn plan_for(
    kind: PrimitiveKind,
    hs: &HotSpot,
    segment: SegmentId,
    d: &Deployment,
    t: &Topology,
    policy: &Policy,
) -> Result<PlannedOp, String> {
    let seg = d.segment(segment).map_err(|e| e.to_string())?;
    let m = d.manifest(&seg.app).map_err(|e| e.to_string())?;
    let group = d.group_of(segment).map_err(|e| e.to_string())?;
    let hosts: BTreeSet<SwitchId> = group.replicas.iter().map(|r| d.segment(*r).unwrap().host.clone()).collect();
    match kind {
        PrimitiveKind::Horizontal => {
            m.horizontal_eligibility(seg.stage_range())?;
            let fp = seg.footprint(m);
            let mut exclude = hosts;
            let mut replicas = Vec::new();
            while replicas.len() < policy.replica_step {
                let Some(sw) = placement_search(&fp, t, &exclude) else { break };
                exclude.insert(sw.clone());
                replicas.push(sw);
            }
            if replicas.is_empty() {
                return Err("no switch fits another replica".into());
            }
            Ok(PlannedOp::Horizontal { segment, replicas })
        }
        PrimitiveKind::Sequential => {
            if group.replicas.len() > 1 {
                return Err("segment is replicated".into());
            }
            for cut in (seg.stage_lo + 1..seg.stage_hi).rev() {
                let suffix: ResourceVector = (cut..seg.stage_hi)
                    .map(|i| {
                        crate::appir::footprint_with_capacity(&m.stages[i], |_| {
                            seg.tables.get(&i).map_or(0, |ts| ts.capacity)
                        })
                    })
                    .sum();
                if hs.kind == HotSpotKind::TableOccupancy && suffix.sram_bytes == 0 {
                    continue;
                }
                let exclude = BTreeSet::from([seg.host.clone()]);
                if let Some(target) = placement_search(&suffix, t, &exclude) {
                    return Ok(PlannedOp::Sequential { segment, cut, target });
                }
            }
            Err("no cut whose suffix fits another switch".into())
        }
        PrimitiveKind::Disaggregate => {
            let table = match (&hs.kind, &hs.table) {
                (HotSpotKind::TableOccupancy, Some(tb)) => tb,
                _ => return Err("only table hot spots can be disaggregated".into()),
            };
            let (_, ts) = seg.table_named(table).ok_or("table not in segment")?;
            if ts.remote.is_some() {
                return Err("table already uses remote memory".into());
            }
            let mut stores: Vec<(u64, &StoreId)> = t
                .remote_stores()
                .iter()
                .filter(|s| s.free_bytes() >= ts.def.entry_bytes)
                .filter_map(|s| {
                    let path = if s.attached_switch == seg.host {
                        0
                    } else {
                        t.overlay_cost(&seg.host, &s.attached_switch).ok()?
                    };
                    Some((s.rtt_us + 2 * path, &s.id))
                })
                .collect();
            stores.sort();
            let (_, store) = stores.first().ok_or("no remote store has room")?;
            Ok(PlannedOp::Disaggregate { segment, table: table.clone(), store: (*store).clone() })
        }
        PrimitiveKind::Migrate => {
            if !seg.tables.values().any(|ts| ts.def.expandable) {
                return Err("segment has no expandable table".into());
            }
            let grown = d.grown_footprint(segment, policy.growth_factor).map_err(|e| e.to_string())?;
            let held = seg.receipt.as_ref().map_or(ResourceVector::ZERO, |r| r.demand);
            let host_free = t.headroom(&seg.host).map_err(|e| e.to_string())? + held;
            let target = if grown.fits_within(&host_free) {
                seg.host.clone()
            } else {
                placement_search(&grown, t, &hosts).ok_or("no switch fits the grown footprint")?
            };
            Ok(PlannedOp::Migrate { segment, target, growth_factor: policy.growth_factor })
        }
    }
}

/// First feasible primitive for `hotspot` in the policy's preference order.
pub fn select_primitive(
    hotspot: &HotSpot,
    deployment: &Deployment,
    topology: &Topology,
    policy: &Policy,
    now_us: u64,
) -> Selection {
    let Some(segment) = hotspot.segment else {
        return Selection::Unresolvable("no segment to relieve".into());
    };
    let Ok(seg) = deployment.segment(segment) else {
        return Selection::Unresolvable(format!("segment {segment} no longer exists"));
    };
    let busy = deployment
        .group_of(segment)
        .map(|g| g.replicas.iter().any(|r| deployment.segment(*r).is_ok_and(|s| s.is_paused(now_us))))
        .unwrap_or(false);
    if busy {
        return Selection::Busy;
    }
    let mut reasons = Vec::new();
    for kind in policy.preference_for(&seg.app) {
        match plan_for(kind, hotspot, segment, deployment, topology, policy) {
            Ok(op) => {
                // Dry run so infeasible plans fall through to the next primitive.
                let mut d = deployment.clone();
                let mut t = topology.clone();
                match op.execute(&mut d, &mut t, now_us) {
                    Ok(_) => {
                        return Selection::Planned(Plan {
                            hotspot: hotspot.clone(),
                            op,
                        })
                    }
                    Err(e) => reasons.push(format!("{kind}: {e}")),
                }
            }
            Err(e) => reasons.push(format!("{kind}: {e}")),
        }
    }
    if reasons.is_empty() {
        reasons.push("no primitive enabled".into());
    }
    Selection::Unresolvable(reasons.join("; "))
}

/// Executes `plan`, re-validating it against the current state.
pub fn apply(
    plan: &Plan,
    deployment: &mut Deployment,
    topology: &mut Topology,
    now_us: u64,
) -> Result<ScalingAction, PrimitiveError> {
    let applied = plan.op.execute(deployment, topology, now_us)?;
    Ok(ScalingAction {
        time_us: now_us,
        kind: applied.details.kind(),
        subject: plan.hotspot.subject.clone(),
        details: applied.details,
        trigger: Some(plan.hotspot.clone()),
        done_at_us: applied.done_at_us,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochOutcome {
    pub actions: Vec<ScalingAction>,
    pub unresolved: Vec<Unresolved>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub policy: Policy,
    pub state: DetectorState,
}

impl Controller {
    pub fn new(policy: Policy) -> Self {
        Controller {
            policy,
            state: DetectorState::default(),
        }
    }

    /// One feedback-loop iteration: detect, then plan and apply per hot spot
    /// in subject order.
    pub fn on_epoch(
        &mut self,
        snapshot: &UtilizationSnapshot,
        deployment: &mut Deployment,
        topology: &mut Topology,
        now_us: u64,
    ) -> EpochOutcome {
        let mut out = EpochOutcome::default();
        for hs in detect(snapshot, &mut self.state, &self.policy, deployment) {
            match select_primitive(&hs, deployment, topology, &self.policy, now_us) {
                Selection::Planned(plan) => {
                    // A failed apply is discarded; the hot spot is re-detected.
                    if let Ok(action) = apply(&plan, deployment, topology, now_us) {
                        self.state.start_cooldown(&hs.subject, &self.policy);
                        out.actions.push(action);
                    }
                }
                Selection::Busy => {}
                Selection::Unresolvable(reason) => {
                    self.state.start_cooldown(&hs.subject, &self.policy);
                    out.unresolved.push(Unresolved {
                        time_us: now_us,
                        subject: hs.subject.clone(),
                        reason,
                    });
                }
            }
        }
        out
    }
}
