//! Scaling primitives as transformations of a [`Deployment`].
//!
//! Every operation is transactional: on error neither the deployment nor the
//! topology ledger changes. Successful operations pause the segments they
//! touch until a returned `done_at_us`, which the simulator turns into a
//! `reconfig_done` event.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appir::{footprint_with_capacity, AppManifest, KeyKind, MinimalDesign};
use crate::controller::HotSpot;
use crate::dataplane::{lb_select, FlowKey, TableState};
use crate::fabric::{FabricError, Receipt, ResourceVector, StoreId, SwitchId, Topology, TopologySpec, SwitchSpec};

pub const DEFAULT_GROWTH_FACTOR: f64 = 1.25;
pub const ORACLE_SWITCH: &str = "oracle";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub u32);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl SegmentId {
    /// First flow id handed out by tables of this segment.
    pub fn id_base(self) -> u64 {
        (self.0 as u64) << 32
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub id: SegmentId,
    pub app: String,
    pub stage_lo: usize,
    pub stage_hi: usize,
    pub host: SwitchId,
    /// Table state keyed by the stage index that owns it.
    pub tables: BTreeMap<usize, TableState>,
    /// `None` only for the unmetered oracle segment.
    pub receipt: Option<Receipt>,
    pub paused_until_us: Option<u64>,
}

impl Segment {
    pub fn stage_range(&self) -> std::ops::Range<usize> {
        self.stage_lo..self.stage_hi
    }

    /// Resources needed at the tables' current capacities.
    pub fn footprint(&self, manifest: &AppManifest) -> ResourceVector {
        self.range_footprint(manifest, self.stage_range())
    }

    fn range_footprint(&self, manifest: &AppManifest, range: std::ops::Range<usize>) -> ResourceVector {
        range
            .map(|i| {
                footprint_with_capacity(&manifest.stages[i], |_| {
                    self.tables.get(&i).map_or(0, |t| t.capacity)
                })
            })
            .sum()
    }

    pub fn is_paused(&self, now_us: u64) -> bool {
        self.paused_until_us.is_some_and(|t| t > now_us)
    }

    pub fn table_named(&self, name: &str) -> Option<(usize, &TableState)> {
        self.tables.iter().find(|(_, t)| t.name() == name).map(|(i, t)| (*i, t))
    }

    fn used_entries(&self) -> u64 {
        self.tables.values().map(|t| t.used() + t.remote_len()).sum()
    }
}

/// Segments of one app covering the same stage range; more than one member
/// means the range is horizontally scaled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub stage_lo: usize,
    pub stage_hi: usize,
    /// Ordered by host switch id.
    pub replicas: Vec<SegmentId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LbAttachment {
    Ingress,
    /// Replicas of the preceding group.
    Segments(Vec<SegmentId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LbRule {
    pub app: String,
    pub stage_lo: usize,
    pub attached: LbAttachment,
    pub partition_key: KeyKind,
    pub replicas: Vec<(SwitchId, SegmentId)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteBinding {
    pub segment: SegmentId,
    pub table: String,
    pub store: StoreId,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimitiveConfig {
    pub per_entry_copy_us: f64,
    pub pause_buffer: usize,
}

impl Default for PrimitiveConfig {
    fn default() -> Self {
        PrimitiveConfig {
            per_entry_copy_us: 0.1,
            pause_buffer: 1024,
        }
    }
}

impl PrimitiveConfig {
    pub fn copy_us(&self, entries: u64) -> u64 {
        (entries as f64 * self.per_entry_copy_us).ceil() as u64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimitiveError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("ineligible for horizontal scaling: {0}")]
    IneligibleForHorizontalScaling(String),
    #[error("cut {cut} is not strictly inside segment {segment} [{lo}, {hi})")]
    InvalidCut {
        segment: SegmentId,
        cut: usize,
        lo: usize,
        hi: usize,
    },
    #[error("unknown segment {0}")]
    UnknownSegment(SegmentId),
    #[error("unknown app {0}")]
    UnknownApp(String),
    #[error("segment {segment} has no table {table}")]
    UnknownTable { segment: SegmentId, table: String },
    #[error("table {table} in segment {segment} is already bound to remote memory")]
    AlreadyBound { segment: SegmentId, table: String },
    #[error("growth factor {0} must be greater than 1")]
    GrowthFactor(f64),
    #[error("segment {0} is still reconfiguring")]
    Busy(SegmentId),
    #[error("deployment failed: {0}")]
    DeploymentFailed(String),
    #[error("re-partitioned entries do not fit replica {0}")]
    RepartitionOverflow(SegmentId),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    SeqDecompose,
    HorizScale,
    VertDisaggregate,
    VertMigrate,
}

impl fmt::Display for ScalingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingKind::SeqDecompose => "seq_decompose",
            ScalingKind::HorizScale => "horiz_scale",
            ScalingKind::VertDisaggregate => "vert_disaggregate",
            ScalingKind::VertMigrate => "vert_migrate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityChange {
    pub table: String,
    pub before: u64,
    pub after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDetails {
    SeqDecompose {
        segment: SegmentId,
        cut: usize,
        host: SwitchId,
        target: SwitchId,
        new_segment: SegmentId,
        moved_entries: u64,
    },
    HorizScale {
        segment: SegmentId,
        added: Vec<(SwitchId, SegmentId)>,
        replicas: Vec<(SwitchId, SegmentId)>,
        moved_entries: u64,
    },
    VertDisaggregate {
        segment: SegmentId,
        table: String,
        store: StoreId,
    },
    VertMigrate {
        segment: SegmentId,
        from: SwitchId,
        to: SwitchId,
        growth_factor: f64,
        capacities: Vec<CapacityChange>,
        copied_entries: u64,
    },
}

impl ActionDetails {
    pub fn kind(&self) -> ScalingKind {
        match self {
            ActionDetails::SeqDecompose { .. } => ScalingKind::SeqDecompose,
            ActionDetails::HorizScale { .. } => ScalingKind::HorizScale,
            ActionDetails::VertDisaggregate { .. } => ScalingKind::VertDisaggregate,
            ActionDetails::VertMigrate { .. } => ScalingKind::VertMigrate,
        }
    }
}

/// Result of a successful primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Applied {
    pub details: ActionDetails,
    /// Segments paused until `done_at_us`.
    pub paused: Vec<SegmentId>,
    pub done_at_us: u64,
}

/// Audit record of an applied primitive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingAction {
    pub time_us: u64,
    pub kind: ScalingKind,
    pub subject: String,
    pub details: ActionDetails,
    pub trigger: Option<HotSpot>,
    pub done_at_us: u64,
}

/// One JSON object per line.
pub fn write_audit_jsonl<W: Write>(actions: &[ScalingAction], mut out: W) -> io::Result<()> {
    for a in actions {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Best-fit placement: the switch left with the least free SRAM after
/// taking `footprint`, lowest id on ties.
pub fn best_fit(topology: &Topology, footprint: &ResourceVector, exclude: &BTreeSet<SwitchId>) -> Option<SwitchId> {
    topology
        .switches()
        .iter()
        .filter(|s| !exclude.contains(&s.id))
        .filter(|s| footprint.fits_within(&s.free()))
        .min_by(|a, b| {
            let ra = a.free().sram_bytes - footprint.sram_bytes;
            let rb = b.free().sram_bytes - footprint.sram_bytes;
            ra.cmp(&rb).then_with(|| a.id.cmp(&b.id))
        })
        .map(|s| s.id.clone())
}

/// The single unbounded switch the oracle runs on.
pub fn oracle_topology() -> Topology {
    Topology::build(&TopologySpec {
        switches: vec![SwitchSpec {
            id: ORACLE_SWITCH.into(),
            sram_bytes: u64::MAX,
            stages: u64::MAX,
            alus_per_stage: u64::MAX,
            reconfig_latency_us: 0,
        }],
        links: vec![],
        remote_stores: vec![],
    })
    .expect("oracle topology is valid")
}

/// Live mapping of app pipelines onto switches.
#[derive(Clone, Debug, PartialEq)]
pub struct Deployment {
    pub apps: BTreeMap<String, AppManifest>,
    pub config: PrimitiveConfig,
    segments: BTreeMap<SegmentId, Segment>,
    ingress_map: BTreeMap<String, SwitchId>,
    groups: BTreeMap<String, Vec<Group>>,
    lb_rules: Vec<LbRule>,
    next_segment: u32,
}

impl Default for Deployment {
    fn default() -> Self {
        Deployment::new(PrimitiveConfig::default())
    }
}

impl Deployment {
    pub fn new(config: PrimitiveConfig) -> Self {
        Deployment {
            apps: BTreeMap::new(),
            config,
            segments: BTreeMap::new(),
            ingress_map: BTreeMap::new(),
            groups: BTreeMap::new(),
            lb_rules: Vec::new(),
            next_segment: 0,
        }
    }

    /// Whole pipeline on the unbounded oracle switch.
    pub fn oracle(manifest: &AppManifest) -> Self {
        let mut d = Deployment::default();
        let id = d.alloc_id();
        let tables = manifest
            .stages
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.table().map(|t| (i, TableState::new(t.clone(), u64::MAX, id.id_base()))))
            .collect();
        d.segments.insert(
            id,
            Segment {
                id,
                app: manifest.app_name.clone(),
                stage_lo: 0,
                stage_hi: manifest.stages.len(),
                host: ORACLE_SWITCH.into(),
                tables,
                receipt: None,
                paused_until_us: None,
            },
        );
        d.apps.insert(manifest.app_name.clone(), manifest.clone());
        d.ingress_map.insert(manifest.app_name.clone(), ORACLE_SWITCH.into());
        d.refresh();
        d
    }

    fn alloc_id(&mut self) -> SegmentId {
        let id = SegmentId(self.next_segment);
        self.next_segment += 1;
        id
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    pub fn segment(&self, id: SegmentId) -> Result<&Segment, PrimitiveError> {
        self.segments.get(&id).ok_or(PrimitiveError::UnknownSegment(id))
    }

    /// Direct access to a segment. Table contents may be changed freely;
    /// placement fields must stay consistent with the topology ledger.
    pub fn segment_mut(&mut self, id: SegmentId) -> Result<&mut Segment, PrimitiveError> {
        self.segments.get_mut(&id).ok_or(PrimitiveError::UnknownSegment(id))
    }

    pub fn manifest(&self, app: &str) -> Result<&AppManifest, PrimitiveError> {
        self.apps.get(app).ok_or_else(|| PrimitiveError::UnknownApp(app.to_string()))
    }

    pub fn ingress(&self, app: &str) -> Option<&SwitchId> {
        self.ingress_map.get(app)
    }

    pub fn groups(&self, app: &str) -> &[Group] {
        self.groups.get(app).map_or(&[], |g| g.as_slice())
    }

    pub fn lb_rules(&self) -> &[LbRule] {
        &self.lb_rules
    }

    pub fn remote_bindings(&self) -> Vec<RemoteBinding> {
        self.segments
            .values()
            .flat_map(|s| {
                s.tables.values().filter_map(move |t| {
                    t.remote.as_ref().map(|store| RemoteBinding {
                        segment: s.id,
                        table: t.name().to_string(),
                        store: store.clone(),
                    })
                })
            })
            .collect()
    }

    /// Replicas sharing `id`'s stage range, ordered by host.
    pub fn group_of(&self, id: SegmentId) -> Result<&Group, PrimitiveError> {
        let seg = self.segment(id)?;
        self.groups(&seg.app)
            .iter()
            .find(|g| g.replicas.contains(&id))
            .ok_or(PrimitiveError::UnknownSegment(id))
    }

    /// Segments holding an instance of `table`, with the owning stage.
    pub fn table_instances(&self, app: &str, table: &str) -> Vec<(SegmentId, usize)> {
        self.segments
            .values()
            .filter(|s| s.app == app)
            .filter_map(|s| s.table_named(table).map(|(i, _)| (s.id, i)))
            .collect()
    }

    /// Segment that executes `stage` of `app` for `flow`.
    pub fn route(&self, app: &str, stage: usize, flow: &FlowKey) -> Option<SegmentId> {
        let g = self
            .groups
            .get(app)?
            .iter()
            .find(|g| g.stage_lo <= stage && stage < g.stage_hi)?;
        if g.replicas.len() == 1 {
            return Some(g.replicas[0]);
        }
        let key = self.apps.get(app)?.partition_key?;
        lb_select(&flow.key_bytes(key), &g.replicas).ok().copied()
    }

    fn compute_groups(&self) -> BTreeMap<String, Vec<Group>> {
        let mut by_range: BTreeMap<(&str, usize, usize), Vec<&Segment>> = BTreeMap::new();
        for s in self.segments.values() {
            by_range.entry((&s.app, s.stage_lo, s.stage_hi)).or_default().push(s);
        }
        let mut out: BTreeMap<String, Vec<Group>> = BTreeMap::new();
        for ((app, lo, hi), mut segs) in by_range {
            segs.sort_by(|a, b| a.host.cmp(&b.host).then(a.id.cmp(&b.id)));
            out.entry(app.to_string()).or_default().push(Group {
                stage_lo: lo,
                stage_hi: hi,
                replicas: segs.iter().map(|s| s.id).collect(),
            });
        }
        out
    }

    fn compute_lb_rules(&self, groups: &BTreeMap<String, Vec<Group>>) -> Vec<LbRule> {
        let mut rules = Vec::new();
        for (app, gs) in groups {
            for (i, g) in gs.iter().enumerate() {
                if g.replicas.len() < 2 {
                    continue;
                }
                let Some(key) = self.apps.get(app).and_then(|m| m.partition_key) else {
                    continue;
                };
                rules.push(LbRule {
                    app: app.clone(),
                    stage_lo: g.stage_lo,
                    attached: if i == 0 {
                        LbAttachment::Ingress
                    } else {
                        LbAttachment::Segments(gs[i - 1].replicas.clone())
                    },
                    partition_key: key,
                    replicas: g
                        .replicas
                        .iter()
                        .map(|r| (self.segments[r].host.clone(), *r))
                        .collect(),
                });
            }
        }
        rules
    }

    /// Rebuilds routing groups and load-balancer rules from the segments.
    fn refresh(&mut self) {
        self.groups = self.compute_groups();
        self.lb_rules = self.compute_lb_rules(&self.groups);
    }

    /// Checks every deployment invariant against `topology`.
    pub fn validate(&self, topology: &Topology) -> Result<(), PrimitiveError> {
        let bad = |m: String| Err(PrimitiveError::Invalid(m));
        let groups = self.compute_groups();
        if groups != self.groups {
            return bad("routing groups are stale".into());
        }
        if self.compute_lb_rules(&groups) != self.lb_rules {
            return bad("load-balancer rules are stale".into());
        }
        for (app, m) in &self.apps {
            let Some(ingress) = self.ingress_map.get(app) else {
                return bad(format!("app {app} has no ingress"));
            };
            if !topology.contains(ingress) {
                return bad(format!("ingress {ingress} of {app} is not in the topology"));
            }
            let mut next = 0;
            for g in groups.get(app).map_or(&[][..], |g| g.as_slice()) {
                if g.stage_lo != next {
                    return bad(format!("{app}: stages [{next}, {}) are not covered exactly once", g.stage_lo));
                }
                next = g.stage_hi;
                let hosts: BTreeSet<_> = g.replicas.iter().map(|r| &self.segments[r].host).collect();
                if hosts.len() != g.replicas.len() {
                    return bad(format!("{app}: two replicas of [{}, {}) share a switch", g.stage_lo, g.stage_hi));
                }
                if g.replicas.len() > 1 {
                    m.horizontal_eligibility(g.stage_lo..g.stage_hi)
                        .map_err(PrimitiveError::IneligibleForHorizontalScaling)?;
                }
            }
            if next != m.stages.len() {
                return bad(format!("{app}: segments cover [0, {next}) of {} stages", m.stages.len()));
            }
        }
        let mut spilled: BTreeMap<&StoreId, u64> = BTreeMap::new();
        for s in self.segments.values() {
            let m = self.manifest(&s.app)?;
            if s.stage_lo >= s.stage_hi || s.stage_hi > m.stages.len() {
                return bad(format!("segment {} has an invalid stage range", s.id));
            }
            if !topology.contains(&s.host) {
                return bad(format!("segment {} is hosted on unknown switch {}", s.id, s.host));
            }
            for i in s.stage_range() {
                match (m.stages[i].table(), s.tables.get(&i)) {
                    (None, None) => {}
                    (Some(def), Some(t)) if *def == t.def => {
                        t.audit().map_err(PrimitiveError::Invalid)?;
                        if let Some(store) = &t.remote {
                            topology.store(store)?;
                            *spilled.entry(store).or_default() += t.remote_len() * def.entry_bytes;
                        }
                    }
                    _ => return bad(format!("segment {} has wrong table state for stage {i}", s.id)),
                }
            }
            if s.tables.keys().any(|i| !s.stage_range().contains(i)) {
                return bad(format!("segment {} holds a table outside its stages", s.id));
            }
            if let Some(r) = &s.receipt {
                if r.switch != s.host || !topology.is_outstanding(r) {
                    return bad(format!("segment {} holds a stale receipt", s.id));
                }
                if !s.footprint(m).fits_within(&r.demand) {
                    return bad(format!("segment {} outgrew its allocation", s.id));
                }
            }
        }
        for (store, bytes) in spilled {
            if topology.store(store)?.used_bytes < bytes {
                return bad(format!("store {store} holds less than its spilled entries"));
            }
        }
        Ok(())
    }

    fn transact<R>(
        &mut self,
        topology: &mut Topology,
        f: impl FnOnce(&mut Deployment, &mut Topology) -> Result<R, PrimitiveError>,
    ) -> Result<R, PrimitiveError> {
        let mut d = self.clone();
        let mut t = topology.clone();
        let r = f(&mut d, &mut t)?;
        d.refresh();
        *self = d;
        *topology = t;
        Ok(r)
    }

    fn check_idle(&self, ids: &[SegmentId], now_us: u64) -> Result<(), PrimitiveError> {
        for id in ids {
            if self.segment(*id)?.is_paused(now_us) {
                return Err(PrimitiveError::Busy(*id));
            }
        }
        Ok(())
    }

    fn pause(&mut self, ids: &[SegmentId], until: u64) {
        for id in ids {
            if let Some(s) = self.segments.get_mut(id) {
                s.paused_until_us = Some(until);
            }
        }
    }

    fn reconfig_us(topology: &Topology, switches: &[&SwitchId]) -> Result<u64, PrimitiveError> {
        let mut m = 0;
        for s in switches {
            m = m.max(topology.switch(s)?.reconfig_latency_us);
        }
        Ok(m)
    }

    /// Places `design` as one segment on the best-fit switch, or splits it
    /// greedily into the longest contiguous runs that fit somewhere.
    pub fn deploy_minimal(
        &mut self,
        topology: &mut Topology,
        manifest: &AppManifest,
        design: &MinimalDesign,
    ) -> Result<(), PrimitiveError> {
        let app = &manifest.app_name;
        if self.apps.contains_key(app) {
            return Err(PrimitiveError::Invalid(format!("app {app} is already deployed")));
        }
        let n = manifest.stages.len();
        self.transact(topology, |d, t| {
            d.apps.insert(app.clone(), manifest.clone());
            let none = BTreeSet::new();
            let mut lo = 0;
            while lo < n {
                let placed = (lo + 1..=n).rev().find_map(|hi| {
                    best_fit(t, &design.range_footprint(lo..hi), &none).map(|sw| (hi, sw))
                });
                let Some((hi, sw)) = placed else {
                    return Err(PrimitiveError::DeploymentFailed(format!(
                        "stage {} of {app} fits no switch",
                        manifest.stages[lo].name
                    )));
                };
                let receipt = t.allocate(&sw, design.range_footprint(lo..hi))?;
                let id = d.alloc_id();
                let tables = (lo..hi)
                    .filter_map(|i| {
                        manifest.stages[i]
                            .table()
                            .map(|def| (i, TableState::new(def.clone(), def.initial_capacity, id.id_base())))
                    })
                    .collect();
                if lo == 0 {
                    d.ingress_map.insert(app.clone(), sw.clone());
                }
                d.segments.insert(
                    id,
                    Segment {
                        id,
                        app: app.clone(),
                        stage_lo: lo,
                        stage_hi: hi,
                        host: sw,
                        tables,
                        receipt: Some(receipt),
                        paused_until_us: None,
                    },
                );
                lo = hi;
            }
            Ok(())
        })
    }

    /// Splits `segment` at `cut`, moving stages `[cut, hi)` with their state
    /// to `target`.
    pub fn sequential_decompose(
        &mut self,
        topology: &mut Topology,
        segment: SegmentId,
        cut: usize,
        target: &SwitchId,
        now_us: u64,
    ) -> Result<Applied, PrimitiveError> {
        self.transact(topology, |d, t| {
            let seg = d.segment(segment)?.clone();
            if !(seg.stage_lo < cut && cut < seg.stage_hi) {
                return Err(PrimitiveError::InvalidCut {
                    segment,
                    cut,
                    lo: seg.stage_lo,
                    hi: seg.stage_hi,
                });
            }
            if d.group_of(segment)?.replicas.len() > 1 {
                return Err(PrimitiveError::Invalid(format!("segment {segment} is replicated")));
            }
            if *target == seg.host {
                return Err(PrimitiveError::Invalid(format!("segment {segment} already runs on {target}")));
            }
            d.check_idle(&[segment], now_us)?;
            let m = d.manifest(&seg.app)?.clone();
            let prefix = seg.range_footprint(&m, seg.stage_lo..cut);
            let suffix = seg.range_footprint(&m, cut..seg.stage_hi);
            if let Some(r) = &seg.receipt {
                t.free(r)?;
            }
            let prefix_receipt = t.allocate(&seg.host, prefix)?;
            let suffix_receipt = t.allocate(target, suffix)?;
            let new_id = d.alloc_id();
            let s = d.segments.get_mut(&segment).unwrap();
            let moved_tables = s.tables.split_off(&cut);
            let moved: u64 = moved_tables.values().map(|t| t.used() + t.remote_len()).sum();
            s.stage_hi = cut;
            s.receipt = Some(prefix_receipt);
            d.segments.insert(
                new_id,
                Segment {
                    id: new_id,
                    app: seg.app.clone(),
                    stage_lo: cut,
                    stage_hi: seg.stage_hi,
                    host: target.clone(),
                    tables: moved_tables,
                    receipt: Some(suffix_receipt),
                    paused_until_us: None,
                },
            );
            let done = now_us + Self::reconfig_us(t, &[&seg.host, target])? + d.config.copy_us(moved);
            d.pause(&[segment, new_id], done);
            Ok(Applied {
                details: ActionDetails::SeqDecompose {
                    segment,
                    cut,
                    host: seg.host.clone(),
                    target: target.clone(),
                    new_segment: new_id,
                    moved_entries: moved,
                },
                paused: vec![segment, new_id],
                done_at_us: done,
            })
        })
    }

    /// Adds one replica of `segment`'s stage range per switch in
    /// `replica_switches` and re-partitions per-key state across the group.
    pub fn horizontal_scale(
        &mut self,
        topology: &mut Topology,
        segment: SegmentId,
        replica_switches: &[SwitchId],
        now_us: u64,
    ) -> Result<Applied, PrimitiveError> {
        self.transact(topology, |d, t| {
            let seg = d.segment(segment)?.clone();
            let m = d.manifest(&seg.app)?.clone();
            let key = m
                .horizontal_eligibility(seg.stage_range())
                .map_err(PrimitiveError::IneligibleForHorizontalScaling)?;
            if replica_switches.is_empty() {
                return Err(PrimitiveError::Invalid("no replica switches given".into()));
            }
            let old = d.group_of(segment)?.replicas.clone();
            d.check_idle(&old, now_us)?;
            let mut hosts: BTreeSet<SwitchId> = old.iter().map(|r| d.segments[r].host.clone()).collect();
            let footprint = seg.footprint(&m);
            let mut added = Vec::new();
            let mut moved = 0;
            for sw in replica_switches {
                if !hosts.insert(sw.clone()) {
                    return Err(PrimitiveError::Invalid(format!("{sw} already hosts a replica")));
                }
                let receipt = t.allocate(sw, footprint)?;
                let id = d.alloc_id();
                let mut tables = BTreeMap::new();
                for (i, ts) in &seg.tables {
                    let mut fresh = TableState::new(ts.def.clone(), ts.capacity, id.id_base());
                    if ts.def.key_kind != key {
                        // Unpartitioned tables carry control-plane rules to every replica.
                        for (k, e) in ts.entries().filter(|(_, e)| !e.dynamic && e.used_bit) {
                            fresh.adopt(k.clone(), e.clone()).map_err(|_| PrimitiveError::RepartitionOverflow(id))?;
                            moved += 1;
                        }
                        for p in ts.pending() {
                            fresh.push_pending(p.clone());
                        }
                    }
                    tables.insert(*i, fresh);
                }
                d.segments.insert(
                    id,
                    Segment {
                        id,
                        app: seg.app.clone(),
                        stage_lo: seg.stage_lo,
                        stage_hi: seg.stage_hi,
                        host: sw.clone(),
                        tables,
                        receipt: Some(receipt),
                        paused_until_us: None,
                    },
                );
                added.push((sw.clone(), id));
            }
            d.refresh();
            let group = d.group_of(segment)?.replicas.clone();
            moved += d.repartition(t, &group, key)?;
            let switches: Vec<&SwitchId> = group.iter().map(|r| &d.segments[r].host).collect();
            let done = now_us + Self::reconfig_us(t, &switches)? + d.config.copy_us(moved);
            d.pause(&group, done);
            Ok(Applied {
                details: ActionDetails::HorizScale {
                    segment,
                    added,
                    replicas: group.iter().map(|r| (d.segments[r].host.clone(), *r)).collect(),
                    moved_entries: moved,
                },
                paused: group,
                done_at_us: done,
            })
        })
    }

    /// Redistributes entries of tables keyed by the partition key so each
    /// lives on `lb_select(key, replicas)`. Remote entries are pulled back
    /// and their bindings released. Returns the number of entries moved.
    fn repartition(&mut self, t: &mut Topology, replicas: &[SegmentId], key: KeyKind) -> Result<u64, PrimitiveError> {
        let stages: Vec<usize> = self.segments[&replicas[0]]
            .tables
            .iter()
            .filter(|(_, ts)| ts.def.key_kind == key)
            .map(|(i, _)| *i)
            .collect();
        let mut moved = 0;
        for stage in stages {
            let mut entries = Vec::new();
            let mut pending = Vec::new();
            for r in replicas {
                let ts = self.segments.get_mut(r).unwrap().tables.get_mut(&stage).unwrap();
                let (local, remote) = ts.drain_used();
                if let Some(store) = ts.remote.take() {
                    t.release_store(&store, remote.len() as u64 * ts.def.entry_bytes)?;
                }
                entries.extend(local.into_iter().map(|(k, e)| (*r, k, e)));
                entries.extend(remote.into_iter().map(|(k, e)| (SegmentId(u32::MAX), k, e)));
                pending.extend(ts.take_pending());
            }
            for (origin, k, e) in entries {
                let owner = *lb_select(&k.value, replicas).expect("replicas non-empty");
                if owner != origin {
                    moved += 1;
                }
                let ts = self.segments.get_mut(&owner).unwrap().tables.get_mut(&stage).unwrap();
                ts.adopt(k, e).map_err(|_| PrimitiveError::RepartitionOverflow(owner))?;
            }
            for p in pending {
                let owner = *lb_select(&p.key.value, replicas).expect("replicas non-empty");
                self.segments.get_mut(&owner).unwrap().tables.get_mut(&stage).unwrap().push_pending(p);
            }
        }
        Ok(moved)
    }

    /// Extends `table` of `segment` with remote memory in `store`.
    pub fn vertical_scale_disaggregate(
        &mut self,
        topology: &mut Topology,
        segment: SegmentId,
        table: &str,
        store: &StoreId,
        now_us: u64,
    ) -> Result<Applied, PrimitiveError> {
        self.transact(topology, |d, t| {
            d.check_idle(&[segment], now_us)?;
            let seg = d.segments.get_mut(&segment).ok_or(PrimitiveError::UnknownSegment(segment))?;
            let host = seg.host.clone();
            let ts = seg
                .tables
                .values_mut()
                .find(|ts| ts.name() == table)
                .ok_or_else(|| PrimitiveError::UnknownTable { segment, table: table.to_string() })?;
            if ts.remote.is_some() {
                return Err(PrimitiveError::AlreadyBound { segment, table: table.to_string() });
            }
            let s = t.store(store)?;
            if s.free_bytes() < ts.def.entry_bytes {
                return Err(FabricError::RemoteCapacityExceeded {
                    store: store.clone(),
                    requested: ts.def.entry_bytes,
                    available: s.free_bytes(),
                }
                .into());
            }
            ts.remote = Some(store.clone());
            let done = now_us + Self::reconfig_us(t, &[&host])?;
            d.pause(&[segment], done);
            Ok(Applied {
                details: ActionDetails::VertDisaggregate {
                    segment,
                    table: table.to_string(),
                    store: store.clone(),
                },
                paused: vec![segment],
                done_at_us: done,
            })
        })
    }

    /// Footprint of `segment` with every expandable table grown by `growth`.
    pub fn grown_footprint(&self, segment: SegmentId, growth: f64) -> Result<ResourceVector, PrimitiveError> {
        let seg = self.segment(segment)?;
        let m = self.manifest(&seg.app)?;
        Ok(seg
            .stage_range()
            .map(|i| {
                footprint_with_capacity(&m.stages[i], |def| {
                    let cap = seg.tables.get(&i).map_or(0, |t| t.capacity);
                    if def.expandable {
                        grow(cap, growth)
                    } else {
                        cap
                    }
                })
            })
            .sum())
    }

    /// Grows every expandable table of `segment` by `growth_factor` and
    /// re-hosts it on `new_switch`, copying all entries. Growing in place
    /// when `new_switch` is the current host.
    pub fn vertical_scale_migrate(
        &mut self,
        topology: &mut Topology,
        segment: SegmentId,
        new_switch: &SwitchId,
        growth_factor: f64,
        now_us: u64,
    ) -> Result<Applied, PrimitiveError> {
        if !(growth_factor > 1.0) {
            return Err(PrimitiveError::GrowthFactor(growth_factor));
        }
        self.transact(topology, |d, t| {
            let seg = d.segment(segment)?.clone();
            if !seg.tables.values().any(|ts| ts.def.expandable) {
                return Err(PrimitiveError::Invalid(format!("segment {segment} has no expandable table")));
            }
            let group = d.group_of(segment)?.replicas.clone();
            d.check_idle(&group, now_us)?;
            let in_place = *new_switch == seg.host;
            if !in_place && group.iter().any(|r| d.segments[r].host == *new_switch) {
                return Err(PrimitiveError::Invalid(format!("{new_switch} already hosts a replica")));
            }
            let grown = d.grown_footprint(segment, growth_factor)?;
            if let Some(r) = &seg.receipt {
                t.free(r)?;
            }
            let receipt = t.allocate(new_switch, grown)?;
            let s = d.segments.get_mut(&segment).unwrap();
            let mut capacities = Vec::new();
            for ts in s.tables.values_mut().filter(|ts| ts.def.expandable) {
                let after = grow(ts.capacity, growth_factor);
                capacities.push(CapacityChange { table: ts.name().to_string(), before: ts.capacity, after });
                ts.capacity = after;
            }
            s.host = new_switch.clone();
            s.receipt = Some(receipt);
            let copied = if in_place { 0 } else { s.used_entries() };
            let mut moved = copied;
            let mut paused = vec![segment];
            if !in_place && group.len() > 1 {
                d.refresh();
                let key = d.manifest(&seg.app)?.partition_key.expect("replicated app has a key");
                let group = d.group_of(segment)?.replicas.clone();
                moved += d.repartition(t, &group, key)?;
                paused = group;
            }
            let done = now_us + Self::reconfig_us(t, &[&seg.host, new_switch])? + d.config.copy_us(moved);
            d.pause(&paused, done);
            Ok(Applied {
                details: ActionDetails::VertMigrate {
                    segment,
                    from: seg.host.clone(),
                    to: new_switch.clone(),
                    growth_factor,
                    capacities,
                    copied_entries: copied,
                },
                paused,
                done_at_us: done,
            })
        })
    }
}

/// `ceil(capacity × growth)`.
pub fn grow(capacity: u64, growth: f64) -> u64 {
    (capacity as f64 * growth).ceil() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appir::{compile_minimal, parse_app};
    use crate::dataplane::{Action, Entry, EntryKey};
    use crate::fabric::load_topology;
    use std::net::Ipv4Addr;

    const L4LB: &str = include_str!("../assets/l4lb.iapp");
    const ACL: &str = include_str!("../assets/acl.iapp");
    const FOUR: &str = "app four\npartition_key five_tuple\nstage a action insert_state alus 1\n  table ta key five_tuple entry_bytes 8 capacity 16 expandable\nstage b action forward alus 1\nstage c action forward alus 1\n  table tc key dst_ip entry_bytes 8 capacity 8\nstage d action forward alus 1\n";

    fn topo(switches: &[(&str, u64)]) -> Topology {
        let sw: Vec<String> = switches
            .iter()
            .map(|(id, sram)| format!(r#"{{"id":"{id}","sram_bytes":{sram},"stages":8,"alus_per_stage":16}}"#))
            .collect();
        let links: Vec<String> = switches
            .windows(2)
            .map(|w| format!(r#"{{"a":"{}","b":"{}","latency_us":1,"bandwidth_bps":10000000000}}"#, w[0].0, w[1].0))
            .collect();
        load_topology(&format!(
            r#"{{"switches":[{}],"links":[{}],"remote_stores":[{{"id":"R1","attached_switch":"{}","rtt_us":10,"capacity_bytes":320}}]}}"#,
            sw.join(","),
            links.join(","),
            switches[0].0
        ))
        .unwrap()
    }

    fn deploy(src: &str, t: &mut Topology) -> (Deployment, SegmentId) {
        let m = parse_app(src).unwrap();
        let caps: Vec<_> = t.switches().iter().map(|s| s.capacity).collect();
        let design = compile_minimal(&m, &caps).unwrap();
        let mut d = Deployment::default();
        d.deploy_minimal(t, &m, &design).unwrap();
        let id = d.segments().next().unwrap().id;
        (d, id)
    }

    fn flow(i: u32) -> FlowKey {
        FlowKey::new(Ipv4Addr::from(0x0a00_0000 + i), Ipv4Addr::new(10, 1, 0, 1), 1000 + i as u16, 80, 6)
    }

    #[test]
    fn deploy_prefers_best_fit_single_segment() {
        let mut t = topo(&[("A", 100_000), ("B", 6_000), ("C", 5_000)]);
        let (d, id) = deploy(L4LB, &mut t);
        assert_eq!(d.segments().count(), 1);
        assert_eq!(d.segment(id).unwrap().host, SwitchId::from("B"));
        assert_eq!(d.ingress("l4lb"), Some(&SwitchId::from("B")));
        d.validate(&t).unwrap();
        t.check_conservation().unwrap();
    }

    #[test]
    fn deploy_splits_when_nothing_fits_whole() {
        let mut t = topo(&[("A", 4200), ("B", 1100)]);
        let (d, _) = deploy(L4LB, &mut t);
        let hosts: Vec<_> = d.segments().map(|s| (s.host.as_str().to_string(), s.stage_lo, s.stage_hi)).collect();
        assert_eq!(hosts, vec![("A".into(), 0, 1), ("B".into(), 1, 2)]);
        d.validate(&t).unwrap();

        let mut tiny = topo(&[("A", 100)]);
        let m = parse_app(L4LB).unwrap();
        let design = compile_minimal(&m, &[ResourceVector::new(10_000, 8, 8)]).unwrap();
        let err = Deployment::default().deploy_minimal(&mut tiny, &m, &design).unwrap_err();
        assert!(matches!(err, PrimitiveError::DeploymentFailed(_)));
        assert_eq!(tiny.switch(&"A".into()).unwrap().usage, ResourceVector::ZERO);
    }

    #[test]
    fn decompose_moves_suffix() {
        let mut t = topo(&[("X", 10_000), ("Y", 10_000)]);
        let (mut d, id) = deploy(FOUR, &mut t);
        let before_x = t.switch(&"X".into()).unwrap().usage;
        let m = d.manifest("four").unwrap().clone();
        let suffix: ResourceVector = d.segment(id).unwrap().range_footprint(&m, 2..4);
        let a = d.sequential_decompose(&mut t, id, 2, &"Y".into(), 0).unwrap();
        let ActionDetails::SeqDecompose { new_segment, .. } = a.details else { panic!() };
        assert_eq!(d.segment(id).unwrap().stage_range(), 0..2);
        assert_eq!(d.segment(new_segment).unwrap().stage_range(), 2..4);
        assert_eq!(d.segment(new_segment).unwrap().host, SwitchId::from("Y"));
        assert_eq!(t.switch(&"X".into()).unwrap().usage, before_x - suffix);
        assert_eq!(t.switch(&"Y".into()).unwrap().usage, suffix);
        assert_eq!(a.done_at_us, 500);
        d.validate(&t).unwrap();
        t.check_conservation().unwrap();
        assert!(matches!(
            d.sequential_decompose(&mut t, id, 0, &"Y".into(), 1000),
            Err(PrimitiveError::InvalidCut { .. })
        ));
    }

    #[test]
    fn acl_is_not_horizontally_scalable() {
        let mut t = topo(&[("A", 100_000), ("B", 100_000)]);
        let (mut d, id) = deploy(ACL, &mut t);
        let before = (d.clone(), t.clone());
        let err = d.horizontal_scale(&mut t, id, &["B".into()], 0).unwrap_err();
        assert!(matches!(err, PrimitiveError::IneligibleForHorizontalScaling(_)));
        assert_eq!((d, t), before);
    }

    #[test]
    fn horizontal_scale_repartitions_by_hash() {
        let mut t = topo(&[("A", 100_000), ("B", 100_000), ("C", 100_000)]);
        let (mut d, id) = deploy(L4LB, &mut t);
        let conn = d.segment(id).unwrap().table_named("conn_table").unwrap().0;
        for i in 0..100 {
            let ts = d.segment_mut(id).unwrap().tables.get_mut(&conn).unwrap();
            let k = EntryKey::exact(flow(i).canonical_bytes().to_vec());
            ts.insert(k, Entry::dynamic(Action::Flow { id: i as u64, pin: 0 }, 0)).unwrap();
        }
        let a = d.horizontal_scale(&mut t, id, &["C".into()], 0).unwrap();
        d.validate(&t).unwrap();
        t.check_conservation().unwrap();
        let replicas = d.group_of(id).unwrap().replicas.clone();
        assert_eq!(replicas.len(), 2);
        assert_eq!(d.lb_rules().len(), 1);
        assert_eq!(d.lb_rules()[0].attached, LbAttachment::Ingress);
        let mut total = 0;
        for r in &replicas {
            for (k, _) in d.segment(*r).unwrap().tables[&conn].entries() {
                assert_eq!(lb_select(&k.value, &replicas).unwrap(), r);
                total += 1;
            }
        }
        assert_eq!(total, 100);
        for i in 0..100 {
            assert!(d.route("l4lb", 0, &flow(i)).is_some());
        }
        assert!(a.done_at_us >= 500);
        // A second action waits for the first to finish.
        assert!(matches!(
            d.horizontal_scale(&mut t, id, &["B".into()], 10),
            Err(PrimitiveError::Busy(_))
        ));
    }

    #[test]
    fn migrate_grows_by_factor() {
        let mut t = topo(&[("A", 20_000), ("B", 40_000)]);
        let (mut d, id) = deploy(ACL, &mut t);
        let a = d.vertical_scale_migrate(&mut t, id, &"B".into(), 1.25, 0).unwrap();
        let ActionDetails::VertMigrate { capacities, .. } = &a.details else { panic!() };
        assert_eq!(capacities[0].before, 400);
        assert_eq!(capacities[0].after, 500);
        assert_eq!(d.segment(id).unwrap().host, SwitchId::from("B"));
        assert_eq!(t.switch(&"A".into()).unwrap().usage, ResourceVector::ZERO);
        d.validate(&t).unwrap();
        assert!(matches!(
            d.vertical_scale_migrate(&mut t, id, &"A".into(), 1.0, 1000),
            Err(PrimitiveError::GrowthFactor(_))
        ));
        assert_eq!(grow(1000, 1.25), 1250);
        assert_eq!(grow(3, 1.25), 4);
    }

    #[test]
    fn disaggregate_binds_store() {
        let mut t = topo(&[("A", 100_000)]);
        let (mut d, id) = deploy(L4LB, &mut t);
        d.vertical_scale_disaggregate(&mut t, id, "conn_table", &"R1".into(), 0).unwrap();
        assert_eq!(d.remote_bindings().len(), 1);
        assert!(matches!(
            d.vertical_scale_disaggregate(&mut t, id, "conn_table", &"R1".into(), 1000),
            Err(PrimitiveError::AlreadyBound { .. })
        ));
        t.reserve_store(&"R1".into(), 320).unwrap();
        assert!(matches!(
            d.vertical_scale_disaggregate(&mut t, id, "backend_map", &"R1".into(), 1000),
            Err(PrimitiveError::Fabric(FabricError::RemoteCapacityExceeded { .. }))
        ));
    }
}
