//! Physical substrate: switches with finite resources, links, remote memory
//! stores and the pre-computed overlay tables that let any switch tunnel a
//! tagged packet to any other switch.
//!
//! All resource usage goes through [`Topology::allocate`] and
//! [`Topology::free`], which keep a ledger of outstanding receipts so that
//! usage can be audited against the sum of live demands at any point.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default time a switch needs to install a new pipeline segment.
pub const DEFAULT_RECONFIG_LATENCY_US: u64 = 500;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SwitchId(pub String);

impl SwitchId {
    pub fn new(id: impl Into<String>) -> Self {
        SwitchId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SwitchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SwitchId {
    fn from(s: &str) -> Self {
        SwitchId(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StoreId(pub String);

impl fmt::Display for StoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StoreId {
    fn from(s: &str) -> Self {
        StoreId(s.to_owned())
    }
}

/// Egress port of a switch. Ports are numbered per switch in the order the
/// incident links appear in the topology file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PortId(pub u32);

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// One of the three modelled resource dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    Sram,
    Stages,
    Alus,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Sram => "sram",
            Dimension::Stages => "stages",
            Dimension::Alus => "alus",
        })
    }
}

/// Capacity, usage or demand of a switch. All three dimensions are additive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceVector {
    pub sram_bytes: u64,
    pub stages: u64,
    pub alu_slots_per_stage: u64,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector {
        sram_bytes: 0,
        stages: 0,
        alu_slots_per_stage: 0,
    };

    pub const fn new(sram_bytes: u64, stages: u64, alu_slots_per_stage: u64) -> Self {
        ResourceVector {
            sram_bytes,
            stages,
            alu_slots_per_stage,
        }
    }

    pub fn get(&self, dim: Dimension) -> u64 {
        match dim {
            Dimension::Sram => self.sram_bytes,
            Dimension::Stages => self.stages,
            Dimension::Alus => self.alu_slots_per_stage,
        }
    }

    /// First dimension (in sram, stages, alus order) where `self` exceeds
    /// `available`, or `None` if it fits.
    pub fn binding_dimension(&self, available: &ResourceVector) -> Option<Dimension> {
        [Dimension::Sram, Dimension::Stages, Dimension::Alus]
            .into_iter()
            .find(|&d| self.get(d) > available.get(d))
    }

    pub fn fits_within(&self, available: &ResourceVector) -> bool {
        self.binding_dimension(available).is_none()
    }

    pub fn checked_sub(&self, rhs: &ResourceVector) -> Option<ResourceVector> {
        Some(ResourceVector {
            sram_bytes: self.sram_bytes.checked_sub(rhs.sram_bytes)?,
            stages: self.stages.checked_sub(rhs.stages)?,
            alu_slots_per_stage: self.alu_slots_per_stage.checked_sub(rhs.alu_slots_per_stage)?,
        })
    }

    pub fn saturating_sub(&self, rhs: &ResourceVector) -> ResourceVector {
        ResourceVector {
            sram_bytes: self.sram_bytes.saturating_sub(rhs.sram_bytes),
            stages: self.stages.saturating_sub(rhs.stages),
            alu_slots_per_stage: self
                .alu_slots_per_stage
                .saturating_sub(rhs.alu_slots_per_stage),
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: ResourceVector) -> ResourceVector {
        ResourceVector {
            sram_bytes: self.sram_bytes + rhs.sram_bytes,
            stages: self.stages + rhs.stages,
            alu_slots_per_stage: self.alu_slots_per_stage + rhs.alu_slots_per_stage,
        }
    }
}

impl Sub for ResourceVector {
    type Output = ResourceVector;

    /// Panics on underflow; use [`ResourceVector::checked_sub`] when the
    /// operands are not known to be ordered.
    fn sub(self, rhs: ResourceVector) -> ResourceVector {
        self.checked_sub(&rhs)
            .expect("resource vector subtraction underflow")
    }
}

impl std::iter::Sum for ResourceVector {
    fn sum<I: Iterator<Item = ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, Add::add)
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{sram {}, stages {}, alus {}}}",
            self.sram_bytes, self.stages, self.alu_slots_per_stage
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReceiptId(pub u64);

impl fmt::Display for ReceiptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Proof of an allocation, needed to release it again.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub id: ReceiptId,
    pub switch: SwitchId,
    pub demand: ResourceVector,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchNode {
    pub id: SwitchId,
    pub capacity: ResourceVector,
    pub usage: ResourceVector,
    pub ports: Vec<PortId>,
    pub overlay_table: BTreeMap<SwitchId, PortId>,
    pub reconfig_latency_us: u64,
    /// Index into `Topology::links` for each port.
    port_links: Vec<usize>,
}

impl SwitchNode {
    pub fn free(&self) -> ResourceVector {
        self.capacity - self.usage
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub endpoint_a: SwitchId,
    pub endpoint_b: SwitchId,
    pub latency_us: u64,
    pub bandwidth_bps: u64,
}

impl Link {
    pub fn other(&self, end: &SwitchId) -> &SwitchId {
        if &self.endpoint_a == end {
            &self.endpoint_b
        } else {
            &self.endpoint_a
        }
    }

    /// Serialization delay of `bytes` on this link, floored to whole µs.
    pub fn transmit_us(&self, bytes: u64) -> u64 {
        ((bytes as u128 * 8 * 1_000_000) / self.bandwidth_bps as u128) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteStore {
    pub id: StoreId,
    pub attached_switch: SwitchId,
    pub rtt_us: u64,
    pub capacity_bytes: u64,
    pub used_bytes: u64,
}

impl RemoteStore {
    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.used_bytes
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("topology parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid topology: {0}")]
    Validation(String),
    #[error("topology is disconnected: {to} is unreachable from {from}")]
    Disconnected { from: SwitchId, to: SwitchId },
    #[error("unknown switch {0}")]
    UnknownSwitch(SwitchId),
    #[error("unknown remote store {0}")]
    UnknownStore(StoreId),
    #[error("capacity exceeded on {switch}: {dimension} needs {requested}, {available} free")]
    CapacityExceeded {
        switch: SwitchId,
        dimension: Dimension,
        requested: u64,
        available: u64,
    },
    #[error("receipt {0} is unknown or already freed")]
    UnknownReceipt(ReceiptId),
    #[error("{0} cannot target itself through the overlay")]
    SelfTarget(SwitchId),
    #[error("remote store {store} is full: {requested} bytes requested, {available} free")]
    RemoteCapacityExceeded {
        store: StoreId,
        requested: u64,
        available: u64,
    },
}

/// Topology file schema.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub switches: Vec<SwitchSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub remote_stores: Vec<StoreSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSpec {
    pub id: String,
    pub sram_bytes: u64,
    pub stages: u64,
    pub alus_per_stage: u64,
    #[serde(default = "default_reconfig")]
    pub reconfig_latency_us: u64,
}

fn default_reconfig() -> u64 {
    DEFAULT_RECONFIG_LATENCY_US
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency_us: u64,
    pub bandwidth_bps: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSpec {
    pub id: String,
    pub attached_switch: String,
    pub rtt_us: u64,
    pub capacity_bytes: u64,
}

/// Parse and validate a JSON topology document, computing overlay tables.
pub fn load_topology(text: &str) -> Result<Topology, FabricError> {
    let spec: TopologySpec = serde_json::from_str(text).map_err(|e| FabricError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Topology::build(&spec)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    switches: Vec<SwitchNode>,
    links: Vec<Link>,
    remote_stores: Vec<RemoteStore>,
    index: BTreeMap<SwitchId, usize>,
    ledger: BTreeMap<ReceiptId, Receipt>,
    next_receipt: u64,
}

impl Topology {
    pub fn build(spec: &TopologySpec) -> Result<Topology, FabricError> {
        let mut index = BTreeMap::new();
        let mut switches = Vec::with_capacity(spec.switches.len());
        if spec.switches.is_empty() {
            return Err(FabricError::Validation("no switches declared".into()));
        }
        for (i, s) in spec.switches.iter().enumerate() {
            if s.id.is_empty() {
                return Err(FabricError::Validation(format!("switches[{i}].id is empty")));
            }
            let id = SwitchId::new(s.id.clone());
            if index.insert(id.clone(), i).is_some() {
                return Err(FabricError::Validation(format!("duplicate switch id {id}")));
            }
            switches.push(SwitchNode {
                id,
                capacity: ResourceVector::new(s.sram_bytes, s.stages, s.alus_per_stage),
                usage: ResourceVector::ZERO,
                ports: Vec::new(),
                overlay_table: BTreeMap::new(),
                reconfig_latency_us: s.reconfig_latency_us,
                port_links: Vec::new(),
            });
        }

        let mut links = Vec::with_capacity(spec.links.len());
        for (i, l) in spec.links.iter().enumerate() {
            let a = SwitchId::new(l.a.clone());
            let b = SwitchId::new(l.b.clone());
            for end in [&a, &b] {
                if !index.contains_key(end) {
                    return Err(FabricError::Validation(format!(
                        "links[{i}] endpoint {end} is not a declared switch"
                    )));
                }
            }
            if a == b {
                return Err(FabricError::Validation(format!("links[{i}] is a self-loop on {a}")));
            }
            if l.latency_us < 1 {
                return Err(FabricError::Validation(format!("links[{i}].latency_us must be >= 1")));
            }
            if l.bandwidth_bps < 1 {
                return Err(FabricError::Validation(format!(
                    "links[{i}].bandwidth_bps must be >= 1"
                )));
            }
            for end in [&a, &b] {
                let node = &mut switches[index[end]];
                node.ports.push(PortId(node.ports.len() as u32));
                node.port_links.push(i);
            }
            links.push(Link {
                endpoint_a: a,
                endpoint_b: b,
                latency_us: l.latency_us,
                bandwidth_bps: l.bandwidth_bps,
            });
        }

        let mut remote_stores = Vec::with_capacity(spec.remote_stores.len());
        for (i, r) in spec.remote_stores.iter().enumerate() {
            let id = StoreId(r.id.clone());
            if remote_stores.iter().any(|s: &RemoteStore| s.id == id) {
                return Err(FabricError::Validation(format!("duplicate remote store id {id}")));
            }
            let attached = SwitchId::new(r.attached_switch.clone());
            if !index.contains_key(&attached) {
                return Err(FabricError::Validation(format!(
                    "remote_stores[{i}].attached_switch {attached} is not a declared switch"
                )));
            }
            if r.rtt_us < 1 || r.capacity_bytes < 1 {
                return Err(FabricError::Validation(format!(
                    "remote_stores[{i}] needs positive rtt_us and capacity_bytes"
                )));
            }
            remote_stores.push(RemoteStore {
                id,
                attached_switch: attached,
                rtt_us: r.rtt_us,
                capacity_bytes: r.capacity_bytes,
                used_bytes: 0,
            });
        }

        let mut topo = Topology {
            switches,
            links,
            remote_stores,
            index,
            ledger: BTreeMap::new(),
            next_receipt: 0,
        };
        topo.compute_overlay()?;
        Ok(topo)
    }

    /// Latency-weighted shortest-path distances from `target` to every switch.
    fn distances_to(&self, target: usize) -> Vec<Option<u64>> {
        let mut dist = vec![None; self.switches.len()];
        let mut heap = BinaryHeap::new();
        dist[target] = Some(0);
        heap.push(Reverse((0u64, target)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if dist[u].is_some_and(|best| d > best) {
                continue;
            }
            for &li in &self.switches[u].port_links {
                let link = &self.links[li];
                let v = self.index[link.other(&self.switches[u].id)];
                let nd = d + link.latency_us;
                if dist[v].is_none_or(|cur| nd < cur) {
                    dist[v] = Some(nd);
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        dist
    }

    fn compute_overlay(&mut self) -> Result<(), FabricError> {
        let n = self.switches.len();
        for t in 0..n {
            let dist = self.distances_to(t);
            if let Some(u) = dist.iter().position(Option::is_none) {
                return Err(FabricError::Disconnected {
                    from: self.switches[t].id.clone(),
                    to: self.switches[u].id.clone(),
                });
            }
            let target = self.switches[t].id.clone();
            for s in (0..n).filter(|&s| s != t) {
                // Minimize (path cost, next-hop id, port).
                let mut best: Option<(u64, &SwitchId, PortId)> = None;
                let node = &self.switches[s];
                for (p, &li) in node.port_links.iter().enumerate() {
                    let link = &self.links[li];
                    let nb = link.other(&node.id);
                    let cost = link.latency_us + dist[self.index[nb]].unwrap();
                    let cand = (cost, nb, PortId(p as u32));
                    if best.as_ref().is_none_or(|b| cand < *b) {
                        best = Some(cand);
                    }
                }
                let (_, _, port) = best.expect("connected switch has a port");
                self.switches[s].overlay_table.insert(target.clone(), port);
            }
        }
        Ok(())
    }

    pub fn switches(&self) -> &[SwitchNode] {
        &self.switches
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn remote_stores(&self) -> &[RemoteStore] {
        &self.remote_stores
    }

    pub fn switch_ids(&self) -> impl Iterator<Item = &SwitchId> {
        self.index.keys()
    }

    pub fn contains(&self, id: &SwitchId) -> bool {
        self.index.contains_key(id)
    }

    pub fn switch(&self, id: &SwitchId) -> Result<&SwitchNode, FabricError> {
        self.index
            .get(id)
            .map(|&i| &self.switches[i])
            .ok_or_else(|| FabricError::UnknownSwitch(id.clone()))
    }

    fn switch_mut(&mut self, id: &SwitchId) -> Result<&mut SwitchNode, FabricError> {
        match self.index.get(id) {
            Some(&i) => Ok(&mut self.switches[i]),
            None => Err(FabricError::UnknownSwitch(id.clone())),
        }
    }

    pub fn store(&self, id: &StoreId) -> Result<&RemoteStore, FabricError> {
        self.remote_stores
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| FabricError::UnknownStore(id.clone()))
    }

    /// Free resources on `switch`.
    pub fn headroom(&self, switch: &SwitchId) -> Result<ResourceVector, FabricError> {
        Ok(self.switch(switch)?.free())
    }

    /// Checks whether `demand` fits on `switch` without allocating.
    pub fn check_fit(&self, switch: &SwitchId, demand: &ResourceVector) -> Result<(), FabricError> {
        let free = self.headroom(switch)?;
        match demand.binding_dimension(&free) {
            None => Ok(()),
            Some(dimension) => Err(FabricError::CapacityExceeded {
                switch: switch.clone(),
                dimension,
                requested: demand.get(dimension),
                available: free.get(dimension),
            }),
        }
    }

    pub fn allocate(
        &mut self,
        switch: &SwitchId,
        demand: ResourceVector,
    ) -> Result<Receipt, FabricError> {
        self.check_fit(switch, &demand)?;
        let node = self.switch_mut(switch)?;
        node.usage = node.usage + demand;
        let receipt = Receipt {
            id: ReceiptId(self.next_receipt),
            switch: switch.clone(),
            demand,
        };
        self.next_receipt += 1;
        self.ledger.insert(receipt.id, receipt.clone());
        Ok(receipt)
    }

    pub fn free(&mut self, receipt: &Receipt) -> Result<(), FabricError> {
        let held = self
            .ledger
            .get(&receipt.id)
            .filter(|r| *r == receipt)
            .cloned()
            .ok_or(FabricError::UnknownReceipt(receipt.id))?;
        let node = self.switch_mut(&held.switch)?;
        node.usage = node
            .usage
            .checked_sub(&held.demand)
            .expect("ledger and usage out of sync");
        self.ledger.remove(&held.id);
        Ok(())
    }

    pub fn outstanding_receipts(&self) -> impl Iterator<Item = &Receipt> {
        self.ledger.values()
    }

    pub fn is_outstanding(&self, receipt: &Receipt) -> bool {
        self.ledger.get(&receipt.id) == Some(receipt)
    }

    /// Sum of outstanding demands on `switch`.
    pub fn ledger_usage(&self, switch: &SwitchId) -> ResourceVector {
        self.ledger
            .values()
            .filter(|r| &r.switch == switch)
            .map(|r| r.demand)
            .sum()
    }

    /// Egress port on `switch` toward `target` in the overlay.
    pub fn overlay_next_hop(
        &self,
        switch: &SwitchId,
        target: &SwitchId,
    ) -> Result<PortId, FabricError> {
        let node = self.switch(switch)?;
        if switch == target {
            return Err(FabricError::SelfTarget(switch.clone()));
        }
        node.overlay_table
            .get(target)
            .copied()
            .ok_or_else(|| FabricError::UnknownSwitch(target.clone()))
    }

    /// Link index and far-end switch behind `port` on `switch`.
    pub fn port_peer(&self, switch: &SwitchId, port: PortId) -> Result<(usize, &SwitchId), FabricError> {
        let node = self.switch(switch)?;
        let li = *node.port_links.get(port.0 as usize).ok_or_else(|| {
            FabricError::Validation(format!("switch {switch} has no port {port}"))
        })?;
        Ok((li, self.links[li].other(switch)))
    }

    /// Hop-by-hop overlay path from `from` to `to`, both ends included.
    pub fn overlay_path(&self, from: &SwitchId, to: &SwitchId) -> Result<Vec<SwitchId>, FabricError> {
        let mut path = vec![from.clone()];
        let mut cur = from.clone();
        while &cur != to {
            if path.len() > self.switches.len() {
                return Err(FabricError::Validation(format!("overlay loop from {from} to {to}")));
            }
            let port = self.overlay_next_hop(&cur, to)?;
            cur = self.port_peer(&cur, port)?.1.clone();
            path.push(cur.clone());
        }
        Ok(path)
    }

    /// Sum of one-way link latencies along the overlay path.
    pub fn overlay_cost(&self, from: &SwitchId, to: &SwitchId) -> Result<u64, FabricError> {
        let mut cost = 0;
        let mut cur = from.clone();
        while &cur != to {
            let port = self.overlay_next_hop(&cur, to)?;
            let (li, next) = self.port_peer(&cur, port)?;
            cost += self.links[li].latency_us;
            cur = next.clone();
        }
        Ok(cost)
    }

    pub fn reserve_store(&mut self, store: &StoreId, bytes: u64) -> Result<(), FabricError> {
        let s = self
            .remote_stores
            .iter_mut()
            .find(|s| &s.id == store)
            .ok_or_else(|| FabricError::UnknownStore(store.clone()))?;
        if bytes > s.free_bytes() {
            return Err(FabricError::RemoteCapacityExceeded {
                store: store.clone(),
                requested: bytes,
                available: s.free_bytes(),
            });
        }
        s.used_bytes += bytes;
        Ok(())
    }

    pub fn release_store(&mut self, store: &StoreId, bytes: u64) -> Result<(), FabricError> {
        let s = self
            .remote_stores
            .iter_mut()
            .find(|s| &s.id == store)
            .ok_or_else(|| FabricError::UnknownStore(store.clone()))?;
        s.used_bytes = s
            .used_bytes
            .checked_sub(bytes)
            .expect("remote store release underflow");
        Ok(())
    }

    /// Audits the resource ledger: usage equals outstanding demands and never
    /// exceeds capacity on every switch.
    pub fn check_conservation(&self) -> Result<(), String> {
        for node in &self.switches {
            let ledger = self.ledger_usage(&node.id);
            if ledger != node.usage {
                return Err(format!(
                    "switch {}: usage {} != outstanding receipts {}",
                    node.id, node.usage, ledger
                ));
            }
            if !node.usage.fits_within(&node.capacity) {
                return Err(format!(
                    "switch {}: usage {} exceeds capacity {}",
                    node.id, node.usage, node.capacity
                ));
            }
        }
        for s in &self.remote_stores {
            if s.used_bytes > s.capacity_bytes {
                return Err(format!("store {} over capacity", s.id));
            }
        }
        Ok(())
    }
}
