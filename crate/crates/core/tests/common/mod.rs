#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use infinity_core::appir::{compile_minimal, parse_app, AppManifest};
use infinity_core::dataplane::{FlowKey, FlowSpec, Workload};
use infinity_core::fabric::{LinkSpec, StoreSpec, SwitchId, SwitchSpec, Topology, TopologySpec};
use infinity_core::primitives::{Deployment, SegmentId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const L4LB: &str = include_str!("../../assets/l4lb.iapp");
pub const ACL: &str = include_str!("../../assets/acl.iapp");
pub const NAT: &str = include_str!("../../assets/nat.iapp");

pub const FOUR_STAGE: &str = "\
app four
partition_key five_tuple
stage a action insert_state alus 1
  table ta key five_tuple entry_bytes 8 capacity 64 expandable
stage b action forward alus 1
stage c action forward alus 1
  table tc key dst_ip entry_bytes 8 capacity 16 expandable
stage d action forward alus 1
";

/// Byte-at-a-time FNV-1a written against the published parameters, with the
/// multiply done in 128 bits and reduced explicitly.
pub fn reference_fnv1a64(data: &[u8]) -> u64 {
    let prime: u128 = 1 << 40 | 0x1b3;
    let mut h: u128 = 14_695_981_039_346_656_037;
    for &b in data {
        h ^= b as u128;
        h = (h * prime) % (1u128 << 64);
    }
    h as u64
}

/// The 13-byte key built by hand: addresses and ports big-endian, then proto.
pub fn reference_encoding(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16, proto: u8) -> Vec<u8> {
    let mut v = Vec::with_capacity(13);
    v.extend_from_slice(&src);
    v.extend_from_slice(&dst);
    v.push((sport >> 8) as u8);
    v.push(sport as u8);
    v.push((dport >> 8) as u8);
    v.push(dport as u8);
    v.push(proto);
    v
}

/// All-pairs shortest path lengths; `None` when unreachable.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize, u64)]) -> Vec<Vec<Option<u64>>> {
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for &(a, b, w) in edges {
        for (x, y) in [(a, b), (b, a)] {
            if d[x][y].map_or(true, |c| w < c) {
                d[x][y] = Some(w);
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].map_or(true, |c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

pub fn switch(id: &str, sram: u64) -> SwitchSpec {
    SwitchSpec {
        id: id.into(),
        sram_bytes: sram,
        stages: 8,
        alus_per_stage: 16,
        reconfig_latency_us: 500,
    }
}

pub fn link(a: &str, b: &str, latency_us: u64) -> LinkSpec {
    LinkSpec {
        a: a.into(),
        b: b.into(),
        latency_us,
        bandwidth_bps: 10_000_000_000,
    }
}

pub fn name(i: usize) -> String {
    format!("n{i}")
}

/// Random connected graph: a random spanning tree plus extra edges, with
/// latencies in 1..=10.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize, u64)> {
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for i in 1..n {
        let j = rng.gen_range(0..i);
        edges.push((j, i, rng.gen_range(1..=10)));
        seen.insert((j, i));
    }
    let extra = rng.gen_range(0..=n);
    for _ in 0..extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (a, b) = (a.min(b), a.max(b));
        if a != b && seen.insert((a, b)) {
            edges.push((a, b, rng.gen_range(1..=10)));
        }
    }
    edges
}

pub fn topology_from_graph(n: usize, edges: &[(usize, usize, u64)], sram: &[u64], store: bool) -> Topology {
    let spec = TopologySpec {
        switches: (0..n).map(|i| switch(&name(i), sram[i])).collect(),
        links: edges.iter().map(|&(a, b, w)| link(&name(a), &name(b), w)).collect(),
        remote_stores: if store {
            vec![StoreSpec {
                id: "r0".into(),
                attached_switch: name(0),
                rtt_us: 10,
                capacity_bytes: 4096,
            }]
        } else {
            vec![]
        },
    };
    Topology::build(&spec).expect("generated topology is valid")
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn deploy(src: &str, t: &mut Topology) -> (AppManifest, Deployment) {
    let m = parse_app(src).unwrap();
    let caps: Vec<_> = t.switch_ids().map(|id| t.headroom(id).unwrap()).collect();
    let design = compile_minimal(&m, &caps).unwrap();
    let mut d = Deployment::default();
    d.deploy_minimal(t, &m, &design).unwrap();
    (m, d)
}

pub fn only_segment(d: &Deployment) -> SegmentId {
    let ids: Vec<_> = d.segments().map(|s| s.id).collect();
    assert_eq!(ids.len(), 1);
    ids[0]
}

pub fn flow(i: u32) -> FlowKey {
    FlowKey::new(
        Ipv4Addr::from(0x0a00_0000 + i),
        Ipv4Addr::new(192, 168, 0, 1),
        1024 + (i % 60_000) as u16,
        80,
        6,
    )
}

/// `n` flows of `packets` packets each, 1 ms apart, flow i starting at `i * gap_us`.
pub fn steady(n: u32, packets: u64, gap_us: u64) -> Workload {
    Workload {
        flows: (0..n)
            .map(|i| FlowSpec {
                start_us: i as u64 * gap_us,
                duration_us: packets * 1000,
                pps: 1000,
                size_bytes: 64,
                flow: flow(i),
                app: None,
            })
            .collect(),
        control: vec![],
    }
}

/// Shifts every flow of `w` later by `offset_us`.
pub fn delayed(mut w: Workload, offset_us: u64) -> Workload {
    for f in &mut w.flows {
        f.start_us += offset_us;
    }
    w
}

pub fn sid(s: &str) -> SwitchId {
    SwitchId::from(s)
}

/// Outcome counts of one randomized primitive sequence.
#[derive(Debug, Default, Clone, Copy)]
pub struct Trial {
    pub applied: usize,
    pub rejected: usize,
}

fn random_switches(rng: &mut ChaCha8Rng, t: &Topology, k: usize) -> Vec<SwitchId> {
    let ids: Vec<SwitchId> = t.switch_ids().cloned().collect();
    (0..k).map(|_| ids[rng.gen_range(0..ids.len())].clone()).collect()
}

/// Deploys two apps on a random fabric, then applies `steps` random
/// primitive calls with live table contents. After every call the resource
/// ledger must balance, the deployment must validate against the fabric, and
/// a rejected call must leave both untouched.
pub fn primitive_trial(seed: u64, steps: usize) -> Result<Trial, String> {
    use infinity_core::dataplane::{Action, Entry, EntryKey};
    let mut rng = seeded(seed);
    let n = rng.gen_range(3..=8);
    let edges = random_graph(&mut rng, n);
    let sram: Vec<u64> = (0..n).map(|_| rng.gen_range(6_000..40_000)).collect();
    let mut t = topology_from_graph(n, &edges, &sram, true);
    let mut d = Deployment::default();
    for src in [L4LB, FOUR_STAGE] {
        let m = parse_app(src).unwrap();
        let caps: Vec<_> = t.switch_ids().map(|id| t.headroom(id).unwrap()).collect();
        let design = compile_minimal(&m, &caps).map_err(|e| e.to_string())?;
        d.deploy_minimal(&mut t, &m, &design).map_err(|e| e.to_string())?;
    }
    let mut trial = Trial::default();
    let mut now = 0u64;
    let mut next_flow = 0u32;
    for step in 0..steps {
        now += rng.gen_range(0..1_500);
        let segs: Vec<SegmentId> = d.segments().map(|s| s.id).collect();
        let seg = segs[rng.gen_range(0..segs.len())];
        // Fill some state so moves have something to carry.
        for _ in 0..rng.gen_range(0..20) {
            let s = d.segment_mut(seg).unwrap();
            if let Some(ts) = s.tables.values_mut().next() {
                let key = EntryKey::exact(flow(next_flow).key_bytes(ts.def.key_kind));
                let _ = ts.insert(key, Entry::dynamic(Action::Flow { id: next_flow as u64, pin: 0 }, now));
                next_flow += 1;
            }
        }
        let (d0, t0) = (d.clone(), t.clone());
        let s = d.segment(seg).unwrap();
        let (lo, hi) = (s.stage_lo, s.stage_hi);
        let tables: Vec<String> = s.tables.values().map(|t| t.name().to_string()).collect();
        let result = match rng.gen_range(0..4) {
            0 => {
                let k = rng.gen_range(1..=2);
                let targets = random_switches(&mut rng, &t, k);
                d.horizontal_scale(&mut t, seg, &targets, now).map(|_| ())
            }
            1 => {
                let cut = rng.gen_range(lo..=hi);
                let target = random_switches(&mut rng, &t, 1).remove(0);
                d.sequential_decompose(&mut t, seg, cut, &target, now).map(|_| ())
            }
            2 if !tables.is_empty() => {
                let table = &tables[rng.gen_range(0..tables.len())];
                d.vertical_scale_disaggregate(&mut t, seg, table, &"r0".into(), now).map(|_| ())
            }
            _ => {
                let target = random_switches(&mut rng, &t, 1).remove(0);
                let g = [1.25, 1.5, 0.9][rng.gen_range(0..3)];
                d.vertical_scale_migrate(&mut t, seg, &target, g, now).map(|_| ())
            }
        };
        match result {
            Ok(()) => trial.applied += 1,
            Err(_) => {
                trial.rejected += 1;
                if d != d0 || t != t0 {
                    return Err(format!("seed {seed} step {step}: rejected call changed state"));
                }
            }
        }
        t.check_conservation().map_err(|e| format!("seed {seed} step {step}: {e}"))?;
        d.validate(&t).map_err(|e| format!("seed {seed} step {step}: {e}"))?;
        for s in d.segments() {
            for ts in s.tables.values() {
                ts.audit().map_err(|e| format!("seed {seed} step {step}: {e}"))?;
            }
        }
    }
    Ok(trial)
}

/// Follows overlay next hops from `from` to `to`, returning the latency sum
/// and hop count. Fails on a loop or a dead end.
pub fn walk(t: &Topology, from: &SwitchId, to: &SwitchId) -> Result<(u64, usize), String> {
    let mut at = from.clone();
    let mut cost = 0;
    let mut hops = 0;
    while at != *to {
        if hops > t.switches().len() {
            return Err(format!("loop walking {from} -> {to}"));
        }
        let port = t.overlay_next_hop(&at, to).map_err(|e| e.to_string())?;
        let (li, peer) = t.port_peer(&at, port).map_err(|e| e.to_string())?;
        cost += t.links()[li].latency_us;
        at = peer.clone();
        hops += 1;
    }
    Ok((cost, hops))
}

/// Checks overlay totality, loop freedom and shortest-path cost on `count`
/// random connected topologies against Floyd-Warshall.
pub fn overlay_trial(seed: u64, count: usize) -> Result<usize, String> {
    let mut rng = seeded(seed);
    let mut pairs = 0;
    for case in 0..count {
        let n = 2 + case % 9;
        let edges = random_graph(&mut rng, n);
        let t = topology_from_graph(n, &edges, &vec![1000; n], false);
        let fw = floyd_warshall(n, &edges);
        for i in 0..n {
            for j in (0..n).filter(|j| *j != i) {
                let (a, b) = (sid(&name(i)), sid(&name(j)));
                let want = fw[i][j].ok_or("generated graph is disconnected")?;
                let cost = t.overlay_cost(&a, &b).map_err(|e| format!("case {case}: {e}"))?;
                let (walked, hops) = walk(&t, &a, &b).map_err(|e| format!("case {case}: {e}"))?;
                if cost != want || walked != want || hops >= n {
                    return Err(format!("case {case}: {a}->{b} cost {cost} walked {walked} in {hops} hops, want {want}"));
                }
                pairs += 1;
            }
        }
    }
    Ok(pairs)
}
