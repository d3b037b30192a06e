mod common;

use common::*;
use infinity_core::appir::parse_app;
use infinity_core::dataplane::{run_oracle, SimConfig, Simulation, StageContext, Verdict, VerdictKind};
use infinity_core::fabric::{StoreId, StoreSpec, Topology, TopologySpec};
use infinity_core::primitives::Deployment;
use infinity_core::scenarios::check_equivalence;

const TWO: &str = "\
app two
stage a action forward alus 1
  table ta key dst_ip entry_bytes 8 capacity 50
stage b action forward alus 1
  table tb key dst_ip entry_bytes 8 capacity 50
";

const TINY: &str = "\
app tiny
partition_key five_tuple
stage a action insert_state alus 1
  table t key five_tuple entry_bytes 8 capacity 2 expandable
";

const DOUBLE: &str = "\
app double
partition_key five_tuple
stage a action insert_state alus 1
  table ta key five_tuple entry_bytes 8 capacity 4 expandable
stage b action insert_state alus 1
  table tb key five_tuple entry_bytes 8 capacity 4 expandable
";

fn xmy(sram: [u64; 3], store_at: Option<&str>) -> Topology {
    Topology::build(&TopologySpec {
        switches: vec![switch("X", sram[0]), switch("M", sram[1]), switch("Y", sram[2])],
        links: vec![link("X", "M", 1), link("M", "Y", 1)],
        remote_stores: store_at
            .map(|s| StoreSpec { id: "r".into(), attached_switch: s.into(), rtt_us: 10, capacity_bytes: 1024 })
            .into_iter()
            .collect(),
    })
    .unwrap()
}

fn traced(seed: u64, horizon: u64) -> SimConfig {
    SimConfig { trace: true, ..SimConfig::new(seed, horizon) }
}

fn lines_for(trace: &[String], pkt: u64) -> Vec<&str> {
    let tag = format!(" pkt={pkt} ");
    trace.iter().filter(|l| l.contains(&tag)).map(String::as_str).collect()
}

#[test]
fn tagged_packet_crosses_transit_switch() {
    let mut t = xmy([450, 100, 500], None);
    let (_, d) = deploy(TWO, &mut t);
    let hosts: Vec<_> = d.segments().map(|s| (s.host.as_str().to_string(), s.stage_lo)).collect();
    assert_eq!(hosts, vec![("X".to_string(), 0), ("Y".to_string(), 1)]);
    let out = Simulation::new(t, d, &steady(1, 1, 0), traced(1, 5_000)).finish();
    let p = &out.report.packets[0];
    let decision = p.verdict.decision().unwrap();
    assert_eq!(decision.verdict_kind, VerdictKind::Accept);
    let hops: Vec<_> = decision.serviced_by.iter().map(|h| (h.switch.as_str(), h.segment)).collect();
    assert_eq!(hops, vec![("X", 0), ("Y", 1)]);
    assert_eq!((p.encaps, p.stage_us, p.link_us), (1, 2, 2));

    let t0 = p.ingress_us;
    let lines = lines_for(&out.trace, 0);
    let expected = [
        format!("t={t0} ev=arrival pkt=0 sw=X exec seg=s0 stage=0"),
        format!("t={} ev=arrival pkt=0 sw=X forward to=M at={}", t0 + 1, t0 + 2),
        format!("t={} ev=arrival pkt=0 sw=M forward to=Y at={}", t0 + 2, t0 + 3),
        format!("t={} ev=arrival pkt=0 sw=Y exec seg=s1 stage=1", t0 + 3),
        format!("t={} ev=arrival pkt=0 sw=Y finish", t0 + 4),
    ];
    assert_eq!(lines, expected.iter().map(String::as_str).collect::<Vec<_>>());
    // The transit switch holds nothing and ran nothing.
    assert_eq!(out.topology.switch(&sid("M")).unwrap().usage, Default::default());
    assert!(out.report.snapshots.iter().flat_map(|s| &s.segments).all(|s| s.switch != sid("M")));
}

#[test]
fn decomposed_four_stage_encapsulates_at_the_cut() {
    let mut t = xmy([10_000, 100, 10_000], None);
    let (_, mut d) = deploy(FOUR_STAGE, &mut t);
    let seg = only_segment(&d);
    d.sequential_decompose(&mut t, seg, 2, &sid("Y"), 0).unwrap();
    let ranges: Vec<_> = d.segments().map(|s| (s.host.as_str().to_string(), s.stage_lo, s.stage_hi)).collect();
    assert_eq!(ranges, vec![("X".to_string(), 0, 2), ("Y".to_string(), 2, 4)]);
    let out = Simulation::new(t, d, &steady(1, 1, 1000), traced(1, 5_000)).finish();
    let lines = lines_for(&out.trace, 0);
    // The first packet waits for the decomposition to finish.
    assert!(lines[0].ends_with("sw=X buffer seg=s0"), "{lines:?}");
    assert!(lines[2].ends_with("sw=X exec seg=s0 stage=1"), "{lines:?}");
    assert!(lines[3].contains("sw=X forward to=M"), "{lines:?}");
    assert!(lines[5].ends_with("sw=Y exec seg=s1 stage=2"), "{lines:?}");
    assert_eq!(out.report.packets[0].encaps, 1);
}

#[test]
fn decomposition_preserves_verdicts() {
    let m = parse_app(L4LB).unwrap();
    let w = steady(200, 3, 50);
    let cfg = SimConfig::new(4, 20_000);
    let mut t = xmy([100_000, 100, 100_000], None);
    let (_, mut d) = deploy(L4LB, &mut t);
    let seg = only_segment(&d);
    d.sequential_decompose(&mut t, seg, 1, &sid("Y"), 0).unwrap();
    let ours = Simulation::new(t, d, &w, cfg.clone()).run();
    let oracle = run_oracle(&m, &w, cfg);
    let eq = check_equivalence(&ours, &oracle).unwrap();
    assert!(eq.passed(), "{eq}");
    assert!(eq.compared > 0);
}

fn bound(src: &str, store_at: &str) -> (Topology, Deployment) {
    let mut t = xmy([10_000, 10, 10], Some(store_at));
    let (_, mut d) = deploy(src, &mut t);
    let seg = only_segment(&d);
    let tables: Vec<String> = d.segment(seg).unwrap().tables.values().map(|t| t.name().to_string()).collect();
    for name in tables {
        let now = d.segment(seg).unwrap().paused_until_us.unwrap_or(0);
        d.vertical_scale_disaggregate(&mut t, seg, &name, &StoreId::from("r"), now).unwrap();
    }
    (t, d)
}

#[test]
fn remote_miss_defers_one_rtt() {
    let (t, d) = bound(TINY, "X");
    let out = Simulation::new(t, d, &delayed(steady(1, 1, 0), 2_000), traced(1, 10_000)).finish();
    let p = &out.report.packets[0];
    assert!(p.deferred);
    let t0 = p.ingress_us;
    assert!(lines_for(&out.trace, 0)[0].ends_with(&format!("defer seg=s0 reply={}", t0 + 10)));
    assert!(p.completion_us >= p.ingress_us + 11);
    assert_eq!(p.latency_us(), 11);
}

#[test]
fn spilled_key_keeps_paying_the_rtt() {
    let (t, d) = bound(TINY, "X");
    let w = delayed(steady(3, 2, 0), 2_000);
    let out = Simulation::new(t, d, &w, SimConfig::new(1, 10_000)).finish();
    let r = &out.report;
    assert_eq!(r.summary.delivered, 6);
    let third = flow(2);
    for p in &r.packets {
        let first = p.ingress_us < 2_500;
        let expect_defer = first || p.flow == third;
        assert_eq!(p.deferred, expect_defer, "packet {} of {}", p.seq, p.flow);
        assert_eq!(p.remote_us, if expect_defer { 10 } else { 0 });
    }
    let ts = out.deployment.segments().next().unwrap().tables.values().next().unwrap();
    assert_eq!((ts.used(), ts.remote_len()), (2, 1));
}

#[test]
fn two_remote_tables_cost_two_rtts() {
    let (t, d) = bound(DOUBLE, "X");
    let out = Simulation::new(t, d, &delayed(steady(1, 1, 0), 2_000), traced(1, 10_000)).finish();
    let p = &out.report.packets[0];
    // Sum the delays the simulator actually scheduled for this packet.
    let scheduled: u64 = lines_for(&out.trace, 0)
        .iter()
        .filter_map(|l| {
            let t: u64 = l.strip_prefix("t=")?.split(' ').next()?.parse().ok()?;
            let reply: u64 = l.rsplit_once("reply=")?.1.parse().ok()?;
            Some(reply - t)
        })
        .sum();
    assert_eq!(p.deferrals, 2);
    assert_eq!(scheduled, 20);
    assert_eq!(p.remote_us, scheduled);
    assert_eq!(p.latency_us(), 2 + 20);
}

#[test]
fn distant_store_adds_overlay_round_trip() {
    let (t, d) = bound(TINY, "Y");
    let out = Simulation::new(t, d, &delayed(steady(1, 1, 0), 2_000), SimConfig::new(1, 10_000)).finish();
    // Store behind two 1 µs links: 10 + 2 * 2.
    assert_eq!(out.report.packets[0].remote_us, 14);
}

#[test]
fn stage_context_starts_empty() {
    assert_eq!(StageContext::default().flow_id, None);
    let out = Simulation::new(
        xmy([1000, 1000, 1000], None),
        Deployment::default(),
        &steady(1, 1, 0),
        SimConfig::new(1, 1_000),
    )
    .finish();
    assert!(matches!(out.report.packets[0].verdict, Verdict::Dropped(_)));
}
