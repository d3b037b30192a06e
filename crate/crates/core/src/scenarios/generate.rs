use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataplane::{ControlOp, FlowKey, FlowSpec, MatchSpec, RuleAction, RuleSpec, Workload};

fn default_src() -> String {
    "10.0.0.0/8".into()
}

fn default_dst() -> Vec<String> {
    vec!["192.168.0.1".into()]
}

fn default_ports() -> Vec<u16> {
    vec![80]
}

fn default_size() -> u64 {
    64
}

fn default_proto() -> u8 {
    6
}

/// How flow start times spread over `spread_us`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProfile {
    /// Independent uniform start times.
    #[default]
    Uniform,
    /// Arrival rate rising linearly from zero: flow i starts at
    /// `spread_us * sqrt(i / count)`.
    Ramp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFlows {
    pub count: u32,
    #[serde(default)]
    pub start_us: u64,
    #[serde(default)]
    pub spread_us: u64,
    #[serde(default)]
    pub profile: ArrivalProfile,
    pub duration_us: u64,
    pub pps: u64,
    #[serde(default = "default_size")]
    pub size_bytes: u64,
    /// Source addresses are drawn from this prefix.
    #[serde(default = "default_src")]
    pub src: String,
    /// Destinations, each an address or prefix; one is picked per flow.
    #[serde(default = "default_dst")]
    pub dst: Vec<String>,
    #[serde(default = "default_ports")]
    pub dst_ports: Vec<u16>,
    #[serde(default = "default_proto")]
    pub proto: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
}

fn default_prefix_min() -> u32 {
    16
}

fn default_prefix_max() -> u32 {
    24
}

fn default_deny() -> f64 {
    0.5
}

/// Random ternary rules on source prefixes, with distinct priorities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomRules {
    pub count: u32,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
    #[serde(default)]
    pub at_us: u64,
    /// Gap between consecutive insertions.
    #[serde(default)]
    pub spacing_us: u64,
    #[serde(default = "default_src")]
    pub src: String,
    #[serde(default = "default_prefix_min")]
    pub prefix_min: u32,
    #[serde(default = "default_prefix_max")]
    pub prefix_max: u32,
    /// When set, each rule also matches one of these destination ports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ports: Option<Vec<u16>>,
    #[serde(default = "default_deny")]
    pub deny_fraction: f64,
}

/// Workload file: explicit flows and control operations plus generators.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadFile {
    #[serde(default)]
    pub flows: Vec<FlowSpec>,
    #[serde(default)]
    pub random_flows: Vec<RandomFlows>,
    #[serde(default)]
    pub control: Vec<ControlOp>,
    #[serde(default)]
    pub random_rules: Vec<RandomRules>,
}

impl WorkloadFile {
    pub fn from_json(text: &str) -> Result<WorkloadFile, String> {
        serde_json::from_str(text).map_err(|e| format!("workload: {e}"))
    }
}

fn prefix(cidr: &str) -> Result<(u32, u32), String> {
    let (addr, len) = match cidr.split_once('/') {
        Some((a, l)) => (a, l.parse::<u32>().map_err(|_| format!("bad prefix length in `{cidr}`"))?),
        None => (cidr, 32),
    };
    if len > 32 {
        return Err(format!("prefix length {len} exceeds 32 in `{cidr}`"));
    }
    let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad IPv4 address in `{cidr}`"))?;
    let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
    Ok((u32::from(addr) & mask, len))
}

fn address_in(rng: &mut ChaCha8Rng, (base, len): (u32, u32)) -> Ipv4Addr {
    let host_bits = if len == 0 { u32::MAX } else { !(u32::MAX << (32 - len)) };
    Ipv4Addr::from(base | (rng.gen::<u32>() & host_bits))
}

/// Sub-generator seed so adding a generator leaves earlier ones unchanged.
fn sub_rng(seed: u64, tag: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag << 32 | index as u64);
    rng
}

fn expand_flows(g: &RandomFlows, mut rng: ChaCha8Rng) -> Result<Vec<FlowSpec>, String> {
    if g.dst.is_empty() || g.dst_ports.is_empty() {
        return Err("random_flows: dst and dst_ports must be non-empty".into());
    }
    let src = prefix(&g.src)?;
    let dsts = g.dst.iter().map(|d| prefix(d)).collect::<Result<Vec<_>, _>>()?;
    let n = g.count as u64;
    let mut starts: Vec<u64> = (0..n)
        .map(|i| match g.profile {
            ArrivalProfile::Uniform if g.spread_us == 0 => 0,
            ArrivalProfile::Uniform => rng.gen_range(0..g.spread_us),
            ArrivalProfile::Ramp => (g.spread_us as f64 * (i as f64 / n as f64).sqrt()).floor() as u64,
        })
        .collect();
    starts.sort_unstable();
    let flows = starts
        .into_iter()
        .map(|offset| {
            let dst = *dsts.choose(&mut rng).unwrap();
            FlowSpec {
                start_us: g.start_us + offset,
                duration_us: g.duration_us,
                pps: g.pps,
                size_bytes: g.size_bytes,
                flow: FlowKey::new(
                    address_in(&mut rng, src),
                    address_in(&mut rng, dst),
                    rng.gen_range(1024..=u16::MAX),
                    *g.dst_ports.choose(&mut rng).unwrap(),
                    g.proto,
                ),
                app: g.app.clone(),
            }
        })
        .collect();
    Ok(flows)
}

fn expand_rules(g: &RandomRules, mut rng: ChaCha8Rng) -> Result<Vec<ControlOp>, String> {
    let (base, len) = prefix(&g.src)?;
    if g.prefix_min > g.prefix_max || g.prefix_max > 32 || g.prefix_min < len {
        return Err(format!(
            "random_rules: need {len} <= prefix_min <= prefix_max <= 32, got {}..{}",
            g.prefix_min, g.prefix_max
        ));
    }
    if !(0.0..=1.0).contains(&g.deny_fraction) {
        return Err("random_rules: deny_fraction must be within [0, 1]".into());
    }
    Ok((0..g.count)
        .map(|i| {
            let plen = rng.gen_range(g.prefix_min..=g.prefix_max);
            let addr = address_in(&mut rng, (base, len));
            let dst_port = g.dst_ports.as_ref().and_then(|p| p.choose(&mut rng).copied());
            let action = if rng.gen_bool(g.deny_fraction) { RuleAction::Deny } else { RuleAction::Permit };
            ControlOp {
                at_us: g.at_us + i as u64 * g.spacing_us,
                app: g.app.clone(),
                table: g.table.clone(),
                rule: RuleSpec {
                    match_spec: MatchSpec {
                        src_ip: Some(format!("{addr}/{plen}")),
                        dst_port,
                        ..MatchSpec::default()
                    },
                    action,
                    priority: i + 1,
                },
            }
        })
        .collect())
}

/// Expands generators into a concrete workload. Explicit entries come first,
/// generated ones follow in file order.
pub fn generate_workload(spec: &WorkloadFile, seed: u64) -> Result<Workload, String> {
    let mut w = Workload {
        flows: spec.flows.clone(),
        control: spec.control.clone(),
    };
    for (i, g) in spec.random_flows.iter().enumerate() {
        w.flows.extend(expand_flows(g, sub_rng(seed, 1, i))?);
    }
    for (i, g) in spec.random_rules.iter().enumerate() {
        w.control.extend(expand_rules(g, sub_rng(seed, 2, i))?);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flows(count: u32, profile: ArrivalProfile) -> WorkloadFile {
        WorkloadFile {
            random_flows: vec![RandomFlows {
                count,
                start_us: 0,
                spread_us: 1_000_000,
                profile,
                duration_us: 1000,
                pps: 100,
                size_bytes: 64,
                src: default_src(),
                dst: default_dst(),
                dst_ports: default_ports(),
                proto: 6,
                app: None,
            }],
            ..WorkloadFile::default()
        }
    }

    #[test]
    fn zero_count_is_empty() {
        assert!(generate_workload(&flows(0, ArrivalProfile::Uniform), 1).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_flows() {
        let f = flows(50, ArrivalProfile::Uniform);
        assert_eq!(generate_workload(&f, 3).unwrap(), generate_workload(&f, 3).unwrap());
        assert_ne!(generate_workload(&f, 3).unwrap(), generate_workload(&f, 4).unwrap());
    }

    #[test]
    fn ramp_accelerates() {
        let w = generate_workload(&flows(1000, ArrivalProfile::Ramp), 1).unwrap();
        assert_eq!(w.flows.len(), 1000);
        assert!(w.flows.windows(2).all(|p| p[0].start_us <= p[1].start_us));
        let first_half = w.flows.iter().filter(|f| f.start_us < 500_000).count();
        // sqrt(1/4) of the count lands in the first half of the window.
        assert_eq!(first_half, 250);
    }

    #[test]
    fn rules_stay_inside_prefix() {
        let spec = WorkloadFile {
            random_rules: vec![RandomRules {
                count: 100,
                table: "acl_rules".into(),
                app: None,
                at_us: 10,
                spacing_us: 2,
                src: "10.0.0.0/16".into(),
                prefix_min: 20,
                prefix_max: 28,
                dst_ports: None,
                deny_fraction: 0.5,
            }],
            ..WorkloadFile::default()
        };
        let w = generate_workload(&spec, 9).unwrap();
        assert_eq!(w.control.len(), 100);
        for (i, op) in w.control.iter().enumerate() {
            assert_eq!(op.at_us, 10 + 2 * i as u64);
            assert_eq!(op.rule.priority, i as u32 + 1);
            let (addr, len) = prefix(op.rule.match_spec.src_ip.as_ref().unwrap()).unwrap();
            assert!((20..=28).contains(&len));
            assert_eq!(addr >> 16, 0x0a00);
        }
        let denies = w.control.iter().filter(|o| o.rule.action == RuleAction::Deny).count();
        assert!((30..=70).contains(&denies));
    }

    #[test]
    fn parses_file_shape() {
        let f = WorkloadFile::from_json(
            r#"{"random_flows":[{"count":3,"duration_us":10,"pps":1,"profile":"ramp","spread_us":100}],
                "control":[{"at_us":0,"table":"backend_map","rule":{"match":{"dst_ip":"192.168.0.1"},"action":{"pool":[1,2,3]}}}]}"#,
        )
        .unwrap();
        let w = generate_workload(&f, 0).unwrap();
        assert_eq!((w.flows.len(), w.control.len()), (3, 1));
        assert!(WorkloadFile::from_json(r#"{"flowz":[]}"#).is_err());
    }
}
