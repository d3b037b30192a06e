//! End-to-end runs: workload generation, the parse → compile → deploy →
//! simulate pipeline, oracle comparison and metrics export.

mod equivalence;
mod export;
mod generate;

pub use equivalence::{check_equivalence, Divergence, Equivalence, EquivalenceError, MAX_LISTED};
pub use export::{export_metrics, load_report, ExportedFiles, AUDIT_LOG, REPORT_JSON, SUMMARY_CSV};
pub use generate::{generate_workload, ArrivalProfile, RandomFlows, RandomRules, WorkloadFile};

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appir::{compile_minimal, parse_app, AppManifest, CompileError, ParseError};
use crate::controller::{Policy, PrimitiveKind};
use crate::dataplane::{SimConfig, SimOutcome, SimReport, Simulation, Workload};
use crate::fabric::{load_topology, FabricError, ResourceVector, Topology};
use crate::primitives::{oracle_topology, Deployment, PrimitiveError};

/// Charged on every switch before deployment for overlay forwarding: one
/// stage and 64 entries of 8 bytes.
pub const BASE_RESERVATION: ResourceVector = ResourceVector {
    sram_bytes: 64 * 8,
    stages: 1,
    alu_slots_per_stage: 0,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Minimal deployment with the controller loop.
    #[default]
    Normal,
    /// Whole pipeline on one unbounded switch.
    Oracle,
    /// Minimal deployment, no controller.
    NoScaling,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Normal => "normal",
            Mode::Oracle => "oracle",
            Mode::NoScaling => "no_scaling",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "normal" => Ok(Mode::Normal),
            "oracle" => Ok(Mode::Oracle),
            "no_scaling" => Ok(Mode::NoScaling),
            _ => Err(format!("unknown mode `{s}` (expected normal, oracle or no_scaling)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("app: {0}")]
    App(#[from] ParseError),
    #[error("topology: {0}")]
    Topology(#[from] FabricError),
    #[error("{0}")]
    Workload(String),
    #[error("{0}")]
    Policy(String),
    #[error("compile: {0}")]
    Compile(#[from] CompileError),
    #[error("deploy: {0}")]
    Deploy(#[from] PrimitiveError),
}

/// Everything needed to reproduce one run. Inputs are held as source text.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub app: String,
    pub topology: String,
    pub workload: String,
    /// Defaults apply when absent.
    pub policy: Option<String>,
    pub seed: u64,
    pub horizon_us: u64,
    pub mode: Mode,
    /// Restricts the policy's enabled primitives when set.
    pub primitives: Option<BTreeSet<PrimitiveKind>>,
    pub trace: bool,
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })
}

impl Scenario {
    pub fn from_files(
        app: &Path,
        topology: &Path,
        workload: &Path,
        policy: Option<&Path>,
        seed: u64,
        horizon_us: u64,
    ) -> Result<Scenario, ScenarioError> {
        Ok(Scenario {
            app: read(app)?,
            topology: read(topology)?,
            workload: read(workload)?,
            policy: policy.map(read).transpose()?,
            seed,
            horizon_us,
            mode: Mode::Normal,
            primitives: None,
            trace: false,
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_primitives(mut self, primitives: impl IntoIterator<Item = PrimitiveKind>) -> Self {
        self.primitives = Some(primitives.into_iter().collect());
        self
    }

    pub fn manifest(&self) -> Result<AppManifest, ScenarioError> {
        Ok(parse_app(&self.app)?)
    }

    pub fn load_workload(&self) -> Result<Workload, ScenarioError> {
        let spec = WorkloadFile::from_json(&self.workload).map_err(ScenarioError::Workload)?;
        generate_workload(&spec, self.seed).map_err(|e| ScenarioError::Workload(format!("workload: {e}")))
    }

    pub fn load_policy(&self) -> Result<Policy, ScenarioError> {
        let mut policy = match &self.policy {
            Some(text) => Policy::from_json(text).map_err(ScenarioError::Policy)?,
            None => Policy::default(),
        };
        if let Some(p) = &self.primitives {
            policy.enabled_primitives = p.clone();
        }
        Ok(policy)
    }

    /// Topology with the base reservation charged and the app deployed in
    /// its minimal design.
    pub fn deploy(&self, manifest: &AppManifest) -> Result<(Topology, Deployment), ScenarioError> {
        let mut topology = load_topology(&self.topology)?;
        let ids: Vec<_> = topology.switch_ids().cloned().collect();
        for id in &ids {
            topology.allocate(id, BASE_RESERVATION)?;
        }
        let target = ids.iter().map(|id| topology.headroom(id)).collect::<Result<Vec<_>, _>>()?;
        let design = compile_minimal(manifest, &target)?;
        let mut deployment = Deployment::default();
        deployment.deploy_minimal(&mut topology, manifest, &design)?;
        Ok((topology, deployment))
    }
}

/// Runs `scenario` and keeps the final fabric state and trace.
pub fn run_scenario_outcome(scenario: &Scenario) -> Result<SimOutcome, ScenarioError> {
    let manifest = scenario.manifest()?;
    let workload = scenario.load_workload()?;
    let policy = scenario.load_policy()?;
    let mut cfg = SimConfig::new(scenario.seed, scenario.horizon_us);
    cfg.trace = scenario.trace;
    cfg.epoch_us = policy.epoch_us;
    let (topology, deployment) = match scenario.mode {
        Mode::Oracle => (oracle_topology(), Deployment::oracle(&manifest)),
        Mode::Normal => {
            cfg = cfg.with_policy(policy);
            scenario.deploy(&manifest)?
        }
        Mode::NoScaling => scenario.deploy(&manifest)?,
    };
    Ok(Simulation::new(topology, deployment, &workload, cfg).finish())
}

/// Parses, compiles, deploys and simulates `scenario`.
pub fn run_scenario(scenario: &Scenario) -> Result<SimReport, ScenarioError> {
    run_scenario_outcome(scenario).map(|o| o.report)
}

/// Apps, topologies, workloads and a policy shipped with the crate.
pub mod bundled {
    use super::{Mode, Scenario};

    pub const L4LB_APP: &str = include_str!("../../assets/l4lb.iapp");
    pub const ACL_APP: &str = include_str!("../../assets/acl.iapp");
    pub const NAT_APP: &str = include_str!("../../assets/nat.iapp");
    pub const POLICY: &str = include_str!("../../assets/policy.json");

    pub const RING8: &str = include_str!("../../assets/topologies/ring8.json");
    pub const LINE5: &str = include_str!("../../assets/topologies/line5.json");
    pub const LINE4_ACL: &str = include_str!("../../assets/topologies/line4_acl.json");
    pub const LINE3_STORE: &str = include_str!("../../assets/topologies/line3_store.json");

    pub const L4LB_RAMP: &str = include_str!("../../assets/workloads/l4lb_ramp.json");
    pub const L4LB_MIXED: &str = include_str!("../../assets/workloads/l4lb_mixed.json");
    pub const ACL_RULES: &str = include_str!("../../assets/workloads/acl_rules.json");
    pub const NAT_SPILL: &str = include_str!("../../assets/workloads/nat_spill.json");

    fn scenario(app: &str, topology: &str, workload: &str, seed: u64, horizon_us: u64) -> Scenario {
        Scenario {
            app: app.into(),
            topology: topology.into(),
            workload: workload.into(),
            policy: Some(POLICY.into()),
            seed,
            horizon_us,
            mode: Mode::Normal,
            primitives: None,
            trace: false,
        }
    }

    /// Connection load ramping to four times one switch's conn_table.
    pub fn l4lb_ramp() -> Scenario {
        scenario(L4LB_APP, RING8, L4LB_RAMP, 7, 250_000)
    }

    /// 2,000 short flows over two VIPs on a five-switch line.
    pub fn l4lb_mixed() -> Scenario {
        scenario(L4LB_APP, LINE5, L4LB_MIXED, 11, 60_000)
    }

    /// 500 wildcard rules into a 400-entry ACL.
    pub fn acl_exhaustion() -> Scenario {
        scenario(ACL_APP, LINE4_ACL, ACL_RULES, 3, 20_000)
    }

    /// More NAT flows than one switch holds, with a remote store nearby.
    pub fn nat_spill() -> Scenario {
        scenario(NAT_APP, LINE3_STORE, NAT_SPILL, 5, 40_000)
    }

    pub fn all() -> Vec<(&'static str, Scenario)> {
        vec![
            ("l4lb_ramp", l4lb_ramp()),
            ("l4lb_mixed", l4lb_mixed()),
            ("acl_exhaustion", acl_exhaustion()),
            ("nat_spill", nat_spill()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_inputs_parse() {
        for (name, s) in bundled::all() {
            let m = s.manifest().unwrap_or_else(|e| panic!("{name}: {e}"));
            s.load_workload().unwrap_or_else(|e| panic!("{name}: {e}"));
            s.load_policy().unwrap_or_else(|e| panic!("{name}: {e}"));
            let (t, d) = s.deploy(&m).unwrap_or_else(|e| panic!("{name}: {e}"));
            d.validate(&t).unwrap();
            t.check_conservation().unwrap();
        }
    }

    #[test]
    fn base_reservation_is_charged() {
        let s = bundled::acl_exhaustion();
        let (t, _) = s.deploy(&s.manifest().unwrap()).unwrap();
        let hosts = t.switches().iter().filter(|n| n.usage != BASE_RESERVATION).count();
        assert_eq!(hosts, 1);
        assert!(t.switches().iter().all(|n| BASE_RESERVATION.fits_within(&n.usage)));
    }

    #[test]
    fn errors_carry_their_stage() {
        let mut s = bundled::acl_exhaustion();
        s.app = "app broken\nstage x action nope".into();
        assert!(run_scenario(&s).unwrap_err().to_string().starts_with("app:"));
        let mut s = bundled::acl_exhaustion();
        s.workload = "{".into();
        assert!(run_scenario(&s).unwrap_err().to_string().starts_with("workload:"));
        let mut s = bundled::acl_exhaustion();
        s.policy = Some(r#"{"occupancy_threshold": 2.0}"#.into());
        assert!(run_scenario(&s).unwrap_err().to_string().starts_with("policy:"));
    }

    #[test]
    fn modes_round_trip() {
        for m in [Mode::Normal, Mode::Oracle, Mode::NoScaling] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("fast".parse::<Mode>().is_err());
    }
}
