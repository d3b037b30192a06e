use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AppManifest, StageDef};
use crate::fabric::{Dimension, ResourceVector};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("stage {stage} fits no switch in the target model (binding dimension: {dimension})")]
    UnmappableStage { stage: String, dimension: Dimension },
    #[error("target model is empty")]
    EmptyTarget,
}

/// The smallest deployable unit of an application.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalDesign {
    pub app_name: String,
    pub per_stage_footprint: Vec<ResourceVector>,
    pub total_footprint: ResourceVector,
    /// Legal stage boundaries, `1..len`.
    pub cut_points: Vec<usize>,
}

impl MinimalDesign {
    /// Component-wise sum of the footprints of stages `range`.
    pub fn range_footprint(&self, range: std::ops::Range<usize>) -> ResourceVector {
        self.per_stage_footprint[range].iter().copied().sum()
    }
}

/// Occupancy-bit overhead of an expandable table: one bit per entry.
fn used_bit_bytes(capacity: u64) -> u64 {
    capacity.div_ceil(8)
}

/// Resources needed by `stage` at its tables' initial capacity.
pub fn footprint(stage: &StageDef) -> ResourceVector {
    footprint_with_capacity(stage, |t| t.initial_capacity)
}

/// Resources needed by `stage` when each table holds `capacity(table)` entries.
pub fn footprint_with_capacity(
    stage: &StageDef,
    capacity: impl Fn(&super::TableDef) -> u64,
) -> ResourceVector {
    let sram = stage
        .tables
        .iter()
        .map(|t| {
            let cap = capacity(t);
            let bits = if t.expandable { used_bit_bytes(cap) } else { 0 };
            t.entry_bytes * cap + bits
        })
        .sum();
    ResourceVector::new(sram, 1, stage.alu_cost)
}

/// Compile `manifest` against a target model given as switch capacities.
pub fn compile_minimal(
    manifest: &AppManifest,
    target: &[ResourceVector],
) -> Result<MinimalDesign, CompileError> {
    if target.is_empty() {
        return Err(CompileError::EmptyTarget);
    }
    let envelope = target.iter().fold(ResourceVector::ZERO, |acc, c| ResourceVector {
        sram_bytes: acc.sram_bytes.max(c.sram_bytes),
        stages: acc.stages.max(c.stages),
        alu_slots_per_stage: acc.alu_slots_per_stage.max(c.alu_slots_per_stage),
    });
    let per_stage_footprint: Vec<ResourceVector> = manifest.stages.iter().map(footprint).collect();
    for (stage, fp) in manifest.stages.iter().zip(&per_stage_footprint) {
        if !target.iter().any(|cap| fp.fits_within(cap)) {
            // Prefer a dimension no switch can satisfy; otherwise report what
            // blocks the first switch.
            let dimension = fp
                .binding_dimension(&envelope)
                .or_else(|| fp.binding_dimension(&target[0]))
                .expect("unfit stage has a binding dimension");
            return Err(CompileError::UnmappableStage {
                stage: stage.name.clone(),
                dimension,
            });
        }
    }
    Ok(MinimalDesign {
        app_name: manifest.app_name.clone(),
        total_footprint: per_stage_footprint.iter().copied().sum(),
        cut_points: (1..manifest.stages.len()).collect(),
        per_stage_footprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appir::{parse_app, ActionKind, KeyKind, MatchKind, TableDef};
    use proptest::prelude::*;

    fn stage(tables: Vec<TableDef>, alu_cost: u64) -> StageDef {
        StageDef {
            name: "classify".into(),
            tables,
            alu_cost,
            action_kind: ActionKind::InsertState,
        }
    }

    fn table(cap: u64, bytes: u64, expandable: bool) -> TableDef {
        TableDef {
            name: "t".into(),
            key_kind: KeyKind::FiveTuple,
            entry_bytes: bytes,
            initial_capacity: cap,
            expandable,
            match_kind: MatchKind::Exact,
        }
    }

    #[test]
    fn footprint_examples() {
        assert_eq!(footprint(&stage(vec![table(128, 32, true)], 4)), ResourceVector::new(4112, 1, 4));
        assert_eq!(footprint(&stage(vec![], 2)), ResourceVector::new(0, 1, 2));
        assert_eq!(footprint(&stage(vec![table(1000, 16, false)], 3)), ResourceVector::new(16000, 1, 3));
        // 1..8 entries still cost a whole byte of used bits.
        assert_eq!(footprint(&stage(vec![table(1, 1, true)], 0)).sram_bytes, 2);
    }

    const L4LB: &str = include_str!("../../assets/l4lb.iapp");

    #[test]
    fn l4lb_compiles_to_two_stage_design() {
        let m = parse_app(L4LB).unwrap();
        let d = compile_minimal(&m, &[ResourceVector::new(1_000_000, 8, 8)]).unwrap();
        assert_eq!(d.per_stage_footprint.len(), 2);
        assert_eq!(d.cut_points, vec![1]);
        assert_eq!(d.total_footprint, d.per_stage_footprint[0] + d.per_stage_footprint[1]);
    }

    #[test]
    fn oversized_stage_is_unmappable() {
        let m = parse_app(L4LB).unwrap();
        let err = compile_minimal(&m, &[ResourceVector::new(4000, 8, 8); 3]).unwrap_err();
        assert_eq!(
            err,
            CompileError::UnmappableStage { stage: "classify".into(), dimension: Dimension::Sram }
        );
        assert_eq!(compile_minimal(&m, &[]), Err(CompileError::EmptyTarget));
    }

    #[test]
    fn four_stage_cut_points() {
        let m = parse_app(
            "app p\nstage a action forward\nstage b action forward\nstage c action forward\nstage d action forward\n",
        )
        .unwrap();
        let d = compile_minimal(&m, &[ResourceVector::new(10, 4, 1)]).unwrap();
        assert_eq!(d.cut_points, vec![1, 2, 3]);
    }

    proptest! {
        #[test]
        fn footprint_is_additive(
            specs in prop::collection::vec((1u64..4096, 1u64..64, any::<bool>(), 0u64..8, any::<bool>()), 1..8)
        ) {
            let stages: Vec<StageDef> = specs
                .iter()
                .map(|&(cap, bytes, exp, alus, has)| {
                    stage(if has { vec![table(cap, bytes, exp)] } else { vec![] }, alus)
                })
                .collect();
            let summed: ResourceVector = stages.iter().map(footprint).sum();
            let direct_sram: u64 = specs
                .iter()
                .filter(|s| s.4)
                .map(|&(cap, bytes, exp, _, _)| cap * bytes + if exp { cap.div_ceil(8) } else { 0 })
                .sum();
            prop_assert_eq!(summed.sram_bytes, direct_sram);
            prop_assert_eq!(summed.stages, stages.len() as u64);
            prop_assert_eq!(summed.alu_slots_per_stage, specs.iter().map(|s| s.3).sum::<u64>());
        }
    }
}
