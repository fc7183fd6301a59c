//! Mode-by-mode schedule of one inference on a single processing element.
//!
//! [`program`] lowers an inference into a flat list of [`Step`]s. The timing
//! engine in [`timing`] turns steps into cycle-stamped events, buffer
//! occupancy and a DRAM transaction log; [`replay`] executes the same steps on
//! real data so the schedule can be checked against the functional model.

pub mod audit;
pub mod program;
pub mod replay;
pub mod timing;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{DerivedDims, HardwareConfig};

pub use audit::{audit_single_load, load_manifest, AuditVerdict, DuplicateLoad};
pub use program::{inference_program, Block, MatOp, Program, Qkv, Stage, Step};
pub use replay::replay_numeric;
pub use timing::{
    run_inference_schedule, run_program, schedule_lp, schedule_mlp, schedule_msa, CycleReport, DramTransaction,
    Direction, EventKind, ScheduleEvent, ScheduleTrace, TraceOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BufferKind {
    Weight,
    Feature,
    Layer,
    Q,
    K,
    V,
    Result,
    S1,
    S2,
}

impl BufferKind {
    pub const ALL: [BufferKind; 9] = [
        BufferKind::Weight,
        BufferKind::Feature,
        BufferKind::Layer,
        BufferKind::Q,
        BufferKind::K,
        BufferKind::V,
        BufferKind::Result,
        BufferKind::S1,
        BufferKind::S2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BufferKind::Weight => "Weight",
            BufferKind::Feature => "Feature",
            BufferKind::Layer => "Layer",
            BufferKind::Q => "Q",
            BufferKind::K => "K",
            BufferKind::V => "V",
            BufferKind::Result => "Result",
            BufferKind::S1 => "S1",
            BufferKind::S2 => "S2",
        }
    }

    pub fn storage(self) -> StorageClass {
        match self {
            BufferKind::Weight | BufferKind::Feature | BufferKind::Layer => StorageClass::BlockRam,
            _ => StorageClass::LutRam,
        }
    }
}

impl fmt::Display for BufferKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageClass {
    BlockRam,
    LutRam,
}

/// Smallest group of BRAM banks a buffer is built from; the packed array
/// reads 32 lanes wide even when `p_sys` is smaller.
pub const BRAM_MIN_BANK_GROUP: u64 = 32;

/// BRAM36 banks for a buffer of `entries` one-byte entries.
pub fn bram_banks(entries: u64, hw: &HardwareConfig) -> u64 {
    let group = (hw.p_sys as u64).max(BRAM_MIN_BANK_GROUP);
    entries.div_ceil(hw.bram_bank_depth).div_ceil(group) * group
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferSpec {
    pub kind: BufferKind,
    /// Nominal size in entries.
    pub capacity: u64,
    /// Entries the implementation actually provides (whole BRAM banks).
    pub physical: u64,
    pub storage: StorageClass,
}

pub fn buffer_specs(d: &DerivedDims, hw: &HardwareConfig) -> Vec<BufferSpec> {
    let (p, t, dm, dh) = (d.p_sys as u64, d.tokens as u64, d.model_dim as u64, d.head_dim as u64);
    // K, V and score rows must hold every token even when T exceeds D
    let wide = dm.max(t);
    BufferKind::ALL
        .iter()
        .map(|&kind| {
            let capacity = match kind {
                BufferKind::Weight => dm * dm,
                BufferKind::Feature | BufferKind::Layer => t * dm,
                BufferKind::Q => p * dh,
                BufferKind::K | BufferKind::V => wide * dh,
                BufferKind::Result => p * 2 * p,
                BufferKind::S1 | BufferKind::S2 => p * wide,
            };
            let storage = kind.storage();
            let physical = match storage {
                StorageClass::BlockRam => bram_banks(capacity, hw) * hw.bram_bank_depth,
                StorageClass::LutRam => capacity,
            };
            BufferSpec {
                kind,
                capacity,
                physical,
                storage,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    Embedding,
    Lp,
    Msa,
    Mlp,
    FinalLn,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Embedding => "embedding",
            Mode::Lp => "LP",
            Mode::Msa => "MSA",
            Mode::Mlp => "MLP",
            Mode::FinalLn => "final_ln",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
