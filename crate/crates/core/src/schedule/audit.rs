//! Single-load check over a DRAM transaction log.

use std::collections::HashMap;

use serde::Serialize;

use super::timing::{Direction, DramTransaction};
use crate::config::DerivedDims;
use crate::functional::weights::{param_manifest, TensorInfo};

/// Parameters plus the input patch matrix: everything an inference may read.
pub fn load_manifest(d: &DerivedDims) -> Vec<TensorInfo> {
    let mut m = param_manifest(d);
    m.push(TensorInfo {
        name: "input".into(),
        shape: vec![d.num_patches, d.patch_dim],
    });
    m
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DuplicateLoad {
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub first_cycle: u64,
    pub again_cycle: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditVerdict {
    /// First offending element per tensor.
    pub duplicate_loads: Vec<DuplicateLoad>,
    /// Stores of anything but the final output.
    pub intermediate_stores: Vec<String>,
    /// Loads of tensors outside the manifest, or outside their bounds.
    pub unknown_tensors: Vec<String>,
    pub loaded_bytes: u64,
    pub expected_bytes: u64,
}

impl AuditVerdict {
    pub fn passed(&self) -> bool {
        self.duplicate_loads.is_empty()
            && self.intermediate_stores.is_empty()
            && self.unknown_tensors.is_empty()
            && self.loaded_bytes == self.expected_bytes
    }
}

struct Coverage {
    cols: usize,
    first: Vec<u64>,
}

const UNSEEN: u64 = u64::MAX;

/// Every manifest element must be read exactly once, and the only store
/// allowed is the final `output`.
pub fn audit_single_load(dram: &[DramTransaction], manifest: &[TensorInfo]) -> AuditVerdict {
    let mut cov: HashMap<&str, Coverage> = manifest
        .iter()
        .map(|t| {
            let (rows, cols) = match t.shape.as_slice() {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                other => (1, other.iter().product()),
            };
            (
                t.name.as_str(),
                Coverage {
                    cols,
                    first: vec![UNSEEN; rows * cols],
                },
            )
        })
        .collect();
    let mut v = AuditVerdict {
        expected_bytes: manifest.iter().map(|t| t.bytes()).sum(),
        ..Default::default()
    };
    for tx in dram {
        match tx.direction {
            Direction::Store => {
                if tx.tensor != "output" && !v.intermediate_stores.contains(&tx.tensor) {
                    v.intermediate_stores.push(tx.tensor.clone());
                }
            }
            Direction::Load => {
                v.loaded_bytes += tx.bytes;
                let Some(c) = cov.get_mut(tx.tensor.as_str()) else {
                    if !v.unknown_tensors.contains(&tx.tensor) {
                        v.unknown_tensors.push(tx.tensor.clone());
                    }
                    continue;
                };
                let b = tx.block;
                let rows = c.first.len() / c.cols.max(1);
                if b.row0 + b.rows > rows || b.col0 + b.cols > c.cols {
                    v.unknown_tensors.push(format!("{} {:?}", tx.tensor, b));
                    continue;
                }
                let mut reported = v.duplicate_loads.iter().any(|d| d.tensor == tx.tensor);
                for r in b.row0..b.row0 + b.rows {
                    for col in b.col0..b.col0 + b.cols {
                        let slot = &mut c.first[r * c.cols + col];
                        if *slot == UNSEEN {
                            *slot = tx.cycle;
                        } else if !reported {
                            v.duplicate_loads.push(DuplicateLoad {
                                tensor: tx.tensor.clone(),
                                row: r,
                                col,
                                first_cycle: *slot,
                                again_cycle: tx.cycle,
                            });
                            reported = true;
                        }
                    }
                }
            }
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{derive_dims, lookup_model, HardwareConfig};
    use crate::schedule::{run_inference_schedule, TraceOptions};

    #[test]
    fn real_trace_passes_and_injected_reload_fails() {
        let hw = HardwareConfig::default();
        let model = lookup_model("deit-t").unwrap();
        let d = derive_dims(&model, &hw).unwrap();
        let trace = run_inference_schedule(&model, &hw, TraceOptions::summary()).unwrap();
        let m = load_manifest(&d);
        let ok = audit_single_load(&trace.dram, &m);
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.loaded_bytes, ok.expected_bytes);

        let mut bad = trace.dram.clone();
        let again = bad
            .iter()
            .find(|t| t.tensor == "layers.3.mlp.hidden")
            .unwrap()
            .clone();
        bad.push(again);
        let v = audit_single_load(&bad, &m);
        assert!(!v.passed());
        assert_eq!(v.duplicate_loads.len(), 1);
        assert_eq!(v.duplicate_loads[0].tensor, "layers.3.mlp.hidden");
    }

    #[test]
    fn intermediate_store_and_missing_data_fail() {
        let hw = HardwareConfig::default();
        let model = lookup_model("deit-t").unwrap();
        let d = derive_dims(&model, &hw).unwrap();
        let trace = run_inference_schedule(&model, &hw, TraceOptions::summary()).unwrap();
        let m = load_manifest(&d);

        let mut spill = trace.dram.clone();
        let mut st = spill.iter().find(|t| t.direction == Direction::Store).unwrap().clone();
        st.tensor = "layers.0.context".into();
        spill.push(st);
        assert_eq!(audit_single_load(&spill, &m).intermediate_stores, vec!["layers.0.context"]);

        let short: Vec<_> = trace.dram.iter().filter(|t| t.tensor != "final_ln.beta").cloned().collect();
        let v = audit_single_load(&short, &m);
        assert!(!v.passed());
        assert_eq!(v.expected_bytes - v.loaded_bytes, 192);
    }
}
