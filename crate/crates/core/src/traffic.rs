//! Off-chip traffic of one inference, single-load versus a baseline that
//! keeps nothing on chip between multiplies.
//!
//! Both reports are normalized to the single-load mode latencies, so every
//! bandwidth ratio reduces to a byte ratio.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::{derive_dims, DerivedDims, HardwareConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::schedule::{
    audit_single_load, load_manifest, Block, CycleReport, Direction, DramTransaction, Mode, ScheduleTrace,
};

/// Modes traffic is reported under. Embedding counts as LP; the final
/// LayerNorm and output store count as MLP.
pub const REPORT_MODES: [Mode; 3] = [Mode::Lp, Mode::Msa, Mode::Mlp];

pub fn report_mode(m: Mode) -> Mode {
    match m {
        Mode::Embedding => Mode::Lp,
        Mode::FinalLn => Mode::Mlp,
        other => other,
    }
}

fn report_cycles(c: &CycleReport, m: Mode) -> u64 {
    match m {
        Mode::Lp => c.mode_cycles(Mode::Embedding) + c.mode_cycles(Mode::Lp),
        Mode::Mlp => c.mode_cycles(Mode::Mlp) + c.mode_cycles(Mode::FinalLn),
        other => c.mode_cycles(other),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTraffic {
    pub mode: Mode,
    pub loaded_bytes: u64,
    pub stored_bytes: u64,
    pub cycles: u64,
    /// Bytes per second over the mode's latency.
    pub bandwidth: f64,
}

impl ModeTraffic {
    pub fn total_bytes(&self) -> u64 {
        self.loaded_bytes + self.stored_bytes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub policy: String,
    pub model: String,
    pub p_sys: usize,
    pub clock_hz: f64,
    pub modes: Vec<ModeTraffic>,
    pub loaded_bytes: u64,
    pub stored_bytes: u64,
    pub total_bytes: u64,
    pub latency_s: f64,
    pub average_bandwidth: f64,
    pub peak_bandwidth: f64,
    pub peak_mode: Mode,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    policy: &'a str,
    model: &'a str,
    p_sys: usize,
    mode: &'a str,
    bytes_loaded: u64,
    bytes_stored: u64,
    bytes_total: u64,
    cycles: u64,
    latency_s: f64,
    bandwidth_bytes_per_s: f64,
}

impl TrafficReport {
    fn build(policy: &str, model: &str, cycles: &CycleReport, per_mode: [(u64, u64); 3]) -> Self {
        let clock = cycles.clock_hz;
        let modes: Vec<ModeTraffic> = REPORT_MODES
            .iter()
            .zip(per_mode)
            .map(|(&mode, (loaded, stored))| {
                let cyc = report_cycles(cycles, mode);
                ModeTraffic {
                    mode,
                    loaded_bytes: loaded,
                    stored_bytes: stored,
                    cycles: cyc,
                    bandwidth: if cyc == 0 {
                        0.0
                    } else {
                        (loaded + stored) as f64 * clock / cyc as f64
                    },
                }
            })
            .collect();
        let loaded_bytes = modes.iter().map(|m| m.loaded_bytes).sum();
        let stored_bytes = modes.iter().map(|m| m.stored_bytes).sum();
        let total_bytes = loaded_bytes + stored_bytes;
        let peak = modes
            .iter()
            .max_by(|a, b| a.bandwidth.total_cmp(&b.bandwidth))
            .expect("three modes");
        TrafficReport {
            policy: policy.to_string(),
            model: model.to_string(),
            p_sys: cycles.p_sys,
            clock_hz: clock,
            loaded_bytes,
            stored_bytes,
            total_bytes,
            latency_s: cycles.latency_s,
            average_bandwidth: total_bytes as f64 / cycles.latency_s,
            peak_bandwidth: peak.bandwidth,
            peak_mode: peak.mode,
            modes,
        }
    }

    pub fn mode(&self, m: Mode) -> &ModeTraffic {
        let m = report_mode(m);
        self.modes.iter().find(|t| t.mode == m).expect("every report mode present")
    }

    /// One row per mode.
    pub fn write_csv<W: Write>(&self, out: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
        for m in &self.modes {
            w.serialize(CsvRow {
                policy: &self.policy,
                model: &self.model,
                p_sys: self.p_sys,
                mode: m.mode.name(),
                bytes_loaded: m.loaded_bytes,
                bytes_stored: m.stored_bytes,
                bytes_total: m.total_bytes(),
                cycles: m.cycles,
                latency_s: m.cycles as f64 / self.clock_hz,
                bandwidth_bytes_per_s: m.bandwidth,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn tally(log: &[DramTransaction]) -> [(u64, u64); 3] {
    let mut out = [(0, 0); 3];
    for t in log {
        let m = report_mode(t.mode);
        let i = REPORT_MODES.iter().position(|&r| r == m).expect("report mode");
        match t.direction {
            Direction::Load => out[i].0 += t.bytes,
            Direction::Store => out[i].1 += t.bytes,
        }
    }
    out
}

/// Traffic of a single-load schedule, taken from its DRAM log after the log
/// passes the single-load audit.
pub fn single_load_traffic(model: &ModelConfig, hw: &HardwareConfig, trace: &ScheduleTrace) -> Result<TrafficReport> {
    let d = derive_dims(model, hw)?;
    let verdict = audit_single_load(&trace.dram, &load_manifest(&d));
    if !verdict.passed() {
        return Err(Error::AuditFailed(format!(
            "{} duplicate loads, {} intermediate stores, {} of {} bytes loaded",
            verdict.duplicate_loads.len(),
            verdict.intermediate_stores.len(),
            verdict.loaded_bytes,
            verdict.expected_bytes
        )));
    }
    Ok(TrafficReport::build("single-load", &model.name, &trace.report, tally(&trace.dram)))
}

/// Extent of a baseline block along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockDim {
    /// A multiple of the array size.
    Sys(usize),
    /// The whole axis.
    Full,
}

impl BlockDim {
    fn resolve(self, p: usize, len: usize) -> usize {
        match self {
            BlockDim::Sys(k) => (k * p).min(len),
            BlockDim::Full => len,
        }
    }
}

/// Block shape of an `A·B` product: A blocks are rows × inner, B blocks inner × cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub rows: BlockDim,
    pub inner: BlockDim,
    pub cols: BlockDim,
}

/// Nesting of the (row i, column j, inner k) block loops, outermost first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopOrder {
    Ijk,
    Ikj,
    Jik,
}

/// How the baseline accelerator moves data. It reloads both operands of
/// every block multiply, except a block identical to the one used by the
/// immediately preceding multiply, and writes every output block back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselinePolicy {
    /// Products with a parameter operand: embedding, Q/K/V, W^O and the MLP.
    pub param_blocks: BlockShape,
    pub param_order: LoopOrder,
    /// Score and context products.
    pub attention_blocks: BlockShape,
    pub attention_order: LoopOrder,
    /// Softmax and LayerNorm run on the host. When folded, the write-back
    /// of their input and the reload by the next product already carry the
    /// round trip; otherwise one extra store and load of each input is added.
    pub fold_round_trips: bool,
}

impl Default for BaselinePolicy {
    fn default() -> Self {
        BaselinePolicy {
            param_blocks: BlockShape {
                rows: BlockDim::Sys(1),
                inner: BlockDim::Full,
                cols: BlockDim::Sys(1),
            },
            param_order: LoopOrder::Jik,
            attention_blocks: BlockShape {
                rows: BlockDim::Sys(1),
                inner: BlockDim::Full,
                cols: BlockDim::Sys(2),
            },
            attention_order: LoopOrder::Ijk,
            fold_round_trips: true,
        }
    }
}

/// Collects baseline transactions, or only their byte counts.
struct Recorder<'a> {
    log: Option<&'a mut Vec<DramTransaction>>,
    mode: Mode,
    seq: u64,
    bytes: [(u64, u64); 3],
}

impl Recorder<'_> {
    fn push(&mut self, direction: Direction, tensor: &str, block: Block) {
        let bytes = block.bytes();
        let i = REPORT_MODES.iter().position(|&r| r == self.mode).expect("report mode");
        match direction {
            Direction::Load => self.bytes[i].0 += bytes,
            Direction::Store => self.bytes[i].1 += bytes,
        }
        if let Some(log) = self.log.as_deref_mut() {
            log.push(DramTransaction {
                direction,
                tensor: tensor.to_string(),
                block,
                bytes,
                // baseline logs carry issue order, not timing
                cycle: self.seq,
                mode: self.mode,
            });
        }
        self.seq += 1;
    }
}

/// `m × k` times `k × n` under the baseline rules, returning (loaded, stored).
#[allow(clippy::too_many_arguments)]
fn baseline_product(
    rec: &mut Recorder,
    (m, k, n): (usize, usize, usize),
    shape: BlockShape,
    order: LoopOrder,
    p: usize,
    a: &str,
    b: &str,
    out: &str,
) {
    let (bm, bk, bn) = (shape.rows.resolve(p, m), shape.inner.resolve(p, k), shape.cols.resolve(p, n));
    let (ri, kk, cj) = (m.div_ceil(bm), k.div_ceil(bk), n.div_ceil(bn));
    let span = |idx: usize, size: usize, len: usize| (idx * size, size.min(len - idx * size));
    let block = |(r0, rows): (usize, usize), (c0, cols): (usize, usize)| Block { row0: r0, col0: c0, rows, cols };
    let mut last_a = None;
    let mut last_b = None;
    let mut visit = |i: usize, j: usize, kb: usize, rec: &mut Recorder| {
        if last_a != Some((i, kb)) {
            rec.push(Direction::Load, a, block(span(i, bm, m), span(kb, bk, k)));
            last_a = Some((i, kb));
        }
        if last_b != Some((kb, j)) {
            rec.push(Direction::Load, b, block(span(kb, bk, k), span(j, bn, n)));
            last_b = Some((kb, j));
        }
        if kb + 1 == kk {
            rec.push(Direction::Store, out, block(span(i, bm, m), span(j, bn, n)));
        }
    };
    match order {
        LoopOrder::Ijk => {
            for i in 0..ri {
                for j in 0..cj {
                    for kb in 0..kk {
                        visit(i, j, kb, rec);
                    }
                }
            }
        }
        LoopOrder::Ikj => {
            for i in 0..ri {
                for kb in 0..kk {
                    for j in 0..cj {
                        visit(i, j, kb, rec);
                    }
                }
            }
        }
        LoopOrder::Jik => {
            for j in 0..cj {
                for i in 0..ri {
                    for kb in 0..kk {
                        visit(i, j, kb, rec);
                    }
                }
            }
        }
    }
}

fn round_trip(rec: &mut Recorder, tensor: &str, rows: usize, cols: usize) {
    rec.push(Direction::Store, tensor, Block::whole(rows, cols));
    rec.push(Direction::Load, tensor, Block::whole(rows, cols));
}

fn baseline_walk(d: &DerivedDims, policy: &BaselinePolicy, log: Option<&mut Vec<DramTransaction>>) -> [(u64, u64); 3] {
    let p = d.p_sys;
    let (t, dm, dh, hd) = (d.tokens, d.model_dim, d.head_dim, d.hidden_dim);
    let mut rec = Recorder {
        log,
        mode: Mode::Lp,
        seq: 0,
        bytes: [(0, 0); 3],
    };
    let (pb, po) = (policy.param_blocks, policy.param_order);
    let (ab, ao) = (policy.attention_blocks, policy.attention_order);
    let fold = policy.fold_round_trips;

    rec.mode = Mode::Lp;
    baseline_product(&mut rec, (d.num_patches, d.patch_dim, dm), pb, po, p, "input", "embed.weight", "embed.out");
    for l in 0..d.num_layers {
        rec.mode = Mode::Msa;
        let ln1 = format!("layers.{l}.ln1.out");
        if !fold {
            round_trip(&mut rec, &format!("layers.{l}.residual"), t, dm);
        }
        for h in 0..d.num_heads {
            let act = |k: &str| format!("layers.{l}.attn.{k}.{h}.out");
            for kind in ["query", "key", "value"] {
                let w = format!("layers.{l}.attn.{kind}.{h}");
                baseline_product(&mut rec, (t, dm, dh), pb, po, p, &ln1, &w, &act(kind));
            }
            baseline_product(&mut rec, (t, dh, t), ab, ao, p, &act("query"), &act("key"), &act("scores"));
            if !fold {
                round_trip(&mut rec, &act("scores"), t, t);
            }
            baseline_product(&mut rec, (t, t, dh), ab, ao, p, &act("probs"), &act("value"), &act("context"));
        }
        rec.mode = Mode::Lp;
        let w = format!("layers.{l}.attn.out");
        baseline_product(&mut rec, (t, dm, dm), pb, po, p, &format!("layers.{l}.attn.context"), &w, &format!("layers.{l}.attn.proj"));
        if !fold {
            round_trip(&mut rec, &format!("layers.{l}.mid"), t, dm);
        }
        rec.mode = Mode::Mlp;
        let ln2 = format!("layers.{l}.ln2.out");
        let hidden = format!("layers.{l}.mlp.hidden.out");
        baseline_product(&mut rec, (t, dm, hd), pb, po, p, &ln2, &format!("layers.{l}.mlp.hidden"), &hidden);
        baseline_product(&mut rec, (t, hd, dm), pb, po, p, &hidden, &format!("layers.{l}.mlp.out"), &format!("layers.{l}.mlp.out.out"));
    }
    if !fold {
        round_trip(&mut rec, "final", t, dm);
    }
    rec.bytes
}

/// Baseline traffic, reported at the single-load mode latencies in `cycles`.
pub fn baseline_traffic(
    model: &ModelConfig,
    hw: &HardwareConfig,
    policy: &BaselinePolicy,
    cycles: &CycleReport,
) -> Result<TrafficReport> {
    let d = derive_dims(model, hw)?;
    Ok(TrafficReport::build("baseline", &model.name, cycles, baseline_walk(&d, policy, None)))
}

/// Full baseline transaction log, for auditing.
pub fn baseline_dram_log(model: &ModelConfig, hw: &HardwareConfig, policy: &BaselinePolicy) -> Result<Vec<DramTransaction>> {
    let d = derive_dims(model, hw)?;
    let mut log = Vec::new();
    baseline_walk(&d, policy, Some(&mut log));
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub total_ratio: f64,
    pub peak_ratio: f64,
    pub peak_mode: Mode,
    pub mode_ratios: Vec<(Mode, f64)>,
}

/// Baseline over single-load: total bytes, and the largest per-mode
/// bandwidth ratio.
pub fn improvement_ratios(me: &TrafficReport, base: &TrafficReport) -> Result<Improvement> {
    if me.total_bytes == 0 {
        return Err(Error::InvalidConfig("single-load report moves no bytes".into()));
    }
    let mode_ratios: Vec<(Mode, f64)> = REPORT_MODES
        .iter()
        .filter_map(|&m| {
            let (a, b) = (me.mode(m), base.mode(m));
            (a.bandwidth > 0.0).then(|| (m, b.bandwidth / a.bandwidth))
        })
        .collect();
    let &(peak_mode, peak_ratio) = mode_ratios
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::InvalidConfig("no mode with traffic".into()))?;
    Ok(Improvement {
        total_ratio: base.total_bytes as f64 / me.total_bytes as f64,
        peak_ratio,
        peak_mode,
        mode_ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(dims: (usize, usize, usize), shape: BlockShape, order: LoopOrder, p: usize) -> Vec<DramTransaction> {
        let mut log = Vec::new();
        let mut rec = Recorder {
            log: Some(&mut log),
            mode: Mode::Lp,
            seq: 0,
            bytes: [(0, 0); 3],
        };
        baseline_product(&mut rec, dims, shape, order, p, "a", "b", "c");
        log
    }

    const SQUARE: BlockShape = BlockShape {
        rows: BlockDim::Sys(1),
        inner: BlockDim::Sys(1),
        cols: BlockDim::Sys(1),
    };

    #[test]
    fn cold_single_block() {
        let log = count((4, 4, 4), SQUARE, LoopOrder::Ijk, 4);
        let loads = log.iter().filter(|t| t.direction == Direction::Load).count();
        assert_eq!((loads, log.len() - loads), (2, 1));
    }

    #[test]
    fn shared_a_block_loaded_once() {
        // one row block, two column blocks, one inner block: A stays
        let log = count((4, 4, 8), SQUARE, LoopOrder::Ijk, 4);
        let loads = log.iter().filter(|t| t.direction == Direction::Load).count();
        assert_eq!(loads, 3);
    }

    #[test]
    fn outputs_written_unpadded() {
        let log = count((5, 7, 9), SQUARE, LoopOrder::Ikj, 4);
        let stored: u64 = log.iter().filter(|t| t.direction == Direction::Store).map(|t| t.bytes).sum();
        assert_eq!(stored, 5 * 9);
    }

    #[test]
    fn reuse_window_is_one_block() {
        // A(0,0) is used again after A(0,1) intervenes, so it is reloaded
        let log = count((4, 8, 8), SQUARE, LoopOrder::Ijk, 4);
        let a_loads = log.iter().filter(|t| t.tensor == "a").count();
        assert_eq!(a_loads, 4);
    }

    #[test]
    fn unfolded_round_trips_add_bytes() {
        let d = DerivedDims {
            num_patches: 8,
            tokens: 9,
            model_dim: 8,
            num_heads: 2,
            head_dim: 4,
            hidden_dim: 32,
            patch_dim: 12,
            num_layers: 1,
            p_sys: 4,
        };
        let folded = baseline_walk(&d, &BaselinePolicy::default(), None);
        let open = baseline_walk(
            &d,
            &BaselinePolicy {
                fold_round_trips: false,
                ..Default::default()
            },
            None,
        );
        let sum = |b: [(u64, u64); 3]| b.iter().map(|(l, s)| l + s).sum::<u64>();
        assert_eq!(sum(open) - sum(folded), 2 * (3 * 9 * 8 + 2 * 9 * 9));
    }
}
