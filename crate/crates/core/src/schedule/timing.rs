//! Cycle accounting for a step program.
//!
//! The array is a single in-order resource: BMM passes, blocking tile
//! fetches, activation stalls and exposed LayerNorm passes advance its clock.
//! Everything else (softmax, hidden LayerNorm, moves, streamed loads) is
//! stamped alongside without advancing it.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::program::{Block, Builder, MatOp, Program, Step};
use super::{buffer_specs, BufferKind, BufferSpec, Mode};
use crate::config::{derive_dims, DerivedDims, HardwareConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::functional::softmax::RECIPROCAL_LATENCY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Bmm,
    BufferMove,
    DramLoad,
    DramStore,
    LayernormPass,
    SoftmaxPass,
    Reciprocal,
    Stall,
    ResidualAdd,
    Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub cycle_start: u64,
    pub cycle_end: u64,
    pub kind: EventKind,
    pub mode: Mode,
    pub layer: Option<usize>,
    /// Occupies the systolic array.
    pub on_array: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Load,
    Store,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramTransaction {
    pub direction: Direction,
    pub tensor: String,
    pub block: Block,
    pub bytes: u64,
    pub cycle: u64,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCycles {
    pub msa: u64,
    pub lp: u64,
    pub mlp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub p_sys: usize,
    pub clock_hz: f64,
    pub embedding_cycles: u64,
    pub final_ln_cycles: u64,
    pub per_layer: Vec<LayerCycles>,
    pub inference_cycles: u64,
    pub bmm_cycles: u64,
    pub fill_cycles: u64,
    pub fetch_stall_cycles: u64,
    pub activation_stall_cycles: u64,
    pub exposed_layernorm_cycles: u64,
    /// Multiply-accumulates of the unpadded products.
    pub useful_macs: u64,
    /// Multiply-accumulate slots issued, padding included.
    pub padded_macs: u64,
    pub latency_s: f64,
    pub fps: f64,
}

impl CycleReport {
    pub fn mode_cycles(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Embedding => self.embedding_cycles,
            Mode::FinalLn => self.final_ln_cycles,
            Mode::Lp => self.per_layer.iter().map(|l| l.lp).sum(),
            Mode::Msa => self.per_layer.iter().map(|l| l.msa).sum(),
            Mode::Mlp => self.per_layer.iter().map(|l| l.mlp).sum(),
        }
    }

    pub fn mode_fraction(&self, mode: Mode) -> f64 {
        self.mode_cycles(mode) as f64 / self.inference_cycles as f64
    }

    pub fn stall_cycles(&self) -> u64 {
        self.fetch_stall_cycles + self.activation_stall_cycles + self.fill_cycles
    }

    pub fn mode_latency_s(&self, mode: Mode) -> f64 {
        self.mode_cycles(mode) as f64 / self.clock_hz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub record_events: bool,
    pub record_occupancy: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            record_events: true,
            record_occupancy: true,
        }
    }
}

impl TraceOptions {
    /// Cycle counts and the DRAM log only.
    pub fn summary() -> Self {
        TraceOptions {
            record_events: false,
            record_occupancy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancySample {
    pub cycle: u64,
    pub buffer: BufferKind,
    pub used: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferUsage {
    pub spec: BufferSpec,
    pub peak: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTrace {
    pub report: CycleReport,
    pub events: Vec<ScheduleEvent>,
    pub dram: Vec<DramTransaction>,
    pub occupancy: Vec<OccupancySample>,
    pub buffers: Vec<BufferUsage>,
    /// On-chip entries moved per (source, destination, label).
    pub moves: BTreeMap<(BufferKind, BufferKind, &'static str), u64>,
}

impl ScheduleTrace {
    pub fn loaded_bytes(&self) -> u64 {
        self.dram
            .iter()
            .filter(|t| t.direction == Direction::Load)
            .map(|t| t.bytes)
            .sum()
    }

    pub fn stored_bytes(&self) -> u64 {
        self.dram
            .iter()
            .filter(|t| t.direction == Direction::Store)
            .map(|t| t.bytes)
            .sum()
    }

    pub fn loaded_bytes_in(&self, mode: Mode) -> u64 {
        self.dram
            .iter()
            .filter(|t| t.direction == Direction::Load && t.mode == mode)
            .map(|t| t.bytes)
            .sum()
    }

    /// True when no two array events overlap in time.
    pub fn array_exclusive(&self) -> bool {
        let mut spans: Vec<(u64, u64)> = self
            .events
            .iter()
            .filter(|e| e.on_array && e.cycle_end > e.cycle_start)
            .map(|e| (e.cycle_start, e.cycle_end))
            .collect();
        spans.sort_unstable();
        spans.windows(2).all(|w| w[0].1 <= w[1].0)
    }

    /// One JSON object per event, in issue order.
    pub fn write_events<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_dram_log<W: Write>(&self, mut out: W) -> Result<()> {
        for t in &self.dram {
            serde_json::to_writer(&mut out, t)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

struct BufferState {
    spec: BufferSpec,
    regions: Vec<(&'static str, u64)>,
    used: u64,
    peak: u64,
}

struct Engine<'a> {
    d: DerivedDims,
    hw: &'a HardwareConfig,
    opts: TraceOptions,
    now: u64,
    channel_free: u64,
    mode: Mode,
    layer: Option<usize>,
    last_sweep: Option<(MatOp, usize)>,
    buffers: BTreeMap<BufferKind, BufferState>,
    report: CycleReport,
    events: Vec<ScheduleEvent>,
    dram: Vec<DramTransaction>,
    occupancy: Vec<OccupancySample>,
    moves: BTreeMap<(BufferKind, BufferKind, &'static str), u64>,
}

impl<'a> Engine<'a> {
    fn new(d: DerivedDims, hw: &'a HardwareConfig, opts: TraceOptions) -> Self {
        let buffers = buffer_specs(&d, hw)
            .into_iter()
            .map(|spec| {
                (
                    spec.kind,
                    BufferState {
                        spec,
                        regions: Vec::new(),
                        used: 0,
                        peak: 0,
                    },
                )
            })
            .collect();
        Engine {
            d,
            hw,
            opts,
            now: 0,
            channel_free: 0,
            mode: Mode::Embedding,
            layer: None,
            last_sweep: None,
            buffers,
            report: CycleReport {
                p_sys: d.p_sys,
                clock_hz: hw.clock_hz,
                embedding_cycles: 0,
                final_ln_cycles: 0,
                per_layer: vec![LayerCycles::default(); d.num_layers],
                inference_cycles: 0,
                bmm_cycles: 0,
                fill_cycles: 0,
                fetch_stall_cycles: 0,
                activation_stall_cycles: 0,
                exposed_layernorm_cycles: 0,
                useful_macs: 0,
                padded_macs: 0,
                latency_s: 0.0,
                fps: 0.0,
            },
            events: Vec::new(),
            dram: Vec::new(),
            occupancy: Vec::new(),
            moves: BTreeMap::new(),
        }
    }

    fn event(&mut self, kind: EventKind, start: u64, len: u64, on_array: bool, detail: impl FnOnce() -> String) {
        if self.opts.record_events {
            self.events.push(ScheduleEvent {
                cycle_start: start,
                cycle_end: start + len,
                kind,
                mode: self.mode,
                layer: self.layer,
                on_array,
                detail: detail(),
            });
        }
    }

    /// Advances the array clock and charges the current mode.
    fn advance(&mut self, cycles: u64) {
        self.now += cycles;
        let r = &mut self.report;
        match (self.mode, self.layer) {
            (Mode::Embedding, _) => r.embedding_cycles += cycles,
            (Mode::FinalLn, _) => r.final_ln_cycles += cycles,
            (Mode::Lp, Some(l)) => r.per_layer[l].lp += cycles,
            (Mode::Msa, Some(l)) => r.per_layer[l].msa += cycles,
            (Mode::Mlp, Some(l)) => r.per_layer[l].mlp += cycles,
            (m, None) => unreachable!("{m} without a layer"),
        }
    }

    fn transfer_cycles(&self, bytes: u64) -> u64 {
        (bytes as f64 / self.hw.channel_bytes_per_cycle()).ceil() as u64
    }

    fn sample(&mut self, kind: BufferKind) {
        if self.opts.record_occupancy {
            let used = self.buffers[&kind].used;
            self.occupancy.push(OccupancySample {
                cycle: self.now,
                buffer: kind,
                used,
            });
        }
    }

    fn claim(&mut self, kind: BufferKind, label: &'static str, entries: u64) -> Result<()> {
        let b = self.buffers.get_mut(&kind).expect("all buffers registered");
        let needed = b.used + entries;
        if needed > b.spec.physical {
            return Err(Error::BufferOverflow {
                buffer: kind.name(),
                needed,
                capacity: b.spec.physical,
            });
        }
        b.regions.push((label, entries));
        b.used = needed;
        b.peak = b.peak.max(needed);
        self.sample(kind);
        Ok(())
    }

    fn release(&mut self, kind: BufferKind, label: &'static str) -> Result<u64> {
        let b = self.buffers.get_mut(&kind).expect("all buffers registered");
        let idx = b
            .regions
            .iter()
            .rposition(|(l, _)| *l == label)
            .ok_or_else(|| Error::ScheduleConflict(format!("free of `{label}` not held by {kind}")))?;
        let (_, entries) = b.regions.remove(idx);
        b.used -= entries;
        self.sample(kind);
        Ok(entries)
    }

    fn step(&mut self, s: &Step) -> Result<()> {
        let p = self.d.p_sys as u64;
        match s {
            Step::Mode { mode, layer } => {
                self.mode = *mode;
                self.layer = *layer;
            }
            Step::Alloc { buffer, label, entries } => self.claim(*buffer, label, *entries)?,
            Step::Free { buffer, label } => {
                self.release(*buffer, label)?;
            }
            Step::Move {
                from,
                to,
                label,
                entries,
                relocate,
            } => {
                if *relocate {
                    let held = self.release(*from, label)?;
                    if held != *entries {
                        return Err(Error::ScheduleConflict(format!(
                            "moving {entries} entries of `{label}` but {from} holds {held}"
                        )));
                    }
                    self.claim(*to, label, *entries)?;
                }
                *self.moves.entry((*from, *to, *label)).or_default() += entries;
                let len = entries.div_ceil(2 * p);
                let now = self.now;
                self.event(EventKind::BufferMove, now, len, false, || format!("{label} {from}->{to} {entries}"));
            }
            Step::Load {
                tensor,
                block,
                dest,
                blocking,
            } => {
                let bytes = block.bytes();
                let transfer = self.transfer_cycles(bytes);
                let (start, len) = if *blocking {
                    let cost = transfer.max(self.hw.dram_latency_cycles);
                    let start = self.now;
                    self.event(EventKind::Stall, start, cost, true, || format!("fetch {tensor}"));
                    self.advance(cost);
                    self.report.fetch_stall_cycles += cost;
                    (start, cost)
                } else {
                    let start = self.channel_free.max(self.now);
                    self.channel_free = start + transfer;
                    (start, transfer)
                };
                self.event(EventKind::DramLoad, start, len, false, || {
                    format!("{tensor} [{}+{}, {}+{}] -> {dest}", block.row0, block.rows, block.col0, block.cols)
                });
                self.dram.push(DramTransaction {
                    direction: Direction::Load,
                    tensor: tensor.clone(),
                    block: *block,
                    bytes,
                    cycle: start,
                    mode: self.mode,
                });
            }
            Step::Store { tensor, block } => {
                let bytes = block.bytes();
                let start = self.channel_free.max(self.now);
                let len = self.transfer_cycles(bytes);
                self.channel_free = start + len;
                self.event(EventKind::DramStore, start, len, false, || tensor.clone());
                self.dram.push(DramTransaction {
                    direction: Direction::Store,
                    tensor: tensor.clone(),
                    block: *block,
                    bytes,
                    cycle: start,
                    mode: self.mode,
                });
            }
            Step::Bmm {
                op,
                row_block,
                col_pair,
                k,
            } => {
                if self.last_sweep != Some((*op, *row_block)) {
                    let fill = self.hw.pipeline_fill_cycles;
                    if fill > 0 {
                        let now = self.now;
                        self.event(EventKind::Stall, now, fill, true, || "pipeline fill".into());
                        self.advance(fill);
                        self.report.fill_cycles += fill;
                    }
                    self.last_sweep = Some((*op, *row_block));
                }
                let (rows, cols, _) = op.shape(&self.d);
                let valid_rows = rows.saturating_sub(row_block * self.d.p_sys).min(self.d.p_sys) as u64;
                let c0 = col_pair * 2 * self.d.p_sys;
                let valid_cols = cols.saturating_sub(c0).min(2 * self.d.p_sys) as u64;
                let len = k.len() as u64;
                self.report.useful_macs += valid_rows * valid_cols * len;
                self.report.padded_macs += 2 * p * p * len;
                self.report.bmm_cycles += len;
                let now = self.now;
                self.event(EventKind::Bmm, now, len, true, || {
                    format!("{op:?} rb={row_block} pair={col_pair} k={}..{}", k.start, k.end)
                });
                self.advance(len);
            }
            Step::Activation {
                row_block, hidden_pair, ..
            } => {
                let now = self.now;
                self.event(EventKind::Activation, now, p, true, || {
                    format!("bias+relu rb={row_block} pair={hidden_pair}")
                });
                self.advance(p);
                self.report.activation_stall_cycles += p;
            }
            Step::Softmax { row_block, .. } => {
                let now = self.now;
                let t = self.d.tokens as u64;
                self.event(EventKind::SoftmaxPass, now, t, false, || format!("rb={row_block} pass 1"));
                self.event(EventKind::Reciprocal, now + t, RECIPROCAL_LATENCY, false, || {
                    format!("rb={row_block}")
                });
                self.event(EventKind::SoftmaxPass, now + t + RECIPROCAL_LATENCY, t, false, || {
                    format!("rb={row_block} pass 2")
                });
            }
            Step::ResidualNorm {
                row_block, exposed, ..
            } => {
                let now = self.now;
                let dm = self.d.model_dim as u64;
                self.event(EventKind::ResidualAdd, now, dm, false, || format!("rb={row_block}"));
                self.event(EventKind::LayernormPass, now, dm, *exposed, || format!("rb={row_block}"));
                if *exposed {
                    self.advance(dm);
                    self.report.exposed_layernorm_cycles += dm;
                }
            }
            Step::Requant { .. } | Step::EmbedFinish { .. } | Step::StageBias { .. } => {}
        }
        Ok(())
    }

    fn finish(mut self) -> ScheduleTrace {
        let r = &mut self.report;
        r.inference_cycles = self.now;
        r.latency_s = self.now as f64 / self.hw.clock_hz;
        r.fps = if self.now == 0 { 0.0 } else { 1.0 / r.latency_s };
        let buffers = self
            .buffers
            .into_values()
            .map(|b| BufferUsage {
                spec: b.spec,
                peak: b.peak,
            })
            .collect();
        ScheduleTrace {
            report: self.report,
            events: self.events,
            dram: self.dram,
            occupancy: self.occupancy,
            buffers,
            moves: self.moves,
        }
    }
}

pub fn run_program(program: &Program, hw: &HardwareConfig, opts: TraceOptions) -> Result<ScheduleTrace> {
    hw.validate()?;
    if hw.dram_bandwidth <= 0.0 {
        return Err(Error::InvalidConfig("scheduling needs a positive dram_bandwidth".into()));
    }
    if program.dims.p_sys != hw.p_sys {
        return Err(Error::InvalidConfig(format!(
            "program built for p_sys {} run on {}",
            program.dims.p_sys, hw.p_sys
        )));
    }
    let mut e = Engine::new(program.dims, hw, opts);
    for s in &program.steps {
        e.step(s)?;
    }
    Ok(e.finish())
}

pub fn run_inference_schedule(model: &ModelConfig, hw: &HardwareConfig, opts: TraceOptions) -> Result<ScheduleTrace> {
    let d = derive_dims(model, hw)?;
    run_program(&super::inference_program(&d), hw, opts)
}

fn single_mode(d: &DerivedDims, hw: &HardwareConfig, mode: Mode, layer: usize) -> Result<ScheduleTrace> {
    if layer >= d.num_layers {
        return Err(Error::InvalidConfig(format!("layer {layer} of {}", d.num_layers)));
    }
    let mut b = Builder::new(*d);
    b.preamble(mode);
    match mode {
        Mode::Lp => b.lp(layer),
        Mode::Msa => b.msa(layer),
        Mode::Mlp => b.mlp(layer),
        other => return Err(Error::InvalidConfig(format!("{other} is not a layer mode"))),
    }
    run_program(&b.finish(), hw, TraceOptions::default())
}

/// Attention output projection of one layer, run from its entry state.
pub fn schedule_lp(d: &DerivedDims, hw: &HardwareConfig, layer: usize) -> Result<ScheduleTrace> {
    single_mode(d, hw, Mode::Lp, layer)
}

pub fn schedule_msa(d: &DerivedDims, hw: &HardwareConfig, layer: usize) -> Result<ScheduleTrace> {
    single_mode(d, hw, Mode::Msa, layer)
}

pub fn schedule_mlp(d: &DerivedDims, hw: &HardwareConfig, layer: usize) -> Result<ScheduleTrace> {
    single_mode(d, hw, Mode::Mlp, layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::lookup_model;

    fn dims(name: &str, p: usize) -> (DerivedDims, HardwareConfig) {
        let hw = HardwareConfig::with_psys(p);
        (derive_dims(&lookup_model(name).unwrap(), &hw).unwrap(), hw)
    }

    fn toy(t: usize, dm: usize, heads: usize, p: usize) -> DerivedDims {
        DerivedDims {
            num_patches: t - 1,
            tokens: t,
            model_dim: dm,
            num_heads: heads,
            head_dim: dm / heads,
            hidden_dim: 4 * dm,
            patch_dim: dm,
            num_layers: 1,
            p_sys: p,
        }
    }

    fn count(tr: &ScheduleTrace, kind: EventKind) -> usize {
        tr.events.iter().filter(|e| e.kind == kind).count()
    }

    #[test]
    fn lp_block_work_deit_b() {
        let (d, hw) = dims("deit-b", 32);
        let tr = schedule_lp(&d, &hw, 0).unwrap();
        // 7 row blocks x 12 column pairs x 768 inner cycles
        assert_eq!(tr.report.bmm_cycles, 7 * 12 * 768);
        // every W^O tile fetched once at 16 cycles
        assert_eq!(tr.report.fetch_stall_cycles, 24 * 24 * 16);
        assert_eq!(tr.report.inference_cycles, 64_512 + 9_216);
        let w: u64 = tr.dram.iter().filter(|t| t.tensor.ends_with("attn.out")).map(|t| t.bytes).sum();
        assert_eq!(w, 768 * 768);
        assert_eq!(tr.stored_bytes(), 0);
        assert!(tr.array_exclusive());
    }

    #[test]
    fn lp_single_block_toy() {
        let d = toy(33, 32, 1, 32);
        let hw = HardwareConfig::with_psys(32);
        let tr = schedule_lp(&d, &hw, 0).unwrap();
        // T = 33 needs two row blocks, the second a single row
        assert_eq!(count(&tr, EventKind::Bmm), 2);
        let d = toy(32, 32, 1, 32);
        let tr = schedule_lp(&d, &hw, 0).unwrap();
        assert_eq!(count(&tr, EventKind::Bmm), 1);
        assert_eq!(tr.report.activation_stall_cycles, 0);
    }

    #[test]
    fn msa_score_work() {
        let (d, hw) = dims("deit-b", 32);
        let tr = schedule_msa(&d, &hw, 0).unwrap();
        let qk: u64 = tr
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Bmm && e.detail.starts_with("Scores { layer: 0, head: 0 }"))
            .map(|e| e.cycle_end - e.cycle_start)
            .sum();
        assert_eq!(qk, 7 * 4 * 64);
        assert!(tr.array_exclusive());
        // residual leaves Feature for Weight, then Weight for Layer, once each
        assert_eq!(tr.moves[&(BufferKind::Feature, BufferKind::Weight, "residual")], 197 * 768);
        assert_eq!(tr.moves[&(BufferKind::Weight, BufferKind::Layer, "residual")], 197 * 768);
    }

    #[test]
    fn msa_one_row_block_toy() {
        let d = toy(32, 32, 1, 32);
        let hw = HardwareConfig::with_psys(32);
        let tr = schedule_msa(&d, &hw, 0).unwrap();
        let q = tr
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Bmm && e.detail.contains("kind: Query"))
            .count();
        assert_eq!(q, 1);
        // softmax never occupies the array
        assert!(tr.events.iter().filter(|e| e.kind == EventKind::SoftmaxPass).all(|e| !e.on_array));
        assert_eq!(tr.report.stall_cycles(), tr.report.fetch_stall_cycles);
    }

    #[test]
    fn mlp_stalls_and_weights() {
        let (d, hw) = dims("deit-b", 32);
        let tr = schedule_mlp(&d, &hw, 0).unwrap();
        assert_eq!(tr.report.activation_stall_cycles, 7 * 48 * 32);
        let bytes = |suffix: &str| -> u64 {
            tr.dram.iter().filter(|t| t.tensor.ends_with(suffix)).map(|t| t.bytes).sum()
        };
        assert_eq!(bytes("mlp.hidden") + bytes("mlp.out"), 2 * 768 * 3072);
        assert!(tr.array_exclusive());
    }

    #[test]
    fn mlp_single_block_toy() {
        let mut d = toy(8, 32, 1, 16);
        d.hidden_dim = 16;
        let hw = HardwareConfig::with_psys(16);
        let tr = schedule_mlp(&d, &hw, 0).unwrap();
        assert_eq!(tr.report.activation_stall_cycles, 16);
        assert_eq!(count(&tr, EventKind::Activation), 1);
    }

    #[test]
    fn cycle_report_sums() {
        for name in ["deit-t", "deit-b"] {
            let (d, hw) = dims(name, 32);
            let tr = run_program(&super::super::inference_program(&d), &hw, TraceOptions::summary()).unwrap();
            let r = &tr.report;
            let modes: u64 = [Mode::Embedding, Mode::Lp, Mode::Msa, Mode::Mlp, Mode::FinalLn]
                .iter()
                .map(|&m| r.mode_cycles(m))
                .sum();
            assert_eq!(modes, r.inference_cycles);
            assert_eq!(
                r.bmm_cycles + r.stall_cycles() + r.exposed_layernorm_cycles,
                r.inference_cycles
            );
            assert!(tr.events.is_empty());
        }
    }

    #[test]
    fn buffer_overflow_detected() {
        let (d, hw) = dims("deit-b", 32);
        let mut b = Builder::new(d);
        b.preamble(Mode::Lp);
        let mut prog = b.finish();
        prog.steps.push(Step::Alloc {
            buffer: BufferKind::Feature,
            label: "extra",
            entries: 1 << 20,
        });
        assert!(matches!(
            run_program(&prog, &hw, TraceOptions::summary()),
            Err(Error::BufferOverflow { buffer: "Feature", .. })
        ));
    }

    #[test]
    fn fill_convention_is_configurable() {
        let (d, mut hw) = dims("deit-s", 32);
        let base = schedule_lp(&d, &hw, 0).unwrap().report.inference_cycles;
        hw.pipeline_fill_cycles = 64;
        let with_fill = schedule_lp(&d, &hw, 0).unwrap().report;
        assert_eq!(with_fill.inference_cycles, base + 7 * 64);
        assert_eq!(with_fill.fill_cycles, 7 * 64);
    }

    #[test]
    fn events_export_one_line_each() {
        let (d, hw) = dims("deit-t", 32);
        let tr = schedule_lp(&d, &hw, 0).unwrap();
        let mut buf = Vec::new();
        tr.write_events(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), tr.events.len());
        let first: ScheduleEvent = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, tr.events[0]);
    }
}
