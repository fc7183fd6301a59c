//! Closed-form design-space tools: padding efficiency over the array size,
//! roofline points, multi-PE scaling under a shared bandwidth cap and BRAM
//! bank counts.

use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::config::{derive_dims, DerivedDims, HardwareConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::reference;
use crate::schedule::{bram_banks, buffer_specs, run_inference_schedule, BufferKind, CycleReport, StorageClass, TraceOptions};
use crate::traffic::{baseline_traffic, single_load_traffic, BaselinePolicy, TrafficReport};

/// Array products of one encoder layer as (rows, inner, cols).
pub fn layer_products(d: &DerivedDims) -> Vec<(usize, usize, usize)> {
    let (t, dm, dh, hd) = (d.tokens, d.model_dim, d.head_dim, d.hidden_dim);
    let mut v = Vec::with_capacity(5 * d.num_heads + 3);
    for _ in 0..d.num_heads {
        v.extend([(t, dm, dh), (t, dm, dh), (t, dm, dh), (t, dh, t), (t, t, dh)]);
    }
    v.extend([(t, dm, dm), (t, dm, hd), (t, hd, dm)]);
    v
}

/// MAC slots the array issues for one product: rows pad to `p`, output
/// columns to the packed width `2p`, the inner dimension streams unpadded.
pub fn padded_macs(rows: usize, inner: usize, cols: usize, p: usize) -> u64 {
    (rows.div_ceil(p) * p) as u64 * inner as u64 * (cols.div_ceil(2 * p) * 2 * p) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyPoint {
    pub p_sys: usize,
    pub useful_macs: u64,
    pub padded_macs: u64,
    pub efficiency: f64,
}

pub fn efficiency_at(model: &ModelConfig, p_sys: usize) -> Result<EfficiencyPoint> {
    let d = derive_dims(model, &HardwareConfig::with_psys(p_sys))?;
    let (mut useful, mut padded) = (0u64, 0u64);
    for (r, k, c) in layer_products(&d) {
        useful += (r * k * c) as u64;
        padded += padded_macs(r, k, c, p_sys);
    }
    Ok(EfficiencyPoint {
        p_sys,
        useful_macs: useful,
        padded_macs: padded,
        efficiency: useful as f64 / padded as f64,
    })
}

pub const SWEEP_P_RANGE: RangeInclusive<usize> = 4..=128;

pub fn efficiency_sweep(model: &ModelConfig, ps: RangeInclusive<usize>, exec: Execution) -> Result<Vec<EfficiencyPoint>> {
    if ps.is_empty() || ps.start() < SWEEP_P_RANGE.start() || ps.end() > SWEEP_P_RANGE.end() {
        return Err(Error::InvalidConfig(format!(
            "array sizes {}..={} outside {}..={}",
            ps.start(),
            ps.end(),
            SWEEP_P_RANGE.start(),
            SWEEP_P_RANGE.end()
        )));
    }
    par::map_range(*ps.start()..*ps.end() + 1, exec, |p| efficiency_at(model, p))
        .into_iter()
        .collect()
}

/// Array sizes whose efficiency is strictly above both neighbours.
pub fn local_maxima(points: &[EfficiencyPoint]) -> Vec<usize> {
    points
        .windows(3)
        .filter(|w| w[1].efficiency > w[0].efficiency && w[1].efficiency > w[2].efficiency)
        .map(|w| w[1].p_sys)
        .collect()
}

/// Least-squares slope of efficiency against array size.
pub fn efficiency_trend(points: &[EfficiencyPoint]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.p_sys as f64).sum::<f64>() / n;
    let my = points.iter().map(|p| p.efficiency).sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for p in points {
        let dx = p.p_sys as f64 - mx;
        num += dx * (p.efficiency - my);
        den += dx * dx;
    }
    num / den
}

/// Ops/s ceiling of `pe_count` arrays, one op per multiply.
pub fn peak_ops(hw: &HardwareConfig, pe_count: usize) -> f64 {
    pe_count as f64 * hw.peak_macs_per_cycle() as f64 * hw.clock_hz
}

/// Throughput and traffic of one processing element running one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeProfile {
    pub model: String,
    pub fps: f64,
    /// Useful multiplies per frame.
    pub ops_per_frame: u64,
    pub bytes_per_frame: u64,
    pub average_bandwidth: f64,
    pub peak_bandwidth: f64,
    /// Ops/s while the array is issuing passes, padding excluded.
    pub array_ops: f64,
}

impl PeProfile {
    pub fn new(cycles: &CycleReport, traffic: &TrafficReport) -> Self {
        PeProfile {
            model: traffic.model.clone(),
            fps: cycles.fps,
            ops_per_frame: cycles.useful_macs,
            bytes_per_frame: traffic.total_bytes,
            average_bandwidth: traffic.average_bandwidth,
            peak_bandwidth: traffic.peak_bandwidth,
            array_ops: cycles.useful_macs as f64 * cycles.clock_hz / cycles.bmm_cycles.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PePolicy {
    /// Single-load traffic.
    MeVit,
    Baseline,
}

impl std::str::FromStr for PePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "me-vit" | "mevit" | "single-load" => Ok(PePolicy::MeVit),
            "baseline" => Ok(PePolicy::Baseline),
            other => Err(Error::InvalidConfig(format!("unknown policy `{other}`"))),
        }
    }
}

/// Which per-PE bandwidth counts against the shared cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DemandBasis {
    #[default]
    Average,
    /// The busiest mode's bandwidth, as if every PE were in it at once.
    PeakMode,
}

/// Schedules one inference and measures its traffic under `policy`.
pub fn pe_profile(model: &ModelConfig, hw: &HardwareConfig, policy: PePolicy) -> Result<PeProfile> {
    let trace = run_inference_schedule(model, hw, TraceOptions::summary())?;
    let traffic = match policy {
        PePolicy::MeVit => single_load_traffic(model, hw, &trace)?,
        PePolicy::Baseline => baseline_traffic(model, hw, &BaselinePolicy::default(), &trace.report)?,
    };
    Ok(PeProfile::new(&trace.report, &traffic))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiPeResult {
    pub pe_count: usize,
    pub fps: f64,
    pub ops_per_s: f64,
    pub bandwidth_demand: f64,
    pub bandwidth_limited: bool,
}

/// `k` processing elements sharing the DRAM bandwidth fairly: throughput
/// scales by cap / demand once demand exceeds the cap.
pub fn multi_pe(profile: &PeProfile, hw: &HardwareConfig, k: usize, basis: DemandBasis) -> Result<MultiPeResult> {
    if k == 0 {
        return Err(Error::InvalidConfig("pe_count must be at least 1".into()));
    }
    let per_pe = match basis {
        DemandBasis::Average => profile.average_bandwidth,
        DemandBasis::PeakMode => profile.peak_bandwidth,
    };
    let demand = k as f64 * per_pe;
    let limited = demand > hw.dram_bandwidth;
    let fps = if limited {
        profile.fps * hw.dram_bandwidth / per_pe
    } else {
        k as f64 * profile.fps
    };
    Ok(MultiPeResult {
        pe_count: k,
        fps,
        ops_per_s: fps * profile.ops_per_frame as f64,
        bandwidth_demand: demand,
        bandwidth_limited: limited,
    })
}

/// Largest `k` in `1..=k_max` that runs without hitting the bandwidth cap;
/// zero when even one PE is limited.
pub fn pe_knee(profile: &PeProfile, hw: &HardwareConfig, basis: DemandBasis, k_max: usize) -> Result<usize> {
    let mut knee = 0;
    for k in 1..=k_max {
        if multi_pe(profile, hw, k, basis)?.bandwidth_limited {
            break;
        }
        knee = k;
    }
    Ok(knee)
}

/// Processing elements the device fits by DSP and BRAM budget.
pub fn pe_capacity(model: &ModelConfig, hw: &HardwareConfig) -> Result<usize> {
    let bram = bram_estimate(model, hw)?.total;
    let by_dsp = hw.dsp_count / hw.systolic_dsps();
    let by_bram = hw.bram36_count / bram.max(1);
    Ok(by_dsp.min(by_bram) as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflinePoint {
    pub model: String,
    pub pe_count: usize,
    pub operational_intensity: f64,
    pub peak_ops: f64,
    pub bandwidth: f64,
    pub attainable: f64,
    /// Useful ops over the whole inference latency.
    pub achieved_ops: f64,
    /// Useful ops over array-busy time: the ceiling less padding waste.
    pub array_ops: f64,
}

pub fn roofline(
    hw: &HardwareConfig,
    traffic: &TrafficReport,
    cycles: &CycleReport,
    pe_count: usize,
) -> Result<RooflinePoint> {
    let profile = PeProfile::new(cycles, traffic);
    let run = multi_pe(&profile, hw, pe_count, DemandBasis::Average)?;
    let intensity = profile.ops_per_frame as f64 / traffic.total_bytes.max(1) as f64;
    let peak = peak_ops(hw, pe_count);
    let scale = run.fps / (pe_count as f64 * profile.fps);
    Ok(RooflinePoint {
        model: traffic.model.clone(),
        pe_count,
        operational_intensity: intensity,
        peak_ops: peak,
        bandwidth: hw.dram_bandwidth,
        attainable: peak.min(hw.dram_bandwidth * intensity),
        achieved_ops: run.ops_per_s,
        array_ops: pe_count as f64 * profile.array_ops * scale,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BramBuffer {
    pub kind: BufferKind,
    pub entries: u64,
    pub banks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BramEstimate {
    pub model: String,
    pub p_sys: usize,
    pub buffers: Vec<BramBuffer>,
    pub total: u64,
    pub published: Option<u64>,
    /// Estimate minus the published count.
    pub delta: Option<i64>,
}

/// BRAM36 banks of the block-RAM buffers. Counts are rounded up to a
/// multiple of the array size, never below the 32-lane packed read width.
pub fn bram_estimate(model: &ModelConfig, hw: &HardwareConfig) -> Result<BramEstimate> {
    let d = derive_dims(model, hw)?;
    let buffers: Vec<BramBuffer> = buffer_specs(&d, hw)
        .into_iter()
        .filter(|s| s.storage == StorageClass::BlockRam)
        .map(|s| BramBuffer {
            kind: s.kind,
            entries: s.capacity,
            banks: bram_banks(s.capacity, hw),
        })
        .collect();
    let total = buffers.iter().map(|b| b.banks).sum();
    let published = reference::published(&model.name).map(|p| p.bram36);
    Ok(BramEstimate {
        model: model.name.clone(),
        p_sys: hw.p_sys,
        buffers,
        total,
        published,
        delta: published.map(|p| total as i64 - p as i64),
    })
}

/// Two-column series for plotting.
pub fn write_xy<W: Write>(out: W, x: &str, y: &str, points: impl IntoIterator<Item = (f64, f64)>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([x, y])?;
    for (a, b) in points {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
