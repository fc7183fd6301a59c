use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;

use mevit_core::analysis::{
    bram_estimate, efficiency_sweep, efficiency_trend, local_maxima, multi_pe, pe_capacity, pe_knee, pe_profile, peak_ops,
    roofline, write_xy, DemandBasis, PePolicy,
};
use mevit_core::schedule::{audit_single_load, load_manifest, run_inference_schedule, Mode, TraceOptions};
use mevit_core::traffic::{baseline_traffic, improvement_ratios, single_load_traffic, BaselinePolicy};
use mevit_core::verify::{run_verify, Fault, VerifyOptions};
use mevit_core::{builtin_models, derive_dims, lookup_model, reference, Execution, HardwareConfig, ModelConfig};

use crate::manifest::{RunManifest, Sink};
use crate::{BasisArg, CliError, Common, FaultArg, PolicyArg, SweepKind};

fn load_model(c: &Common) -> Result<ModelConfig, CliError> {
    match &c.model_config {
        Some(path) => Ok(ModelConfig::from_kv_str(&fs::read_to_string(path)?)?),
        None => Ok(lookup_model(&c.model)?),
    }
}

fn load_hw(c: &Common) -> Result<HardwareConfig, CliError> {
    let mut hw = match &c.hw_config {
        Some(path) => HardwareConfig::from_kv_str(&fs::read_to_string(path)?)?,
        None => HardwareConfig::default(),
    };
    if let Some(p) = c.psys {
        hw.p_sys = p;
    }
    if let Some(f) = c.freq {
        hw.clock_hz = f;
    }
    if let Some(b) = c.bandwidth {
        hw.dram_bandwidth = b;
    }
    hw.validate()?;
    Ok(hw)
}

fn open_sink(c: &Common, command: &str, model: &ModelConfig, hw: &HardwareConfig, extra: Vec<(String, String)>) -> Result<Sink, CliError> {
    let m = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: command.into(),
        model: match &c.model_config {
            Some(p) => p.display().to_string(),
            None => c.model.clone(),
        },
        hw_config: c.hw_config.as_ref().map(|p| p.display().to_string()),
        seed: c.seed,
        out_dir: c.out.display().to_string(),
        model_kv: model.to_kv_string(),
        hw_kv: hw.to_kv_string(),
        extra,
    };
    Sink::create(&c.out, &m)
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, CliError> {
    let bad = || CliError::Usage(format!("bad range `{s}`, expected a..b"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn pe_policy(p: PolicyArg) -> PePolicy {
    match p {
        PolicyArg::MeVit => PePolicy::MeVit,
        PolicyArg::Baseline => PePolicy::Baseline,
    }
}

fn policy_name(p: PolicyArg) -> &'static str {
    match p {
        PolicyArg::MeVit => "me-vit",
        PolicyArg::Baseline => "baseline",
    }
}

pub fn simulate(c: &Common) -> Result<(), CliError> {
    let model = load_model(c)?;
    let hw = load_hw(c)?;
    let d = derive_dims(&model, &hw)?;
    let mut sink = open_sink(c, "simulate", &model, &hw, vec![])?;
    let trace = run_inference_schedule(&model, &hw, TraceOptions::default())?;
    let r = &trace.report;
    let verdict = audit_single_load(&trace.dram, &load_manifest(&d));

    let mut s = String::new();
    let _ = writeln!(s, "model = {}", model.name);
    let _ = writeln!(s, "p_sys = {}", r.p_sys);
    let _ = writeln!(s, "clock_hz = {}", r.clock_hz);
    let _ = writeln!(s, "inference_cycles = {}", r.inference_cycles);
    let _ = writeln!(s, "latency_ms = {:.4}", r.latency_s * 1e3);
    let _ = writeln!(s, "fps = {:.4}", r.fps);
    if let Some(p) = reference::published(&model.name).and_then(|p| p.fps(hw.p_sys)) {
        let _ = writeln!(s, "published_fps = {p}");
        let _ = writeln!(s, "fps_delta = {:+.4}", r.fps / p - 1.0);
    }
    let _ = writeln!(s, "bmm_cycles = {}", r.bmm_cycles);
    let _ = writeln!(s, "fill_cycles = {}", r.fill_cycles);
    let _ = writeln!(s, "fetch_stall_cycles = {}", r.fetch_stall_cycles);
    let _ = writeln!(s, "activation_stall_cycles = {}", r.activation_stall_cycles);
    let _ = writeln!(s, "exposed_layernorm_cycles = {}", r.exposed_layernorm_cycles);
    let _ = writeln!(s, "useful_macs = {}", r.useful_macs);
    let _ = writeln!(s, "padded_macs = {}", r.padded_macs);
    for m in [Mode::Embedding, Mode::Lp, Mode::Msa, Mode::Mlp, Mode::FinalLn] {
        let _ = writeln!(s, "fraction.{} = {:.4}", m.name(), r.mode_fraction(m));
    }
    let _ = writeln!(s, "audit.passed = {}", verdict.passed());
    let _ = writeln!(s, "audit.duplicate_loads = {}", verdict.duplicate_loads.len());
    let _ = writeln!(s, "audit.intermediate_stores = {}", verdict.intermediate_stores.len());
    let _ = writeln!(s, "audit.loaded_bytes = {}", verdict.loaded_bytes);
    let _ = writeln!(s, "audit.expected_bytes = {}", verdict.expected_bytes);

    sink.csv("modes.csv", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["mode", "cycles", "fraction", "latency_s"])?;
        for m in [Mode::Embedding, Mode::Lp, Mode::Msa, Mode::Mlp, Mode::FinalLn] {
            out.write_record([
                m.name().to_string(),
                r.mode_cycles(m).to_string(),
                r.mode_fraction(m).to_string(),
                r.mode_latency_s(m).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    sink.jsonl("events.jsonl", |w| trace.write_events(w))?;
    sink.jsonl("dram.jsonl", |w| trace.write_dram_log(w))?;

    if verdict.passed() {
        let me = single_load_traffic(&model, &hw, &trace)?;
        let base = baseline_traffic(&model, &hw, &BaselinePolicy::default(), r)?;
        let _ = writeln!(s, "traffic.bytes = {}", me.total_bytes);
        let _ = writeln!(s, "traffic.average_bandwidth = {}", me.average_bandwidth);
        let _ = writeln!(s, "traffic.peak_bandwidth = {}", me.peak_bandwidth);
        let _ = writeln!(s, "traffic.peak_mode = {}", me.peak_mode.name());
        sink.csv("bandwidth.csv", |w| {
            me.write_csv(&mut *w, true)?;
            base.write_csv(w, false)
        })?;
    }
    sink.text("summary.txt", &s)?;
    print!("{s}");
    if verdict.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "single-load audit failed: {} duplicate loads, {} intermediate stores, {} unknown tensors",
            verdict.duplicate_loads.len(),
            verdict.intermediate_stores.len(),
            verdict.unknown_tensors.len()
        )))
    }
}

pub fn verify(c: &Common, fault: Option<FaultArg>) -> Result<(), CliError> {
    let model = load_model(c)?;
    let hw = load_hw(c)?;
    let extra = fault.map(|_| vec![("inject_fault".to_string(), "packing".to_string())]).unwrap_or_default();
    let mut sink = open_sink(c, if c.quick { "verify --quick" } else { "verify" }, &model, &hw, extra)?;
    let report = run_verify(&VerifyOptions {
        quick: c.quick,
        seed: c.seed,
        exec: Execution::Parallel,
        fault: fault.map(|FaultArg::Packing| Fault::Packing),
    });
    let text = report.to_text();
    sink.text("verify.txt", &text)?;
    print!("{text}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed properties: {}", report.failed().join(", "))))
    }
}

pub fn sweep(c: &Common, kind: &SweepKind) -> Result<(), CliError> {
    let model = load_model(c)?;
    let hw = load_hw(c)?;
    match kind {
        SweepKind::Efficiency { range } => {
            let ps = parse_range(range)?;
            let mut sink = open_sink(c, "sweep efficiency", &model, &hw, vec![("p".into(), range.clone())])?;
            let pts = efficiency_sweep(&model, ps, Execution::Parallel)?;
            sink.csv("efficiency.csv", |w| {
                write_xy(w, "p_sys", "efficiency", pts.iter().map(|p| (p.p_sys as f64, p.efficiency)))
            })?;
            let peaks: Vec<usize> = local_maxima(&pts).into_iter().filter(|&p| p > 8).collect();
            let best = pts.iter().max_by(|a, b| a.efficiency.total_cmp(&b.efficiency)).unwrap();
            let mut s = String::new();
            let _ = writeln!(s, "model = {}", model.name);
            let _ = writeln!(s, "peaks = {}", join(&peaks));
            let _ = writeln!(s, "best = {} ({:.4})", best.p_sys, best.efficiency);
            let _ = writeln!(s, "trend_slope = {:.6e}", efficiency_trend(&pts));
            sink.text("sweep_efficiency.txt", &s)?;
            print!("{s}");
        }
        SweepKind::MultiPe { range, basis } => {
            let ks = parse_range(range)?;
            if *ks.start() == 0 {
                return Err(CliError::Usage("pe count starts at 1".into()));
            }
            let basis = match basis {
                BasisArg::Average => DemandBasis::Average,
                BasisArg::PeakMode => DemandBasis::PeakMode,
            };
            let mut sink = open_sink(
                c,
                "sweep multi-pe",
                &model,
                &hw,
                vec![
                    ("k".into(), range.clone()),
                    ("policy".into(), policy_name(c.policy).into()),
                    ("basis".into(), format!("{basis:?}")),
                ],
            )?;
            let profile = pe_profile(&model, &hw, pe_policy(c.policy))?;
            let runs = ks.clone().map(|k| multi_pe(&profile, &hw, k, basis)).collect::<Result<Vec<_>, _>>()?;
            sink.csv("multi_pe.csv", |w| write_xy(w, "pe_count", "fps", runs.iter().map(|r| (r.pe_count as f64, r.fps))))?;
            let knee = pe_knee(&profile, &hw, basis, *ks.end())?;
            let mut s = String::new();
            let _ = writeln!(s, "model = {}", model.name);
            let _ = writeln!(s, "policy = {}", policy_name(c.policy));
            let _ = writeln!(s, "per_pe_average_bandwidth = {}", profile.average_bandwidth);
            let _ = writeln!(s, "per_pe_peak_bandwidth = {}", profile.peak_bandwidth);
            let _ = writeln!(s, "knee = {knee}");
            let _ = writeln!(s, "device_pe_capacity = {}", pe_capacity(&model, &hw)?);
            for r in &runs {
                let _ = writeln!(
                    s,
                    "k{} = fps {:.4}, ops/s {:.4e}, demand {:.4e}, limited {}",
                    r.pe_count, r.fps, r.ops_per_s, r.bandwidth_demand, r.bandwidth_limited
                );
            }
            sink.text("sweep_multi_pe.txt", &s)?;
            print!("{s}");
        }
        SweepKind::Roofline { pes } => {
            if *pes == 0 {
                return Err(CliError::Usage("--pes must be at least 1".into()));
            }
            let mut sink = open_sink(c, "sweep roofline", &model, &hw, vec![("pes".into(), pes.to_string())])?;
            let mut pts = Vec::new();
            for m in builtin_models() {
                let trace = run_inference_schedule(&m, &hw, TraceOptions::summary())?;
                let t = single_load_traffic(&m, &hw, &trace)?;
                pts.push(roofline(&hw, &t, &trace.report, *pes)?);
            }
            sink.csv("roofline.csv", |w| {
                write_xy(w, "operational_intensity", "achieved_ops", pts.iter().map(|p| (p.operational_intensity, p.achieved_ops)))
            })?;
            let peak = peak_ops(&hw, *pes);
            let roof = (-4..=16).map(|e| {
                let i = 2f64.powi(e);
                (i, peak.min(hw.dram_bandwidth * i))
            });
            sink.csv("roofline_roof.csv", |w| write_xy(w, "operational_intensity", "attainable", roof))?;
            let mut s = String::new();
            let _ = writeln!(s, "peak_ops = {peak:.6e}");
            let _ = writeln!(s, "bandwidth = {:.6e}", hw.dram_bandwidth);
            for p in &pts {
                let _ = writeln!(
                    s,
                    "{} = intensity {:.2}, attainable {:.4e}, achieved {:.4e}, array {:.4e}, under_roof {}",
                    p.model,
                    p.operational_intensity,
                    p.attainable,
                    p.achieved_ops,
                    p.array_ops,
                    p.achieved_ops <= p.attainable
                );
            }
            sink.text("sweep_roofline.txt", &s)?;
            print!("{s}");
        }
    }
    Ok(())
}

pub fn traffic(c: &Common) -> Result<(), CliError> {
    let model = load_model(c)?;
    let hw = load_hw(c)?;
    let mut sink = open_sink(c, "traffic", &model, &hw, vec![])?;
    let trace = run_inference_schedule(&model, &hw, TraceOptions::summary())?;
    let me = single_load_traffic(&model, &hw, &trace)?;
    let base = baseline_traffic(&model, &hw, &BaselinePolicy::default(), &trace.report)?;
    let imp = improvement_ratios(&me, &base)?;
    sink.csv("traffic.csv", |w| {
        me.write_csv(&mut *w, true)?;
        base.write_csv(w, false)
    })?;
    let mut s = String::new();
    let _ = writeln!(s, "model = {}", model.name);
    let _ = writeln!(s, "p_sys = {}", hw.p_sys);
    let _ = writeln!(s, "me_vit_bytes = {}", me.total_bytes);
    let _ = writeln!(s, "baseline_bytes = {}", base.total_bytes);
    let _ = writeln!(s, "total_ratio = {:.4}", imp.total_ratio);
    let _ = writeln!(s, "peak_ratio = {:.4}", imp.peak_ratio);
    let _ = writeln!(s, "peak_mode = {}", imp.peak_mode.name());
    for (m, r) in &imp.mode_ratios {
        let _ = writeln!(s, "ratio.{} = {:.4}", m.name(), r);
    }
    if let Some((t, p)) = reference::published(&model.name).and_then(|p| p.traffic(hw.p_sys)) {
        let _ = writeln!(s, "published_total_ratio = {t}");
        let _ = writeln!(s, "published_peak_ratio = {p}");
        let _ = writeln!(s, "total_ratio_delta = {:+.4}", imp.total_ratio / t - 1.0);
    }
    sink.text("traffic.txt", &s)?;
    print!("{s}");
    Ok(())
}

pub fn bram(c: &Common) -> Result<(), CliError> {
    let model = load_model(c)?;
    let hw = load_hw(c)?;
    let mut sink = open_sink(c, "bram", &model, &hw, vec![])?;
    let est = bram_estimate(&model, &hw)?;
    sink.csv("bram.csv", |w| {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["buffer", "entries", "banks"])?;
        for b in &est.buffers {
            out.write_record([b.kind.name().to_string(), b.entries.to_string(), b.banks.to_string()])?;
        }
        out.flush()?;
        Ok(())
    })?;
    let mut s = String::new();
    let _ = writeln!(s, "model = {}", est.model);
    let _ = writeln!(s, "p_sys = {}", est.p_sys);
    for b in &est.buffers {
        let _ = writeln!(s, "banks.{} = {}", b.kind.name(), b.banks);
    }
    let _ = writeln!(s, "total = {}", est.total);
    if let (Some(p), Some(d)) = (est.published, est.delta) {
        let _ = writeln!(s, "published = {p}");
        let _ = writeln!(s, "delta = {d:+}");
    }
    sink.text("bram.txt", &s)?;
    print!("{s}");
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("4..80").unwrap(), 4..=80);
        assert_eq!(parse_range("1..=6").unwrap(), 1..=6);
        assert_eq!(parse_range("7").unwrap(), 7..=7);
        assert!(parse_range("9..3").is_err());
        assert!(parse_range("a..b").is_err());
    }
}
