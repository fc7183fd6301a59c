use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mevit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mevit"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MEVIT_OUT_DIR")
        .output()
        .unwrap()
}

fn kv(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(" = ").unwrap_or_else(|| panic!("not key = value: {l}"));
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn xy(path: &Path) -> Vec<(f64, f64)> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect()
}

fn within(got: f64, want: f64, tol: f64) -> bool {
    (got / want - 1.0).abs() <= tol
}

#[test]
fn simulate_deit_b_latency_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = mevit(&["simulate", "--model", "deit-b", "--psys", "32", "--freq", "300e6"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = kv(&dir.path().join("summary.txt"));
    let latency: f64 = s["latency_ms"].parse().unwrap();
    assert!(within(latency, 37.86, 0.10), "{latency}");
    assert_eq!(s["audit.passed"], "true");

    let hash = &s["manifest"];
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["hash"].as_str(), Some(hash.as_str()));

    for f in ["events.jsonl", "dram.jsonl"] {
        let body = fs::read_to_string(dir.path().join(f)).unwrap();
        let mut lines = body.lines();
        let head: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(head["manifest"].as_str(), Some(hash.as_str()));
        let mut n = 0;
        for l in lines {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            assert!(v.is_object());
            n += 1;
        }
        assert!(n > 0, "{f}");
    }

    let mut modes = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(dir.path().join("modes.csv")).unwrap();
    let total: f64 = modes
        .records()
        .map(|r| r.unwrap()[2].parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);

    let mut bw = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(dir.path().join("bandwidth.csv")).unwrap();
    assert_eq!(bw.headers().unwrap().get(0), Some("policy"));
    let policies: Vec<String> = bw.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(policies.len(), 6);
    assert!(fs::read_to_string(dir.path().join("bandwidth.csv")).unwrap().starts_with(&format!("# manifest={hash}")));
}

#[test]
fn simulate_deit_t_small_array() {
    let dir = tempfile::tempdir().unwrap();
    let o = mevit(&["simulate", "--model", "deit-t", "--psys", "16"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let fps: f64 = kv(&dir.path().join("summary.txt"))["fps"].parse().unwrap();
    assert!(within(fps, 94.13, 0.10), "{fps}");
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = mevit(&["simulate", "--model", "vit-zz"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(mevit(&["sweep", "efficiency", "--p", "80..4"], dir.path()).status.code(), Some(1));
    assert_eq!(mevit(&["sweep", "efficiency", "--p", "2..80"], dir.path()).status.code(), Some(1));
    assert_eq!(mevit(&["bram", "--psys", "0"], dir.path()).status.code(), Some(1));
    assert_eq!(mevit(&["frobnicate"], dir.path()).status.code(), Some(1));
}

#[test]
fn config_files_are_read() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("model.cfg");
    fs::write(&m, "base = deit-b\nname = wide\n").unwrap();
    let h = dir.path().join("hw.cfg");
    fs::write(&h, "p_sys = 32\n").unwrap();
    let out = dir.path().join("out");
    let o = mevit(&["bram", "--model-config", m.to_str().unwrap(), "--hw-config", h.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0));
    let s = kv(&out.join("bram.txt"));
    assert_eq!(s["model"], "wide");
    assert_eq!(s["total"], "288");
    fs::write(&h, "p_sys = 32\nwarp = 9\n").unwrap();
    assert_eq!(mevit(&["bram", "--hw-config", h.to_str().unwrap()], &out).status.code(), Some(1));
}

#[test]
fn verify_quick_and_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = mevit(&["verify", "--quick"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = fs::read_to_string(dir.path().join("verify.txt")).unwrap();
    assert!(text.contains("PASS packing: 1000000 triples exact"));
    let o = mevit(&["verify", "--quick", "--inject-fault", "packing"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("packing"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL packing"));
}

#[test]
fn efficiency_sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = mevit(&["sweep", "efficiency", "--model", "deit-b", "--p", "4..80"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let pts = xy(&dir.path().join("efficiency.csv"));
    assert_eq!(pts.len(), 77);
    assert!(pts.iter().all(|&(_, e)| e > 0.0 && e <= 1.0));
    let peaks: Vec<usize> = kv(&dir.path().join("sweep_efficiency.txt"))["peaks"]
        .split(", ")
        .map(|p| p.parse().unwrap())
        .collect();
    for p in [11, 33, 50, 66] {
        assert!(peaks.contains(&p), "{p} missing from {peaks:?}");
    }
    // recomputed from the data file
    let from_csv: Vec<usize> = pts
        .windows(3)
        .filter(|w| w[1].1 > w[0].1 && w[1].1 > w[2].1 && w[1].0 > 8.0)
        .map(|w| w[1].0 as usize)
        .collect();
    assert_eq!(peaks, from_csv);
}

#[test]
fn multi_pe_sweep_knee_matches_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = mevit(&["sweep", "multi-pe", "--model", "deit-b", "--k", "1..6", "--policy", "baseline"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let pts = xy(&dir.path().join("multi_pe.csv"));
    let one = pts[0].1;
    let linear = pts.iter().take_while(|&&(k, f)| (f - k * one).abs() < 1e-9 * f).count();
    let knee: usize = kv(&dir.path().join("sweep_multi_pe.txt"))["knee"].parse().unwrap();
    assert_eq!(knee, linear);
    assert!(pts.windows(2).all(|w| w[1].1 >= w[0].1));

    let o = mevit(&["sweep", "multi-pe", "--model", "deit-b", "--k", "1..5"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(kv(&dir.path().join("sweep_multi_pe.txt"))["knee"], "5");
    assert_eq!(mevit(&["sweep", "multi-pe", "--k", "0..3"], dir.path()).status.code(), Some(1));
}

#[test]
fn roofline_points_sit_under_roof() {
    let dir = tempfile::tempdir().unwrap();
    let o = mevit(&["sweep", "roofline"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let pts = xy(&dir.path().join("roofline.csv"));
    assert_eq!(pts.len(), 4);
    let s = kv(&dir.path().join("sweep_roofline.txt"));
    let peak: f64 = s["peak_ops"].parse().unwrap();
    let bw: f64 = s["bandwidth"].parse().unwrap();
    for (i, ops) in pts {
        assert!(ops <= peak.min(bw * i) * (1.0 + 1e-6));
    }
    let roof = xy(&dir.path().join("roofline_roof.csv"));
    assert!(roof.windows(2).all(|w| w[1].1 >= w[0].1));
}

#[test]
fn traffic_and_bram_reports() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mevit(&["traffic", "--model", "vit-b"], dir.path()).status.code(), Some(0));
    let t = kv(&dir.path().join("traffic.txt"));
    let total: f64 = t["total_ratio"].parse().unwrap();
    let peak: f64 = t["peak_ratio"].parse().unwrap();
    assert!(peak > total && total > 1.0);
    assert_eq!(t["peak_mode"], "MSA");
    let me: f64 = t["me_vit_bytes"].parse().unwrap();
    let base: f64 = t["baseline_bytes"].parse().unwrap();
    assert!((base / me - total).abs() < 1e-3);

    assert_eq!(mevit(&["bram", "--model", "deit-t"], dir.path()).status.code(), Some(0));
    let b = kv(&dir.path().join("bram.txt"));
    let total: i64 = b["total"].parse().unwrap();
    let published: i64 = b["published"].parse().unwrap();
    assert_eq!(b["delta"].parse::<i64>().unwrap(), total - published);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let snapshot = |args: &[&str]| {
        assert_eq!(mevit(args, dir.path()).status.code(), Some(0));
        let mut files: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.clone(), fs::read(p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let args = ["simulate", "--model", "deit-t", "--seed", "7"];
    assert_eq!(snapshot(&args), snapshot(&args));
    let sweep = ["sweep", "efficiency", "--model", "deit-s"];
    assert_eq!(snapshot(&sweep), snapshot(&sweep));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mevit"))
        .args(["bram", "--model", "vit-b"])
        .env("MEVIT_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("bram.txt").exists());
}
