//! Model and hardware configuration.
//!
//! Both configs can be read from a plain `key = value` text file. Blank lines and
//! lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    /// Informational only, as listed for the published variant.
    pub param_count: u64,
}

impl ModelConfig {
    fn vit(name: &str, image_size: usize, model_dim: usize, num_heads: usize, params: u64) -> Self {
        ModelConfig {
            name: name.to_string(),
            image_size,
            patch_size: 16,
            channels: 3,
            model_dim,
            num_heads,
            num_layers: 12,
            mlp_ratio: 4,
            param_count: params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.model_dim == 0 || self.num_heads == 0 || self.num_layers == 0 {
            return bad(format!("{}: dims, heads and layers must be positive", self.name));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad(format!("{}: image geometry must be positive", self.name));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "{}: model_dim {} not divisible by num_heads {}",
                self.name, self.model_dim, self.num_heads
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "{}: image_size {} not divisible by patch_size {}",
                self.name, self.image_size, self.patch_size
            ));
        }
        Ok(())
    }

    /// Bytes of one input image at one byte per channel value.
    pub fn input_bytes(&self) -> u64 {
        (self.image_size * self.image_size * self.channels) as u64
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = match kv.get("base") {
            Some((line, base)) => lookup_model(base).map_err(|_| Error::Parse {
                line: *line,
                msg: format!("unknown base model `{base}`"),
            })?,
            None => ModelConfig::vit("custom", 224, 768, 12, 0),
        };
        for (key, (line, value)) in &kv {
            let line = *line;
            match key.as_str() {
                "base" => {}
                "name" => cfg.name = value.clone(),
                "image_size" => cfg.image_size = parse_num(line, value)?,
                "patch_size" => cfg.patch_size = parse_num(line, value)?,
                "channels" => cfg.channels = parse_num(line, value)?,
                "model_dim" => cfg.model_dim = parse_num(line, value)?,
                "num_heads" => cfg.num_heads = parse_num(line, value)?,
                "num_layers" => cfg.num_layers = parse_num(line, value)?,
                "mlp_ratio" => cfg.mlp_ratio = parse_num(line, value)?,
                "param_count" => cfg.param_count = parse_num(line, value)?,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown model key `{other}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "model_dim = {}", self.model_dim);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "param_count = {}", self.param_count);
        s
    }
}

/// The four published variants.
pub fn builtin_models() -> Vec<ModelConfig> {
    vec![
        ModelConfig::vit("ViT-B", 256, 768, 12, 86_000_000),
        ModelConfig::vit("DeiT-B", 224, 768, 12, 86_000_000),
        ModelConfig::vit("DeiT-S", 224, 384, 6, 22_000_000),
        ModelConfig::vit("DeiT-T", 224, 192, 3, 6_000_000),
    ]
}

fn normalize_label(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Case and punctuation insensitive lookup: `deit-b`, `DeiT_B` and `deitb` all match.
pub fn lookup_model(label: &str) -> Result<ModelConfig> {
    let want = normalize_label(label);
    builtin_models()
        .into_iter()
        .find(|m| normalize_label(&m.name) == want)
        .ok_or_else(|| Error::UnknownModel(label.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedDims {
    pub num_patches: usize,
    pub tokens: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    /// Flattened patch length fed to the embedding projection.
    pub patch_dim: usize,
    pub num_layers: usize,
    pub p_sys: usize,
}

impl DerivedDims {
    pub fn row_blocks(&self) -> usize {
        self.tokens.div_ceil(self.p_sys)
    }

    pub fn col_blocks(&self, d: usize) -> usize {
        d.div_ceil(self.p_sys)
    }

    /// Column-block pairs covering `d`; one pair is the packed output width.
    pub fn col_pairs(&self, d: usize) -> usize {
        d.div_ceil(2 * self.p_sys)
    }
}

pub fn derive_dims(model: &ModelConfig, hw: &HardwareConfig) -> Result<DerivedDims> {
    model.validate()?;
    hw.validate()?;
    let side = model.image_size / model.patch_size;
    let num_patches = side * side;
    Ok(DerivedDims {
        num_patches,
        tokens: num_patches + 1,
        model_dim: model.model_dim,
        num_heads: model.num_heads,
        head_dim: model.model_dim / model.num_heads,
        hidden_dim: model.mlp_ratio * model.model_dim,
        patch_dim: model.patch_size * model.patch_size * model.channels,
        num_layers: model.num_layers,
        p_sys: hw.p_sys,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub p_sys: usize,
    pub clock_hz: f64,
    /// Aggregate off-chip bandwidth in bytes/s.
    pub dram_bandwidth: f64,
    /// Independent DRAM channels; one processing element streams from one channel.
    pub dram_channels: usize,
    pub dsp_count: u64,
    pub bram36_count: u64,
    pub bram_bank_depth: u64,
    pub packing_factor: usize,
    /// Minimum cycles for one on-demand parameter tile fetch.
    pub dram_latency_cycles: u64,
    /// Array fill cycles charged once per row-block sweep.
    pub pipeline_fill_cycles: u64,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            p_sys: 32,
            clock_hz: 300e6,
            dram_bandwidth: 77e9,
            dram_channels: 4,
            dsp_count: 5867,
            bram36_count: 1766,
            bram_bank_depth: 4096,
            packing_factor: 2,
            dram_latency_cycles: 16,
            pipeline_fill_cycles: 0,
        }
    }
}

impl HardwareConfig {
    pub fn with_psys(p_sys: usize) -> Self {
        HardwareConfig {
            p_sys,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.p_sys == 0 {
            return bad("p_sys must be at least 1");
        }
        if !(self.clock_hz > 0.0) || !self.clock_hz.is_finite() {
            return bad("clock_hz must be positive");
        }
        if !(self.dram_bandwidth >= 0.0) || !self.dram_bandwidth.is_finite() {
            return bad("dram_bandwidth must be non-negative");
        }
        if self.dram_channels == 0 {
            return bad("dram_channels must be at least 1");
        }
        if self.bram_bank_depth == 0 {
            return bad("bram_bank_depth must be positive");
        }
        if self.packing_factor != 2 {
            return bad("packing_factor is fixed at 2");
        }
        Ok(())
    }

    pub fn systolic_dsps(&self) -> u64 {
        (self.p_sys * self.p_sys) as u64
    }

    /// Multiply-accumulates per cycle of one array with packing.
    pub fn peak_macs_per_cycle(&self) -> u64 {
        (self.p_sys * self.packing_factor * self.p_sys) as u64
    }

    /// Off-chip bytes deliverable to one processing element per clock cycle.
    pub fn channel_bytes_per_cycle(&self) -> f64 {
        self.dram_bandwidth / self.dram_channels as f64 / self.clock_hz
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut hw = HardwareConfig::default();
        for (key, (line, value)) in &kv {
            let line = *line;
            match key.as_str() {
                "p_sys" | "psys" => hw.p_sys = parse_num(line, value)?,
                "clock_hz" | "freq" => hw.clock_hz = parse_num(line, value)?,
                "dram_bandwidth" | "bandwidth" => hw.dram_bandwidth = parse_num(line, value)?,
                "dram_channels" => hw.dram_channels = parse_num(line, value)?,
                "dsp_count" => hw.dsp_count = parse_num(line, value)?,
                "bram36_count" => hw.bram36_count = parse_num(line, value)?,
                "bram_bank_depth" => hw.bram_bank_depth = parse_num(line, value)?,
                "packing_factor" => hw.packing_factor = parse_num(line, value)?,
                "dram_latency_cycles" => hw.dram_latency_cycles = parse_num(line, value)?,
                "pipeline_fill_cycles" => hw.pipeline_fill_cycles = parse_num(line, value)?,
                other => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("unknown hardware key `{other}`"),
                    })
                }
            }
        }
        hw.validate()?;
        Ok(hw)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "p_sys = {}", self.p_sys);
        let _ = writeln!(s, "clock_hz = {:e}", self.clock_hz);
        let _ = writeln!(s, "dram_bandwidth = {:e}", self.dram_bandwidth);
        let _ = writeln!(s, "dram_channels = {}", self.dram_channels);
        let _ = writeln!(s, "dsp_count = {}", self.dsp_count);
        let _ = writeln!(s, "bram36_count = {}", self.bram36_count);
        let _ = writeln!(s, "bram_bank_depth = {}", self.bram_bank_depth);
        let _ = writeln!(s, "packing_factor = {}", self.packing_factor);
        let _ = writeln!(s, "dram_latency_cycles = {}", self.dram_latency_cycles);
        let _ = writeln!(s, "pipeline_fill_cycles = {}", self.pipeline_fill_cycles);
        s
    }
}

fn parse_kv(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, got `{body}`"),
        })?;
        let key = k.trim().to_ascii_lowercase();
        let value = v.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty key or value".into(),
            });
        }
        if out.insert(key.clone(), (line, value)).is_some() {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate key `{key}`"),
            });
        }
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(line: usize, value: &str) -> Result<T> {
    let cleaned: String = value.chars().filter(|c| *c != '_').collect();
    if let Ok(v) = cleaned.parse::<T>() {
        return Ok(v);
    }
    // integers written in scientific notation, e.g. `300e6`
    if let Ok(f) = cleaned.parse::<f64>() {
        if f.fract() == 0.0 && f >= 0.0 {
            if let Ok(v) = format!("{}", f as u64).parse::<T>() {
                return Ok(v);
            }
        }
    }
    Err(Error::Parse {
        line,
        msg: format!("invalid number `{value}`"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(name: &str, p: usize) -> DerivedDims {
        derive_dims(&lookup_model(name).unwrap(), &HardwareConfig::with_psys(p)).unwrap()
    }

    #[test]
    fn vit_b_geometry() {
        let d = dims("ViT-B", 32);
        assert_eq!((d.num_patches, d.tokens, d.head_dim), (256, 257, 64));
    }

    #[test]
    fn deit_b_geometry() {
        let d = dims("DeiT-B", 32);
        assert_eq!((d.num_patches, d.tokens, d.head_dim), (196, 197, 64));
        assert_eq!(d.row_blocks(), 7);
        assert_eq!(d.hidden_dim, 3072);
        assert_eq!(d.patch_dim, 768);
    }

    #[test]
    fn builtin_table() {
        let s = lookup_model("DeiT-S").unwrap();
        assert_eq!((s.model_dim, s.num_heads, s.num_layers, s.param_count), (384, 6, 12, 22_000_000));
        let t = lookup_model("deit-t").unwrap();
        assert_eq!((t.model_dim, t.num_heads, t.num_layers, t.param_count), (192, 3, 12, 6_000_000));
        let v = lookup_model("vit_b").unwrap();
        assert_eq!((v.image_size, v.param_count), (256, 86_000_000));
        assert_eq!(lookup_model("DeiT-B").unwrap().input_bytes(), 150_528);
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(lookup_model("vit-huge"), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut m = lookup_model("DeiT-B").unwrap();
        m.num_heads = 7;
        assert!(matches!(m.validate(), Err(Error::InvalidConfig(_))));
        let mut m = lookup_model("DeiT-B").unwrap();
        m.image_size = 230;
        assert!(derive_dims(&m, &HardwareConfig::default()).is_err());
        let hw = HardwareConfig::with_psys(0);
        assert!(hw.validate().is_err());
    }

    #[test]
    fn peak_macs() {
        let hw = HardwareConfig::default();
        assert_eq!(hw.systolic_dsps(), 1024);
        assert_eq!(hw.peak_macs_per_cycle(), 2048);
    }

    #[test]
    fn kv_round_trip() {
        for m in builtin_models() {
            assert_eq!(ModelConfig::from_kv_str(&m.to_kv_string()).unwrap(), m);
        }
        let hw = HardwareConfig { p_sys: 16, clock_hz: 150e6, ..Default::default() };
        assert_eq!(HardwareConfig::from_kv_str(&hw.to_kv_string()).unwrap(), hw);
    }

    #[test]
    fn kv_base_and_overrides() {
        let m = ModelConfig::from_kv_str("# tiny\nbase = deit-t\nname = mine\nnum_layers = 2\n").unwrap();
        assert_eq!((m.name.as_str(), m.model_dim, m.num_layers), ("mine", 192, 2));
        let hw = HardwareConfig::from_kv_str("psys = 16\nfreq = 300e6\n").unwrap();
        assert_eq!((hw.p_sys, hw.clock_hz), (16, 300e6));
    }

    #[test]
    fn kv_errors_carry_line() {
        match HardwareConfig::from_kv_str("p_sys = 32\nwat = 1\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ModelConfig::from_kv_str("model_dim 768"), Err(Error::Parse { line: 1, .. })));
        assert!(ModelConfig::from_kv_str("p = 1\np = 2").is_err());
        assert!(ModelConfig::from_kv_str("num_heads = 5").is_err());
    }

    #[test]
    fn row_block_bounds() {
        for m in builtin_models() {
            for p in 1..=128 {
                let d = derive_dims(&m, &HardwareConfig::with_psys(p)).unwrap();
                assert_eq!(d.tokens, (m.image_size / m.patch_size).pow(2) + 1);
                assert_eq!(d.head_dim * d.num_heads, d.model_dim);
                let rb = d.row_blocks();
                assert!(rb * p >= d.tokens && (rb - 1) * p < d.tokens);
            }
        }
    }
}
