//! Published figures for the four builtin variants, kept for comparison in
//! reports and acceptance checks. Nothing in the simulator reads them.

/// Variants in table order.
pub const MODELS: [&str; 4] = ["ViT-B", "DeiT-B", "DeiT-S", "DeiT-T"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Published {
    pub model: &'static str,
    pub fps_p32: f64,
    pub fps_p16: f64,
    pub traffic_total_p32: f64,
    pub traffic_peak_p32: f64,
    pub traffic_total_p16: f64,
    pub traffic_peak_p16: f64,
    pub bram36: u64,
    /// Largest baseline processing-element count before the bandwidth cap.
    pub baseline_pe_knee: usize,
}

pub const PUBLISHED: [Published; 4] = [
    Published {
        model: "ViT-B",
        fps_p32: 22.38,
        fps_p16: 6.08,
        traffic_total_p32: 9.22,
        traffic_peak_p32: 13.07,
        traffic_total_p16: 17.14,
        traffic_peak_p16: 25.58,
        bram36: 288,
        baseline_pe_knee: 3,
    },
    Published {
        model: "DeiT-B",
        fps_p32: 26.40,
        fps_p16: 6.64,
        traffic_total_p32: 8.25,
        traffic_peak_p32: 11.29,
        traffic_total_p16: 16.62,
        traffic_peak_p16: 23.79,
        bram36: 288,
        baseline_pe_knee: 3,
    },
    Published {
        model: "DeiT-S",
        fps_p32: 98.25,
        fps_p16: 25.53,
        traffic_total_p32: 7.06,
        traffic_peak_p32: 14.60,
        traffic_total_p16: 17.53,
        traffic_peak_p16: 27.60,
        bram36: 176,
        baseline_pe_knee: 2,
    },
    Published {
        model: "DeiT-T",
        fps_p32: 352.27,
        fps_p16: 94.13,
        traffic_total_p32: 8.77,
        traffic_peak_p32: 21.28,
        traffic_total_p16: 17.89,
        traffic_peak_p16: 35.29,
        bram36: 144,
        baseline_pe_knee: 2,
    },
];

/// DeiT-B latency at `p_sys` = 32 and 300 MHz, in seconds.
pub const DEIT_B_LATENCY_S: f64 = 37.86e-3;
/// Five-PE DeiT-B throughput at 300 MHz.
pub const MULTI_PE_DEIT_B_FPS: f64 = 132.04;
/// Five-PE aggregate ops/s: ceiling and best achieved.
pub const MULTI_PE_PEAK_OPS: f64 = 3072e9;
pub const MULTI_PE_ACHIEVED_OPS: f64 = 2682e9;
/// Efficiency peaks over the array size.
pub const EFFICIENCY_PEAKS: [usize; 5] = [11, 17, 33, 50, 66];

pub fn published(model: &str) -> Option<&'static Published> {
    let key = |s: &str| s.chars().filter(char::is_ascii_alphanumeric).collect::<String>().to_ascii_lowercase();
    PUBLISHED.iter().find(|p| key(p.model) == key(model))
}

impl Published {
    pub fn fps(&self, p_sys: usize) -> Option<f64> {
        match p_sys {
            32 => Some(self.fps_p32),
            16 => Some(self.fps_p16),
            _ => None,
        }
    }

    /// (total, peak) traffic improvement.
    pub fn traffic(&self, p_sys: usize) -> Option<(f64, f64)> {
        match p_sys {
            32 => Some((self.traffic_total_p32, self.traffic_peak_p32)),
            16 => Some((self.traffic_total_p16, self.traffic_peak_p16)),
            _ => None,
        }
    }
}
