//! Self-check suite: packing, numeric kernels against wide-arithmetic
//! references, and schedule replay against the functional encoder.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{derive_dims, HardwareConfig, ModelConfig};
use crate::functional::layernorm::{variance_identity_holds, EPSILON_SHIFT};
use crate::functional::softmax::{biased_exponent, prob_to_f64, EXP_BIAS, PROB_FRAC_BITS};
use crate::functional::{encoder_forward, layernorm_two_pass, pseudo_softmax_row, EncoderWeights, ForwardOptions, Image, LnAffine};
use crate::packed::{self, PackingCheck};
use crate::par::Execution;
use crate::schedule::{audit_single_load, inference_program, load_manifest, replay_numeric, run_inference_schedule, TraceOptions};

/// Deliberate defects for exercising the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Fault {
    /// Multiply without the sign-borrow correction of the high field.
    Packing,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Sample the packing space instead of covering it.
    pub quick: bool,
    pub seed: u64,
    pub exec: Execution,
    pub fault: Option<Fault>,
}

pub const QUICK_PACKING_SAMPLES: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Property {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub properties: Vec<Property>,
    /// Largest probability error seen against exact base-2 softmax.
    pub softmax_max_error: f64,
    pub softmax_bound: f64,
    /// Largest layernorm deviation in output steps.
    pub layernorm_max_steps: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.properties.iter().filter(|p| !p.passed).map(|p| p.name).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.properties {
            let _ = writeln!(s, "{} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail);
        }
        let _ = writeln!(s, "softmax_max_error = {:.6e}", self.softmax_max_error);
        let _ = writeln!(s, "softmax_bound = {:.6e}", self.softmax_bound);
        let _ = writeln!(s, "layernorm_max_steps = {:.4}", self.layernorm_max_steps);
        s
    }
}

fn packing(opts: &VerifyOptions) -> PackingCheck {
    let mul: &(dyn Fn(i32, packed::PackedOperand) -> packed::PackedProduct + Sync) = match opts.fault {
        Some(Fault::Packing) => &packed::packed_multiply_uncorrected,
        None => &packed::packed_multiply,
    };
    if opts.quick {
        packed::check_packing_sampled_with(mul, QUICK_PACKING_SAMPLES, opts.seed)
    } else {
        packed::check_packing_exhaustive_with(mul, opts.exec)
    }
}

fn exact_base2_softmax(scores: &[i32]) -> Vec<f64> {
    let e: Vec<f64> = scores
        .iter()
        .map(|&s| 2f64.powi(biased_exponent(s) as i32 - EXP_BIAS))
        .collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

struct SoftmaxStats {
    max_error: f64,
    in_range: bool,
    argmax_kept: bool,
}

fn softmax_checks(rng: &mut ChaCha8Rng, rows: usize) -> SoftmaxStats {
    let mut st = SoftmaxStats {
        max_error: 0.0,
        in_range: true,
        argmax_kept: true,
    };
    for _ in 0..rows {
        let n = rng.gen_range(1..=257);
        let row: Vec<i32> = (0..n).map(|_| rng.gen_range(-128..128)).collect();
        let p = pseudo_softmax_row(&row).expect("non-empty row");
        for (got, want) in p.iter().zip(exact_base2_softmax(&row)) {
            let g = prob_to_f64(*got);
            st.max_error = st.max_error.max((g - want).abs());
            st.in_range &= (0.0..=1.0).contains(&g);
        }
        let top = row.iter().max().unwrap();
        let i = row.iter().position(|x| x == top).unwrap();
        let ptop = p.iter().max().unwrap();
        st.argmax_kept &= p.iter().position(|x| x == ptop) == Some(i);
    }
    st
}

fn layernorm_worst(rng: &mut ChaCha8Rng, rows: usize) -> f64 {
    let (gs, bs, os) = (1.0 / 64.0, 1.0 / 32.0, 1.0 / 32.0);
    let mut worst: f64 = 0.0;
    for _ in 0..rows {
        let n = rng.gen_range(2..=768);
        let row: Vec<i8> = (0..n).map(|_| rng.gen()).collect();
        let gamma: Vec<i8> = (0..n).map(|_| rng.gen_range(-127..=127)).collect();
        let beta: Vec<i8> = (0..n).map(|_| rng.gen_range(-127..=127)).collect();
        let got = layernorm_two_pass(&row, &LnAffine::new(&gamma, gs, &beta, bs, os));
        let nf = n as f64;
        let mu = row.iter().map(|&x| x as f64).sum::<f64>() / nf;
        let var = row.iter().map(|&x| (x as f64 - mu).powi(2)).sum::<f64>() / nf;
        let inv = 1.0 / (var + 2f64.powi(-(EPSILON_SHIFT as i32))).sqrt();
        for j in 0..n {
            let want = ((row[j] as f64 - mu) * inv * gamma[j] as f64 * gs + beta[j] as f64 * bs) / os;
            worst = worst.max((got[j] as f64 - want.clamp(-128.0, 127.0)).abs());
        }
    }
    worst
}

/// Small encoder that exercises every step kind in well under a second.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        name: "toy".into(),
        image_size: 32,
        patch_size: 8,
        channels: 3,
        model_dim: 32,
        num_heads: 2,
        num_layers: 2,
        mlp_ratio: 4,
        param_count: 0,
    }
}

fn schedule_checks(seed: u64) -> crate::Result<(bool, bool)> {
    let model = toy_model();
    let hw = HardwareConfig::with_psys(8);
    let d = derive_dims(&model, &hw)?;
    let w = EncoderWeights::random(&d, seed);
    let img = Image::random(model.image_size, model.channels, seed ^ 0x5eed);
    let want = encoder_forward(&img, &w, hw.p_sys, ForwardOptions::default())?;
    let got = replay_numeric(&inference_program(&d), &w, &img)?;
    let trace = run_inference_schedule(&model, &hw, TraceOptions::summary())?;
    let audit = audit_single_load(&trace.dram, &load_manifest(&d));
    Ok((got == want, audit.passed()))
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let rows = if opts.quick { 2_000 } else { 20_000 };
    let mut props = Vec::new();

    let pk = packing(opts);
    props.push(Property {
        name: "packing",
        passed: pk.passed(),
        detail: match pk.first_failure {
            Some((a, b, c)) => format!("{} of {} triples wrong, first a={a} b={b} c={c}", pk.failures, pk.checked),
            None => format!("{} triples exact", pk.checked),
        },
    });

    let bound = 2f64.powi(1 - PROB_FRAC_BITS as i32);
    let sm = softmax_checks(&mut rng, rows);
    props.push(Property {
        name: "softmax_error",
        passed: sm.max_error <= bound,
        detail: format!("max |p - exact| = {:.3e} over {rows} rows, bound {bound:.3e}", sm.max_error),
    });
    props.push(Property {
        name: "softmax_range",
        passed: sm.in_range,
        detail: "outputs in [0, 1]".into(),
    });
    props.push(Property {
        name: "softmax_argmax",
        passed: sm.argmax_kept,
        detail: "first maximum preserved".into(),
    });

    let ln_rows = rows / 10;
    let ln = layernorm_worst(&mut rng, ln_rows);
    props.push(Property {
        name: "layernorm_error",
        passed: ln <= 1.0,
        detail: format!("max deviation {ln:.4} steps over {ln_rows} rows"),
    });

    let identity = (0..rows).all(|_| {
        let n = rng.gen_range(1..=1024);
        let row: Vec<i8> = (0..n).map(|_| rng.gen()).collect();
        variance_identity_holds(&row)
    });
    props.push(Property {
        name: "variance_identity",
        passed: identity,
        detail: format!("{rows} rows, exact integer arithmetic"),
    });

    let (equal, audited, detail) = match schedule_checks(opts.seed) {
        Ok((e, a)) => (e, a, "toy encoder, p_sys 8, replay vs functional forward".to_string()),
        Err(e) => (false, false, e.to_string()),
    };
    props.push(Property {
        name: "schedule_replay",
        passed: equal,
        detail,
    });
    props.push(Property {
        name: "single_load_audit",
        passed: audited,
        detail: "toy encoder trace".into(),
    });

    VerifyReport {
        properties: props,
        softmax_max_error: sm.max_error,
        softmax_bound: bound,
        layernorm_max_steps: ln,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_run_passes() {
        let r = run_verify(&VerifyOptions {
            quick: true,
            ..Default::default()
        });
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.softmax_max_error > 0.0);
    }

    #[test]
    fn injected_fault_is_named() {
        let r = run_verify(&VerifyOptions {
            quick: true,
            fault: Some(Fault::Packing),
            ..Default::default()
        });
        assert_eq!(r.failed(), vec!["packing"]);
    }
}
