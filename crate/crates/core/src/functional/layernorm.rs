use crate::packed::FixedRatio;

/// Fraction bits of the mean and inverse standard deviation.
pub const STAT_FRAC_BITS: u32 = 24;
/// `epsilon = 2^-EPSILON_SHIFT` in units of the input integers.
pub const EPSILON_SHIFT: u32 = 16;
const NORM_FRAC_BITS: u32 = 2 * STAT_FRAC_BITS;

fn div_round_half_even(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal if q & 1 == 1 => q + 1,
        _ => q,
    }
}

/// Statistics gathered by pass one for one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormRowState {
    pub n: usize,
    pub sum: i32,
    pub sq_sum: i64,
    /// Mean with `STAT_FRAC_BITS` fraction bits.
    pub mean: i64,
    /// `1 / sqrt(var + eps)` with `STAT_FRAC_BITS` fraction bits. Can reach
    /// 256.0 for a constant row, so it needs more than eight integer bits.
    pub inv_std: i64,
}

impl LayerNormRowState {
    pub fn accumulate(row: &[i8]) -> Self {
        assert!(!row.is_empty(), "layernorm row must be non-empty");
        let (sum, sq_sum) = row.iter().fold((0i32, 0i64), |(s, q), &x| {
            (s + x as i32, q + (x as i64) * (x as i64))
        });
        let n = row.len() as i128;
        let mean = div_round_half_even((sum as i128) << STAT_FRAC_BITS, n) as i64;
        // n^2 * var, exact
        let var_n2 = n * sq_sum as i128 - (sum as i128) * (sum as i128);
        let denom = (var_n2 << EPSILON_SHIFT) + n * n;
        let radicand = ((n * n) as u128) << (2 * STAT_FRAC_BITS + EPSILON_SHIFT);
        let inv_std = (radicand / denom as u128).isqrt() as i64;
        LayerNormRowState {
            n: row.len(),
            sum,
            sq_sum,
            mean,
            inv_std,
        }
    }

    pub fn variance_f64(&self) -> f64 {
        let n = self.n as f64;
        let mu = self.sum as f64 / n;
        self.sq_sum as f64 / n - mu * mu
    }

    /// `(x - mean) * inv_std` with `2 * STAT_FRAC_BITS` fraction bits.
    pub fn normalized(&self, x: i8) -> i128 {
        (((x as i128) << STAT_FRAC_BITS) - self.mean as i128) * self.inv_std as i128
    }
}

/// Per-channel scale and shift applied in pass two, with output requantization.
#[derive(Debug, Clone, PartialEq)]
pub struct LnAffine {
    gamma: Vec<i8>,
    beta_term: Vec<i128>,
    out: FixedRatio,
}

impl LnAffine {
    pub fn new(gamma: &[i8], gamma_scale: f64, beta: &[i8], beta_scale: f64, out_scale: f64) -> Self {
        assert_eq!(gamma.len(), beta.len());
        let to_gamma_units = beta_scale / gamma_scale * 2f64.powi(NORM_FRAC_BITS as i32);
        let beta_term = beta
            .iter()
            .map(|&b| (b as f64 * to_gamma_units).round_ties_even() as i128)
            .collect();
        LnAffine {
            gamma: gamma.to_vec(),
            beta_term,
            out: FixedRatio::from_f64(gamma_scale / out_scale / 2f64.powi(NORM_FRAC_BITS as i32)),
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn apply(&self, state: &LayerNormRowState, x: i8, channel: usize) -> i8 {
        let v = state.normalized(x) * self.gamma[channel] as i128 + self.beta_term[channel];
        self.out.apply_i8(v)
    }
}

/// Pass one gathers sum and squared sum, pass two normalizes each element.
pub fn layernorm_two_pass(row: &[i8], affine: &LnAffine) -> Vec<i8> {
    assert_eq!(row.len(), affine.len(), "row length must match channel count");
    let state = LayerNormRowState::accumulate(row);
    row.iter()
        .enumerate()
        .map(|(j, &x)| affine.apply(&state, x, j))
        .collect()
}

/// Centered and single-pass variance forms agree exactly:
/// `sum_j (n*x_j - S)^2 == n * (n*Q - S^2)`.
pub fn variance_identity_holds(row: &[i8]) -> bool {
    let n = row.len() as i128;
    let s: i128 = row.iter().map(|&x| x as i128).sum();
    let q: i128 = row.iter().map(|&x| (x as i128) * (x as i128)).sum();
    let centered: i128 = row.iter().map(|&x| (n * x as i128 - s).pow(2)).sum();
    centered == n * (n * q - s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct two-pass real-arithmetic reference.
    fn oracle(row: &[i8], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mu = row.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = row.iter().map(|&x| (x as f64 - mu).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 2f64.powi(-(EPSILON_SHIFT as i32))).sqrt();
        row.iter()
            .enumerate()
            .map(|(j, &x)| (x as f64 - mu) * inv * gamma[j] + beta[j])
            .collect()
    }

    fn unit_affine(n: usize, out_scale: f64) -> LnAffine {
        LnAffine::new(&vec![64; n], 1.0 / 64.0, &vec![0; n], 1.0, out_scale)
    }

    #[test]
    fn constant_row_is_zero() {
        for c in [-128i8, 0, 7, 127] {
            let out = layernorm_two_pass(&[c; 16], &unit_affine(16, 1.0 / 32.0));
            assert!(out.iter().all(|&v| v == 0));
        }
        let s = LayerNormRowState::accumulate(&[5; 8]);
        assert_eq!(s.inv_std, 256 << STAT_FRAC_BITS);
    }

    #[test]
    fn one_to_four() {
        let row = [1i8, 2, 3, 4];
        let want = oracle(&row, &[1.0; 4], &[0.0; 4]);
        for (w, e) in want.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((w - e).abs() < 1e-4);
        }
        let s = LayerNormRowState::accumulate(&row);
        for (j, &x) in row.iter().enumerate() {
            let v = s.normalized(x) as f64 / 2f64.powi(48);
            assert!((v - want[j]).abs() < 1e-6, "{v} vs {}", want[j]);
        }
        let scale = 1.0 / 64.0;
        let out = layernorm_two_pass(&row, &unit_affine(4, scale));
        for (o, w) in out.iter().zip(&want) {
            assert!((*o as f64 * scale - w).abs() <= scale);
        }
    }

    #[test]
    fn beta_shifts_output() {
        let row = [1i8, 2, 3, 4];
        let out_scale = 1.0 / 16.0;
        let aff = LnAffine::new(&[64; 4], 1.0 / 64.0, &[8; 4], 1.0 / 16.0, out_scale);
        let out = layernorm_two_pass(&row, &aff);
        let want = oracle(&row, &[1.0; 4], &[0.5; 4]);
        for (o, w) in out.iter().zip(&want) {
            assert!((*o as f64 * out_scale - w).abs() <= out_scale);
        }
    }

    #[test]
    fn identity_on_fixed_rows() {
        assert!(variance_identity_holds(&[1, 2, 3, 4]));
        assert!(variance_identity_holds(&[-128; 768]));
        assert!(variance_identity_holds(&[127, -128, 0, 5]));
    }

    proptest! {
        #[test]
        fn variance_forms_agree(row in prop::collection::vec(any::<i8>(), 1..800)) {
            prop_assert!(variance_identity_holds(&row));
        }

        #[test]
        fn within_one_step_of_reference(
            row in prop::collection::vec(any::<i8>(), 2..768),
            g in -127i8..=127,
            b in -127i8..=127,
        ) {
            let n = row.len();
            let (gs, bs, os) = (1.0 / 64.0, 1.0 / 32.0, 1.0 / 32.0);
            let aff = LnAffine::new(&vec![g; n], gs, &vec![b; n], bs, os);
            let got = layernorm_two_pass(&row, &aff);
            let want = oracle(&row, &vec![g as f64 * gs; n], &vec![b as f64 * bs; n]);
            for (o, w) in got.iter().zip(&want) {
                let clamped = (w / os).clamp(-128.0, 127.0);
                prop_assert!((*o as f64 - clamped).abs() <= 1.0, "{} vs {}", o, clamped);
            }
        }

        #[test]
        fn constant_affine_moments(row in prop::collection::vec(-100i8..100, 64..256)) {
            prop_assume!(row.iter().any(|&x| x != row[0]));
            let n = row.len();
            let os = 1.0 / 16.0;
            // gamma 1.0, beta 0.5
            let aff = LnAffine::new(&vec![64; n], 1.0 / 64.0, &vec![8; n], 1.0 / 16.0, os);
            let out: Vec<f64> = layernorm_two_pass(&row, &aff).iter().map(|&v| v as f64 * os).collect();
            let mean = out.iter().sum::<f64>() / n as f64;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!((mean - 0.5).abs() < 0.05, "mean {}", mean);
            prop_assert!((var - 1.0).abs() < 0.1, "var {}", var);
        }
    }
}
