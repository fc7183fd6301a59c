//! Base-2 softmax built from float exponent and mantissa manipulation.
//!
//! Each integer score becomes the exponent field of a float (`score + 127`,
//! saturated to 0..=255, implicit leading one). Pass one sums those floats and
//! forms a reciprocal of the normalized mantissa; pass two shifts that
//! reciprocal per element.

use crate::error::{Error, Result};

pub const EXP_BIAS: i32 = 127;
/// Mantissa fraction bits of the running sum.
pub const MANT_FRAC_BITS: u32 = 23;
/// Fraction bits of the reciprocal register.
pub const RECIP_FRAC_BITS: u32 = 16;
/// Fraction bits kept in each output probability.
pub const PROB_FRAC_BITS: u32 = 8;
pub const PROB_ONE: u16 = 1 << PROB_FRAC_BITS;
/// Reciprocal unit latency in cycles.
pub const RECIPROCAL_LATENCY: u64 = 32;

/// Saturating biased exponent of a score.
pub fn biased_exponent(score: i32) -> u8 {
    score.saturating_add(EXP_BIAS).clamp(0, 255) as u8
}

fn effective_exponent(score: i32) -> i32 {
    biased_exponent(score) as i32 - EXP_BIAS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxRowState {
    pub exp_sum: i32,
    /// Normalized mantissa with `MANT_FRAC_BITS` fraction bits, in [1, 2).
    pub mant_sum: u32,
    /// `2 / mant_sum` with `RECIP_FRAC_BITS` fraction bits, in (1, 2].
    pub recip_mant: u32,
}

impl SoftmaxRowState {
    /// Pass one over a score row.
    pub fn accumulate(scores: &[i32]) -> Result<Self> {
        let mut it = scores.iter();
        let first = it.next().ok_or(Error::EmptySoftmaxRow)?;
        let mut sum = FloatSum {
            exp: effective_exponent(*first),
            mant: 1 << MANT_FRAC_BITS,
        };
        for &s in it {
            sum.add_pow2(effective_exponent(s));
        }
        let num = 1u64 << (1 + MANT_FRAC_BITS + RECIP_FRAC_BITS);
        let recip_mant = (num / sum.mant) as u32;
        Ok(SoftmaxRowState {
            exp_sum: sum.exp,
            mant_sum: sum.mant as u32,
            recip_mant,
        })
    }

    pub fn mant_f64(&self) -> f64 {
        self.mant_sum as f64 / (1u64 << MANT_FRAC_BITS) as f64
    }

    /// Value of the running sum, `2^exp_sum * mant_sum`.
    pub fn sum_f64(&self) -> f64 {
        self.mant_f64() * 2f64.powi(self.exp_sum)
    }

    /// Pass two for one element: the reciprocal shifted right by
    /// `exp_sum - x + 1`, truncated to `PROB_FRAC_BITS`.
    pub fn emit(&self, score: i32) -> u16 {
        let shift = (self.exp_sum - effective_exponent(score) + 1) as u32;
        debug_assert!(shift >= 1);
        let total = shift + RECIP_FRAC_BITS - PROB_FRAC_BITS;
        if total >= 32 {
            0
        } else {
            (self.recip_mant >> total) as u16
        }
    }
}

/// Running float with unbounded exponent and round-half-even addition.
#[derive(Debug, Clone, Copy)]
struct FloatSum {
    exp: i32,
    mant: u64,
}

impl FloatSum {
    fn add_pow2(&mut self, e: i32) {
        const GUARD: u32 = 40;
        let one = 1u64 << MANT_FRAC_BITS;
        let (hi_e, hi_m, lo_e, lo_m) = if e > self.exp {
            (e, one, self.exp, self.mant)
        } else {
            (self.exp, self.mant, e, one)
        };
        let d = (hi_e - lo_e) as u32;
        let wide_lo = (lo_m as u128) << GUARD;
        let (lo_aligned, mut sticky) = if d >= 96 {
            (0, lo_m != 0)
        } else {
            (wide_lo >> d, wide_lo & ((1u128 << d) - 1) != 0)
        };
        let mut sum = ((hi_m as u128) << GUARD) + lo_aligned;
        let mut exp = hi_e;
        if sum >= 1u128 << (MANT_FRAC_BITS + 1 + GUARD) {
            sticky |= sum & 1 != 0;
            sum >>= 1;
            exp += 1;
        }
        let mut mant = (sum >> GUARD) as u64;
        let rem = sum & ((1u128 << GUARD) - 1);
        let half = 1u128 << (GUARD - 1);
        let round_up = rem > half || (rem == half && (sticky || mant & 1 == 1));
        if round_up {
            mant += 1;
            if mant == 1 << (MANT_FRAC_BITS + 1) {
                mant >>= 1;
                exp += 1;
            }
        }
        self.exp = exp;
        self.mant = mant;
    }
}

/// Pseudo-softmax of one row; outputs carry `PROB_FRAC_BITS` fraction bits.
pub fn pseudo_softmax_row(scores: &[i32]) -> Result<Vec<u16>> {
    let state = SoftmaxRowState::accumulate(scores)?;
    Ok(scores.iter().map(|&s| state.emit(s)).collect())
}

pub fn prob_to_f64(p: u16) -> f64 {
    p as f64 / PROB_ONE as f64
}
