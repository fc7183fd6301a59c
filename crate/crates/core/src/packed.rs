//! Two int8 multiplies per 18x27 DSP multiplier, plus the fixed-point
//! helpers used for requantization.

use serde::{Deserialize, Serialize};

const LOW_BITS: u32 = 18;
const LOW_MASK: u32 = (1 << LOW_BITS) - 1;
const OPERAND_BITS: u32 = 27;
const OPERAND_MASK: u32 = (1 << OPERAND_BITS) - 1;

/// 27-bit multiplier operand: the 9-bit field of `b` above the 18-bit
/// two's-complement image of `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PackedOperand {
    raw: u32,
}

impl PackedOperand {
    pub fn raw(self) -> u32 {
        self.raw
    }

    pub fn from_raw(raw: u32) -> Option<Self> {
        (raw <= OPERAND_MASK).then_some(PackedOperand { raw })
    }

    /// Value seen by the signed 27-bit multiplier port.
    pub fn signed_value(self) -> i64 {
        let shift = 64 - OPERAND_BITS;
        ((self.raw as i64) << shift) >> shift
    }

    pub fn unpack(self) -> (i8, i8) {
        let low = sign_extend(self.raw & LOW_MASK, LOW_BITS) as i8;
        let high = (self.signed_value() >> LOW_BITS) as i8;
        (high, low)
    }

    fn low_negative(self) -> bool {
        self.raw & (1 << (LOW_BITS - 1)) != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedProduct {
    /// Full multiplier output (fits in 45 bits).
    pub raw: i64,
    pub hi: i32,
    pub lo: i32,
}

impl PackedProduct {
    /// High field as read straight off the output, before any correction.
    pub fn raw_high_field(self) -> i64 {
        self.raw >> LOW_BITS
    }
}

pub fn pack_operands(b: i8, c: i8) -> PackedOperand {
    let high = (b as i32 as u32) & 0x1ff;
    let low = (c as i32 as u32) & LOW_MASK;
    PackedOperand {
        raw: (high << LOW_BITS) | low,
    }
}

fn sign_extend(v: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((v << shift) as i32) >> shift
}

/// Multiply `a` by both halves of `p` with one wide product.
///
/// `a` occupies the 18-bit port. The low product must fit in 18 signed bits,
/// which holds for any int8 `a` and also for unsigned `a <= 256`.
pub fn packed_multiply(a: i32, p: PackedOperand) -> PackedProduct {
    debug_assert!((-(1 << 17)..(1 << 17)).contains(&a));
    let raw = a as i64 * p.signed_value();
    let lo = sign_extend((raw as u64 as u32) & LOW_MASK, LOW_BITS);
    // borrow out of the low field when its product is negative
    let borrow = i64::from(lo < 0);
    // the low field holds c mod 2^18, which adds a * 2^18 when c < 0
    let offset = if p.low_negative() { a as i64 } else { 0 };
    let hi = (raw >> LOW_BITS) + borrow - offset;
    PackedProduct {
        raw,
        hi: hi as i32,
        lo,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
}

impl QuantParams {
    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0 && scale.is_finite(), "scale must be positive");
        QuantParams { scale }
    }
}

pub fn quantize(x: f64, q: QuantParams) -> i8 {
    (x / q.scale).round_ties_even().clamp(-128.0, 127.0) as i8
}

pub fn dequantize(v: i8, q: QuantParams) -> f64 {
    v as f64 * q.scale
}

/// Round-half-even arithmetic right shift.
pub fn rne_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Positive real ratio as a 31-bit mantissa and a power-of-two exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedRatio {
    mult: i64,
    exp: i32,
}

impl FixedRatio {
    pub fn from_f64(r: f64) -> Self {
        assert!(r > 0.0 && r.is_finite(), "ratio must be positive, got {r}");
        let mut exp = r.log2().floor() as i32 + 1;
        let mut m = r / 2f64.powi(exp);
        // log2 can be off by one ulp near powers of two
        while m >= 1.0 {
            m /= 2.0;
            exp += 1;
        }
        while m < 0.5 {
            m *= 2.0;
            exp -= 1;
        }
        let mut mult = (m * (1u64 << 31) as f64).round_ties_even() as i64;
        if mult == 1 << 31 {
            mult >>= 1;
            exp += 1;
        }
        FixedRatio { mult, exp }
    }

    pub fn to_f64(self) -> f64 {
        self.mult as f64 * 2f64.powi(self.exp - 31)
    }

    /// `round_half_even(x * ratio)` without saturation.
    pub fn apply(self, x: i128) -> i128 {
        let prod = x * self.mult as i128;
        let right = 31 - self.exp;
        if right >= 0 {
            rne_shift(prod, right as u32)
        } else {
            prod << (-right) as u32
        }
    }

    pub fn apply_i8(self, x: i128) -> i8 {
        self.apply(x).clamp(-128, 127) as i8
    }
}

pub fn saturating_add_i8(a: i8, b: i8) -> i8 {
    a.saturating_add(b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackingCheck {
    pub checked: u64,
    pub failures: u64,
    pub first_failure: Option<(i8, i8, i8)>,
}

impl PackingCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    fn merge(mut self, other: PackingCheck) -> PackingCheck {
        self.checked += other.checked;
        self.failures += other.failures;
        self.first_failure = self.first_failure.or(other.first_failure);
        self
    }
}

type MultiplyFn = dyn Fn(i32, PackedOperand) -> PackedProduct + Sync;

fn check_triple(mul: &MultiplyFn, a: i8, b: i8, c: i8) -> bool {
    let p = mul(a as i32, pack_operands(b, c));
    p.hi == a as i32 * b as i32 && p.lo == a as i32 * c as i32
}

/// Check every signed 8-bit triple against scalar products using `mul`.
pub fn check_packing_exhaustive_with(mul: &MultiplyFn, exec: crate::par::Execution) -> PackingCheck {
    let per_a = crate::par::map_range(0..256, exec, |ai| {
        let a = (ai as i32 - 128) as i8;
        let mut out = PackingCheck {
            checked: 0,
            failures: 0,
            first_failure: None,
        };
        for b in i8::MIN..=i8::MAX {
            for c in i8::MIN..=i8::MAX {
                out.checked += 1;
                if !check_triple(mul, a, b, c) {
                    out.failures += 1;
                    out.first_failure.get_or_insert((a, b, c));
                }
            }
        }
        out
    });
    per_a.into_iter().fold(
        PackingCheck {
            checked: 0,
            failures: 0,
            first_failure: None,
        },
        PackingCheck::merge,
    )
}

pub fn check_packing_exhaustive(exec: crate::par::Execution) -> PackingCheck {
    check_packing_exhaustive_with(&packed_multiply, exec)
}

/// Random-sample variant of the exhaustive check.
pub fn check_packing_sampled_with(mul: &MultiplyFn, samples: u64, seed: u64) -> PackingCheck {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = PackingCheck {
        checked: 0,
        failures: 0,
        first_failure: None,
    };
    for _ in 0..samples {
        let (a, b, c): (i8, i8, i8) = (rng.gen(), rng.gen(), rng.gen());
        out.checked += 1;
        if !check_triple(mul, a, b, c) {
            out.failures += 1;
            out.first_failure.get_or_insert((a, b, c));
        }
    }
    out
}

pub fn check_packing_sampled(samples: u64, seed: u64) -> PackingCheck {
    check_packing_sampled_with(&packed_multiply, samples, seed)
}

/// Packed multiply without the signed corrections, for harness self-tests.
pub fn packed_multiply_uncorrected(a: i32, p: PackedOperand) -> PackedProduct {
    let raw = a as i64 * p.signed_value();
    PackedProduct {
        raw,
        hi: (raw >> LOW_BITS) as i32,
        lo: sign_extend((raw as u64 as u32) & LOW_MASK, LOW_BITS),
    }
}
