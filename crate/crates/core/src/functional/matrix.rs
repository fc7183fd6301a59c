use std::fmt::Debug;

use crate::error::{Error, Result};
use crate::packed::{pack_operands, packed_multiply, PackedOperand};
use crate::par::{self, Execution};

pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {}

impl Element for i8 {}
impl Element for u16 {}
impl Element for i32 {}

/// Values that can drive the 18-bit multiplier port.
pub trait DspOperand: Element {
    fn dsp(self) -> i32;
}

impl DspOperand for i8 {
    fn dsp(self) -> i32 {
        self as i32
    }
}

/// Softmax probabilities carry 8 fractional bits and reach 256 for a lone token.
impl DspOperand for u16 {
    fn dsp(self) -> i32 {
        debug_assert!(self <= 256);
        self as i32
    }
}

/// Row-major matrix padded with zeros to multiples of the array size.
#[derive(Clone, PartialEq)]
pub struct TileMatrix<T> {
    rows: usize,
    cols: usize,
    p_sys: usize,
    stride: usize,
    data: Vec<T>,
}

pub type TileAccumulator = TileMatrix<i32>;

impl<T: Element> Debug for TileMatrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TileMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("p_sys", &self.p_sys)
            .finish()
    }
}

impl<T: Element> TileMatrix<T> {
    pub fn zeros(rows: usize, cols: usize, p_sys: usize) -> Self {
        assert!(p_sys > 0);
        let stride = cols.div_ceil(p_sys) * p_sys;
        let prow = rows.div_ceil(p_sys) * p_sys;
        TileMatrix {
            rows,
            cols,
            p_sys,
            stride,
            data: vec![T::default(); prow * stride],
        }
    }

    /// Build from unpadded row-major values.
    pub fn from_dense(rows: usize, cols: usize, p_sys: usize, values: &[T]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        let mut m = Self::zeros(rows, cols, p_sys);
        for r in 0..rows {
            m.row_mut(r).copy_from_slice(&values[r * cols..(r + 1) * cols]);
        }
        Ok(m)
    }

    pub fn from_fn(rows: usize, cols: usize, p_sys: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(rows, cols, p_sys);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, f(r, c));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn p_sys(&self) -> usize {
        self.p_sys
    }

    pub fn padded_rows(&self) -> usize {
        self.data.len() / self.stride.max(1)
    }

    pub fn padded_cols(&self) -> usize {
        self.stride
    }

    pub fn row_blocks(&self) -> usize {
        self.rows.div_ceil(self.p_sys)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.stride + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        assert!(r < self.rows && c < self.cols, "({r},{c}) outside {}x{}", self.rows, self.cols);
        self.data[r * self.stride + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.stride..r * self.stride + self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let s = self.stride;
        let c = self.cols;
        &mut self.data[r * s..r * s + c]
    }

    pub fn to_dense(&self) -> Vec<T> {
        (0..self.rows).flat_map(|r| self.row(r).iter().copied()).collect()
    }

    /// True when every entry outside the logical shape is zero.
    pub fn padding_is_zero(&self) -> bool {
        let zero = T::default();
        self.data.iter().enumerate().all(|(i, v)| {
            let (r, c) = (i / self.stride, i % self.stride);
            (r < self.rows && c < self.cols) || *v == zero
        })
    }

    pub fn with_p_sys(&self, p_sys: usize) -> Self {
        let mut m = Self::zeros(self.rows, self.cols, p_sys);
        for r in 0..self.rows {
            m.row_mut(r).copy_from_slice(self.row(r));
        }
        m
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, self.p_sys, |r, c| self.get(c, r))
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> TileMatrix<U> {
        TileMatrix::from_fn(self.rows, self.cols, self.p_sys, |r, c| f(self.get(r, c)))
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn column_slice(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Self::from_fn(self.rows, width, self.p_sys, |r, c| self.get(r, start + c))
    }

    /// Rows `[start, start + height)` as a new matrix.
    pub fn row_slice(&self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows);
        Self::from_fn(height, self.cols, self.p_sys, |r, c| self.get(start + r, c))
    }

    pub fn set_column_slice(&mut self, start: usize, src: &Self) {
        assert_eq!(src.rows, self.rows);
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[start..start + src.cols];
            dst.copy_from_slice(src.row(r));
        }
    }
}

/// Right-hand operand with column blocks `j` and `j + 1` of each pair packed
/// into one multiplier word per (row, lane).
#[derive(Debug, Clone)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    p_sys: usize,
    pairs: usize,
    // [row][pair][lane]
    words: Vec<PackedOperand>,
}

impl PackedMatrix {
    pub fn new(b: &TileMatrix<i8>) -> Self {
        let p = b.p_sys;
        let pairs = b.cols.div_ceil(2 * p);
        let mut words = Vec::with_capacity(b.rows * pairs * p);
        for k in 0..b.rows {
            for pair in 0..pairs {
                for lane in 0..p {
                    let c0 = pair * 2 * p + lane;
                    let c1 = c0 + p;
                    let hi = if c0 < b.cols { b.get(k, c0) } else { 0 };
                    let lo = if c1 < b.cols { b.get(k, c1) } else { 0 };
                    words.push(pack_operands(hi, lo));
                }
            }
        }
        PackedMatrix {
            rows: b.rows,
            cols: b.cols,
            p_sys: p,
            pairs,
            words,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn col_pairs(&self) -> usize {
        self.pairs
    }

    fn word(&self, k: usize, pair: usize, lane: usize) -> PackedOperand {
        self.words[(k * self.pairs + pair) * self.p_sys + lane]
    }
}

/// One array pass: row block `row_block` of `a` against column pair `col_pair`
/// of `b` over inner indices `k_range`, accumulated into `out`.
///
/// `out` is the accumulator slab for this row block: `p_sys` rows of
/// `out_stride` entries, with column 0 aligned to column 0 of `b`.
pub fn bmm_block<A: DspOperand>(
    a: &TileMatrix<A>,
    b: &PackedMatrix,
    row_block: usize,
    col_pair: usize,
    k_range: std::ops::Range<usize>,
    out: &mut [i32],
    out_stride: usize,
) {
    let p = a.p_sys;
    debug_assert_eq!(p, b.p_sys);
    debug_assert!(k_range.end <= a.cols && a.cols == b.rows);
    let r0 = row_block * p;
    let base = col_pair * 2 * p;
    for lr in 0..p {
        let r = r0 + lr;
        if r >= a.rows {
            break;
        }
        let out_row = &mut out[lr * out_stride..(lr + 1) * out_stride];
        for k in k_range.clone() {
            let av = a.get(r, k).dsp();
            if av == 0 {
                continue;
            }
            for lane in 0..p {
                let prod = packed_multiply(av, b.word(k, col_pair, lane));
                let c0 = base + lane;
                if c0 < out_stride {
                    out_row[c0] += prod.hi;
                }
                if c0 + p < out_stride {
                    out_row[c0 + p] += prod.lo;
                }
            }
        }
    }
}

/// Exact integer product computed block by block: row blocks of `a` outer,
/// column pairs of `b` inner, full inner dimension per pass.
pub fn block_matmul<A: DspOperand>(
    a: &TileMatrix<A>,
    b: &TileMatrix<i8>,
    accumulate_into: Option<TileAccumulator>,
    exec: Execution,
) -> Result<TileAccumulator> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.p_sys != b.p_sys {
        return Err(Error::ShapeMismatch(format!(
            "array size {} vs {}",
            a.p_sys, b.p_sys
        )));
    }
    let mut acc = match accumulate_into {
        Some(acc) => {
            if acc.rows != a.rows || acc.cols != b.cols || acc.p_sys != a.p_sys {
                return Err(Error::ShapeMismatch(format!(
                    "accumulator {}x{} for a {}x{} product",
                    acc.rows, acc.cols, a.rows, b.cols
                )));
            }
            acc
        }
        None => TileAccumulator::zeros(a.rows, b.cols, a.p_sys),
    };
    let packed = PackedMatrix::new(b);
    let p = a.p_sys;
    let stride = acc.stride;
    let inner = a.cols;
    par::for_each_chunk_mut(&mut acc.data, p * stride, exec, |rb, slab| {
        for pair in 0..packed.pairs {
            bmm_block(a, &packed, rb, pair, 0..inner, slab, stride);
        }
    });
    Ok(acc)
}

impl TileAccumulator {
    /// Mutable slab of accumulator rows belonging to `row_block`.
    pub fn row_block_slab(&mut self, row_block: usize) -> (&mut [i32], usize) {
        let p = self.p_sys;
        let s = self.stride;
        (&mut self.data[row_block * p * s..(row_block + 1) * p * s], s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[i8], b: &[i8], m: usize, k: usize, n: usize) -> Vec<i32> {
        let mut out = vec![0i32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0i32;
                for t in 0..k {
                    s += a[i * k + t] as i32 * b[t * n + j] as i32;
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<i8> {
        (0..len).map(|_| rng.gen()).collect()
    }

    #[test]
    fn hand_example_two_by_two() {
        let a = TileMatrix::from_dense(2, 2, 2, &[1i8, 2, 3, 4]).unwrap();
        let b = TileMatrix::from_dense(2, 2, 2, &[5i8, 6, 7, 8]).unwrap();
        let c = block_matmul(&a, &b, None, Execution::Sequential).unwrap();
        assert_eq!(c.to_dense(), vec![19, 22, 43, 50]);
    }

    #[test]
    fn identity_preserves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k) = (197, 96);
        let av = random(&mut rng, m * k);
        let a = TileMatrix::from_dense(m, k, 32, &av).unwrap();
        let eye = TileMatrix::from_fn(k, k, 32, |r, c| i8::from(r == c));
        let c = block_matmul(&a, &eye, None, Execution::Parallel).unwrap();
        assert_eq!(c.to_dense(), av.iter().map(|&x| x as i32).collect::<Vec<_>>());
    }

    #[test]
    fn projection_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, k, n) = (197, 768, 64);
        let av = random(&mut rng, m * k);
        let bv = random(&mut rng, k * n);
        let a = TileMatrix::from_dense(m, k, 32, &av).unwrap();
        let b = TileMatrix::from_dense(k, n, 32, &bv).unwrap();
        let c = block_matmul(&a, &b, None, Execution::Parallel).unwrap();
        assert_eq!(c.to_dense(), naive(&av, &bv, m, k, n));
        assert!(c.padding_is_zero());
    }

    #[test]
    fn accumulates_into_existing() {
        let a = TileMatrix::from_dense(1, 1, 4, &[3i8]).unwrap();
        let b = TileMatrix::from_dense(1, 1, 4, &[-5i8]).unwrap();
        let init = TileAccumulator::from_dense(1, 1, 4, &[100]).unwrap();
        let c = block_matmul(&a, &b, Some(init), Execution::Sequential).unwrap();
        assert_eq!(c.to_dense(), vec![85]);
    }

    #[test]
    fn shape_errors() {
        let a = TileMatrix::<i8>::zeros(3, 4, 2);
        let b = TileMatrix::<i8>::zeros(5, 2, 2);
        assert!(matches!(block_matmul(&a, &b, None, Execution::Sequential), Err(Error::ShapeMismatch(_))));
        let b = TileMatrix::<i8>::zeros(4, 2, 4);
        assert!(block_matmul(&a, &b, None, Execution::Sequential).is_err());
        assert!(TileMatrix::from_dense(2, 2, 2, &[1i8, 2, 3]).is_err());
    }

    #[test]
    fn random_shapes_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..200 {
            let p = [8, 16, 32][case % 3];
            // keep most cases small and a few near the largest encoder shapes
            let (m, k, n) = if case % 50 == 0 {
                (257, 3072, rng.gen_range(1..40))
            } else {
                (rng.gen_range(1..120), rng.gen_range(1..300), rng.gen_range(1..150))
            };
            let av = random(&mut rng, m * k);
            let bv = random(&mut rng, k * n);
            let a = TileMatrix::from_dense(m, k, p, &av).unwrap();
            let b = TileMatrix::from_dense(k, n, p, &bv).unwrap();
            let c = block_matmul(&a, &b, None, Execution::Parallel).unwrap();
            assert_eq!(c.to_dense(), naive(&av, &bv, m, k, n), "case {case}: {m}x{k}x{n} p={p}");
        }
    }

    #[test]
    fn probability_operand() {
        let a = TileMatrix::from_dense(1, 3, 2, &[256u16, 128, 0]).unwrap();
        let b = TileMatrix::from_dense(3, 1, 2, &[-128i8, 127, 5]).unwrap();
        let c = block_matmul(&a, &b, None, Execution::Sequential).unwrap();
        assert_eq!(c.to_dense(), vec![256 * -128 + 128 * 127]);
    }

    #[test]
    fn padding_geometry() {
        let m = TileMatrix::<i8>::zeros(197, 64, 32);
        assert_eq!((m.padded_rows(), m.padded_cols(), m.row_blocks()), (224, 64, 7));
    }
}
