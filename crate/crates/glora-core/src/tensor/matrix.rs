//! Dense row-major matrices and the arithmetic kernels everything else runs on.
//!
//! The same kernels back both the pure evaluation paths and the tape's forward
//! pass, so a value computed with or without gradient recording is bit-identical.
//! Accumulations are sequential in row-major order; results are reproducible
//! bit-for-bit for a fixed input.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Element width of a run, recorded per tensor when persisted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemType {
    F32,
    F64,
}

impl ElemType {
    pub fn name(self) -> &'static str {
        match self {
            ElemType::F32 => "f32",
            ElemType::F64 => "f64",
        }
    }
}

/// Floating-point element of a [`DenseMatrix`]. Implemented for `f32` and `f64`;
/// the choice is uniform per run.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const ELEM: ElemType;
    const BYTES: usize;

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw IEEE-754 bits, widened to u64, for bitwise comparisons.
    fn bit_pattern(self) -> u64;
}

impl Scalar for f32 {
    const ELEM: ElemType = ElemType::F32;
    const BYTES: usize = 4;

    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("f32 needs 4 bytes"))
    }
    fn bit_pattern(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    const ELEM: ElemType = ElemType::F64;
    const BYTES: usize = 8;

    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("f64 needs 8 bytes"))
    }
    fn bit_pattern(self) -> u64 {
        self.to_bits()
    }
}

/// How a right-hand operand lines up against a left operand in the broadcast
/// ops. Only the three shapes the adapter formula needs are supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastShape {
    /// Same rows and columns.
    Full,
    /// `rows x 1`, replicated across columns.
    Column,
    /// `1 x 1`, replicated everywhere.
    Scalar,
}

/// A 2-D array of `T` with explicit row/column counts, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Contract(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Convenience constructor for literals in tests and examples.
    pub fn from_rows(rows: &[&[T]]) -> Self {
        assert!(
            !rows.is_empty() && !rows[0].is_empty(),
            "from_rows needs data"
        );
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Column vector from a slice.
    pub fn column(values: &[T]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Elements drawn i.i.d. from a centered Gaussian with the given standard
    /// deviation, in row-major order.
    pub fn gaussian(rows: usize, cols: usize, std_dev: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            T::of_f64(std_dev * rng.sample::<f64, _>(StandardNormal))
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Standard matrix product.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let lhs_row = i * rhs.cols;
                let rhs_row = k * rhs.cols;
                for j in 0..rhs.cols {
                    out.data[lhs_row + j] = out.data[lhs_row + j] + a * rhs.data[rhs_row + j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Classifies `rhs` against `self` under the three supported broadcast
    /// shapes, or reports the mismatch from the named operation.
    pub fn broadcast_shape(&self, rhs: &Self, op: &'static str) -> Result<BroadcastShape> {
        if rhs.rows == self.rows && rhs.cols == self.cols {
            Ok(BroadcastShape::Full)
        } else if rhs.rows == 1 && rhs.cols == 1 {
            Ok(BroadcastShape::Scalar)
        } else if rhs.rows == self.rows && rhs.cols == 1 {
            Ok(BroadcastShape::Column)
        } else {
            Err(Error::shape(op, self.shape(), rhs.shape()))
        }
    }

    /// Elementwise product with `rhs` expanded along its broadcast axes.
    pub fn broadcast_mul(&self, rhs: &Self) -> Result<Self> {
        let shape = self.broadcast_shape(rhs, "broadcast_mul")?;
        Ok(self.broadcast_zip(rhs, shape, |a, b| a * b))
    }

    /// Elementwise sum with `rhs` expanded along its broadcast axes.
    pub fn add_broadcast(&self, rhs: &Self) -> Result<Self> {
        let shape = self.broadcast_shape(rhs, "add_broadcast")?;
        Ok(self.broadcast_zip(rhs, shape, |a, b| a + b))
    }

    fn broadcast_zip(&self, rhs: &Self, shape: BroadcastShape, f: impl Fn(T, T) -> T) -> Self {
        match shape {
            BroadcastShape::Full => DenseMatrix {
                rows: self.rows,
                cols: self.cols,
                data: self
                    .data
                    .iter()
                    .zip(rhs.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            },
            BroadcastShape::Scalar => {
                let b = rhs.data[0];
                self.map(|a| f(a, b))
            }
            BroadcastShape::Column => {
                Self::from_fn(self.rows, self.cols, |i, j| f(self.get(i, j), rhs.data[i]))
            }
        }
    }

    /// Exact-shape elementwise sum.
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add", self.shape(), rhs.shape()));
        }
        Ok(self.broadcast_zip(rhs, BroadcastShape::Full, |a, b| a + b))
    }

    /// Exact-shape elementwise difference.
    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("sub", self.shape(), rhs.shape()));
        }
        Ok(self.broadcast_zip(rhs, BroadcastShape::Full, |a, b| a - b))
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| k * v)
    }

    /// Rectangular window copy.
    pub fn slice(&self, row0: usize, n_rows: usize, col0: usize, n_cols: usize) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 || row0 + n_rows > self.rows || col0 + n_cols > self.cols {
            return Err(Error::Contract(format!(
                "slice [{row0}..{}, {col0}..{}] out of bounds for {}x{}",
                row0 + n_rows,
                col0 + n_cols,
                self.rows,
                self.cols,
            )));
        }
        Ok(Self::from_fn(n_rows, n_cols, |i, j| {
            self.get(row0 + i, col0 + j)
        }))
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of zero parts".into()))?;
        let rows = first.rows;
        let mut total_cols = 0usize;
        for p in parts {
            if p.rows != rows {
                return Err(Error::shape("concat_cols", (rows, first.cols), p.shape()));
            }
            total_cols += p.cols;
        }
        let mut out = Self::zeros(rows, total_cols);
        let mut base = 0usize;
        for p in parts {
            for i in 0..rows {
                for j in 0..p.cols {
                    out.set(i, base + j, p.get(i, j));
                }
            }
            base += p.cols;
        }
        Ok(out)
    }

    /// Materialize a broadcast operand at full size: accepts `rows x cols`,
    /// `rows x 1`, or `1 x 1` and tiles to `rows x cols`.
    pub fn tile_to(&self, rows: usize, cols: usize) -> Result<Self> {
        if self.rows == rows && self.cols == cols {
            Ok(self.clone())
        } else if self.rows == 1 && self.cols == 1 {
            let v = self.data[0];
            Ok(Self::from_fn(rows, cols, |_, _| v))
        } else if self.rows == rows && self.cols == 1 {
            Ok(Self::from_fn(rows, cols, |i, _| self.data[i]))
        } else {
            Err(Error::shape("tile_to", (rows, cols), self.shape()))
        }
    }

    /// Unpack samples of `tokens * dim` stacked features into per-token columns:
    /// `(tokens*dim) x n` becomes `dim x (n*tokens)`, sample-major, where input
    /// rows `[t*dim, (t+1)*dim)` of sample `j` land in output column `j*tokens + t`.
    pub fn split_tokens(&self, tokens: usize, dim: usize) -> Result<Self> {
        if tokens * dim != self.rows {
            return Err(Error::Contract(format!(
                "split_tokens: {} rows cannot hold {tokens} tokens of dim {dim}",
                self.rows
            )));
        }
        let n = self.cols;
        Ok(Self::from_fn(dim, n * tokens, |r, c| {
            let sample = c / tokens;
            let token = c % tokens;
            self.get(token * dim + r, sample)
        }))
    }

    /// Inverse of [`split_tokens`](Self::split_tokens).
    pub fn merge_tokens(&self, tokens: usize, dim: usize) -> Result<Self> {
        if self.rows != dim || !self.cols.is_multiple_of(tokens) {
            return Err(Error::Contract(format!(
                "merge_tokens: {}x{} is not {dim} rows with a multiple of {tokens} columns",
                self.rows, self.cols
            )));
        }
        let n = self.cols / tokens;
        Ok(Self::from_fn(tokens * dim, n, |r, c| {
            let token = r / dim;
            let row = r % dim;
            self.get(row, c * tokens + token)
        }))
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// GELU under the tanh approximation.
    pub fn gelu(&self) -> Self {
        self.map(gelu_value)
    }

    /// Softmax along each row, with per-row max subtraction.
    pub fn row_softmax(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out.data[i * self.cols + j] = e;
                denom = denom + e;
            }
            for j in 0..self.cols {
                out.data[i * self.cols + j] = out.data[i * self.cols + j] / denom;
            }
        }
        out
    }

    /// Sum of all elements, row-major order.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of_f64(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every element has identical bits.
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.bit_pattern() == b.bit_pattern())
    }

    /// Largest absolute elementwise difference, as f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn gelu_value<T: Scalar>(x: T) -> T {
    // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::of_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::of_f64(0.044_715);
    let half = T::of_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::of_f64(0.797_884_560_802_865_4);
    let k = T::of_f64(0.044_715);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Mean-squared error between two same-shape matrices.
pub fn mse<T: Scalar>(pred: &DenseMatrix<T>, target: &DenseMatrix<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse", pred.shape(), target.shape()));
    }
    let mut acc = T::zero();
    for (a, b) in pred.data().iter().zip(target.data().iter()) {
        let d = *a - *b;
        acc = acc + d * d;
    }
    Ok(acc / T::of_f64(pred.len() as f64))
}

/// Mean softmax cross-entropy over columns of `logits` (classes are rows,
/// samples are columns).
pub fn softmax_cross_entropy<T: Scalar>(logits: &DenseMatrix<T>, labels: &[usize]) -> Result<T> {
    if labels.len() != logits.cols() {
        return Err(Error::Contract(format!(
            "softmax_cross_entropy: {} labels for {} columns",
            labels.len(),
            logits.cols()
        )));
    }
    let classes = logits.rows();
    let mut acc = T::zero();
    for (j, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Contract(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let mut max = T::neg_infinity();
        for i in 0..classes {
            max = max.max(logits.get(i, j));
        }
        let mut denom = T::zero();
        for i in 0..classes {
            denom = denom + (logits.get(i, j) - max).exp();
        }
        acc = acc + (denom.ln() + max - logits.get(label, j));
    }
    Ok(acc / T::of_f64(labels.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m64(rows: &[&[f64]]) -> DenseMatrix<f64> {
        DenseMatrix::from_rows(rows)
    }

    /// Independent triple-loop product for cross-checking `matmul`.
    fn naive_matmul(a: &DenseMatrix<f64>, b: &DenseMatrix<f64>) -> DenseMatrix<f64> {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let x = m64(&[&[3.0], &[4.0]]);
        let y = DenseMatrix::identity(2).matmul(&x).unwrap();
        assert!(y.bits_eq(&x));
    }

    #[test]
    fn matmul_hand_value() {
        let a = m64(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m64(&[&[5.0], &[6.0]]);
        let y = a.matmul(&b).unwrap();
        assert_eq!(y, m64(&[&[17.0], &[39.0]]));
        assert_eq!(y, naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_shape_error() {
        let a = DenseMatrix::<f64>::zeros(2, 3);
        let b = DenseMatrix::<f64>::zeros(4, 1);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x1"), "got: {msg}");
    }

    #[test]
    fn broadcast_mul_identity_and_column() {
        let a = m64(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let one = m64(&[&[1.0]]);
        assert!(a.broadcast_mul(&one).unwrap().bits_eq(&a));

        let col = m64(&[&[2.0], &[10.0]]);
        let y = a.broadcast_mul(&col).unwrap();
        assert_eq!(y, m64(&[&[2.0, 4.0], &[30.0, 40.0]]));
    }

    #[test]
    fn broadcast_mul_shape_error() {
        let a = DenseMatrix::<f64>::zeros(2, 2);
        let b = DenseMatrix::<f64>::zeros(3, 1);
        assert!(a.broadcast_mul(&b).is_err());
    }

    #[test]
    fn add_broadcast_cases() {
        let a = m64(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert!(a
            .add_broadcast(&DenseMatrix::zeros(2, 2))
            .unwrap()
            .bits_eq(&a));

        let col = m64(&[&[10.0], &[20.0]]);
        assert_eq!(
            a.add_broadcast(&col).unwrap(),
            m64(&[&[11.0, 12.0], &[23.0, 24.0]])
        );

        let scalar = m64(&[&[1.0]]);
        let z = DenseMatrix::<f64>::zeros(2, 2);
        assert_eq!(
            z.add_broadcast(&scalar).unwrap(),
            m64(&[&[1.0, 1.0], &[1.0, 1.0]])
        );
    }

    proptest::proptest! {
        /// Broadcast ops equal their explicitly tiled counterparts, bitwise.
        #[test]
        fn broadcast_equals_tiled(
            rows in 1usize..6,
            cols in 1usize..6,
            shape in 0usize..3,
            seed in 0u64..1000,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DenseMatrix::<f64>::gaussian(rows, cols, 1.0, &mut rng);
            let b = match shape {
                0 => DenseMatrix::<f64>::gaussian(rows, cols, 1.0, &mut rng),
                1 => DenseMatrix::<f64>::gaussian(rows, 1, 1.0, &mut rng),
                _ => DenseMatrix::<f64>::gaussian(1, 1, 1.0, &mut rng),
            };
            let tiled = b.tile_to(rows, cols).unwrap();
            proptest::prop_assert!(a
                .broadcast_mul(&b)
                .unwrap()
                .bits_eq(&a.broadcast_mul(&tiled).unwrap()));
            proptest::prop_assert!(a
                .add_broadcast(&b)
                .unwrap()
                .bits_eq(&a.add_broadcast(&tiled).unwrap()));
        }

        /// (A + B) C == A C + B C on small random matrices.
        #[test]
        fn matmul_distributes_over_add(
            m in 1usize..6,
            k in 1usize..6,
            n in 1usize..6,
            seed in 0u64..1000,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = DenseMatrix::<f64>::gaussian(m, k, 1.0, &mut rng);
            let b = DenseMatrix::<f64>::gaussian(m, k, 1.0, &mut rng);
            let c = DenseMatrix::<f64>::gaussian(k, n, 1.0, &mut rng);
            let lhs = a.add(&b).unwrap().matmul(&c).unwrap();
            let rhs = a.matmul(&c).unwrap().add(&b.matmul(&c).unwrap()).unwrap();
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }

        /// Token unpack/pack are exact inverses.
        #[test]
        fn token_split_merge_roundtrip(
            tokens in 1usize..5,
            dim in 1usize..5,
            n in 1usize..5,
            seed in 0u64..1000,
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = DenseMatrix::<f64>::gaussian(tokens * dim, n, 1.0, &mut rng);
            let roundtrip =
                x.split_tokens(tokens, dim).unwrap().merge_tokens(tokens, dim).unwrap();
            proptest::prop_assert!(roundtrip.bits_eq(&x));
        }
    }

    #[test]
    fn token_split_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::<f64>::gaussian(6, 5, 1.0, &mut rng); // 3 tokens of dim 2
        let split = x.split_tokens(3, 2).unwrap();
        assert_eq!(split.shape(), (2, 15));
        // Sample 4, token 1 occupies rows [2, 4) of column 4.
        assert_eq!(split.get(0, 4 * 3 + 1), x.get(2, 4));
        assert!(split.merge_tokens(3, 2).unwrap().bits_eq(&x));
    }

    #[test]
    fn row_softmax_rows_sum_to_one() {
        let s = m64(&[&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]]).row_softmax();
        for i in 0..2 {
            let total: f64 = (0..3).map(|j| s.get(i, j)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        // Degenerate single-column softmax is exactly one.
        let one = m64(&[&[42.0]]).row_softmax();
        assert_eq!(one.get(0, 0), 1.0);
    }

    #[test]
    fn cross_entropy_matches_direct_log() {
        let logits = m64(&[&[2.0, 0.0], &[0.5, 1.0]]);
        let loss = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        let col = |j: usize, i: usize| logits.get(i, j);
        let direct = |j: usize, label: usize| {
            let denom = (col(j, 0).exp() + col(j, 1).exp()).ln();
            denom - col(j, label)
        };
        let expect = 0.5 * (direct(0, 0) + direct(1, 1));
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn mse_basic() {
        let a = m64(&[&[1.0, 2.0]]);
        let b = m64(&[&[0.0, 4.0]]);
        assert!((mse(&a, &b).unwrap() - 2.5).abs() < 1e-15);
    }
}
