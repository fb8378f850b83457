//! Dense-tensor substrate: shapes, seeded random generation, and the
//! reference matrix multiply used as the oracle for every optimized kernel.
//!
//! All operations are pure functions over immutable inputs. Dot products
//! accumulate in `f64` and round once into the storage scalar, so results
//! do not depend on any reduction-order freedom.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense tensor with an explicit shape.
///
/// Invariant: `data.len() == shape.iter().product()` and all values are
/// finite after any public operation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape must be nonempty with all dims >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self { shape, data })
    }

    /// All-zeros tensor.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![T::zero(); numel])
    }

    /// Build a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Dimension("from_rows: empty input".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("from_rows: ragged rows".into()));
        }
        let data: Vec<T> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as 2-D (first dim).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns when viewed as 2-D (product of trailing dims).
    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Borrow row `i` of a logically 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Element access for 2-D tensors.
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise into another scalar type (via f64).
    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_wide(v.wide())).collect(),
        }
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Elementwise difference.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Multiply every element by a scalar.
    pub fn scale(&self, c: T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Reference matrix multiply with a transposed second operand.
///
/// `a` is `N x D`, `b_t` is `M x D`; the result is `N x M` with
/// `out[i][j] = sum_d a[i][d] * b_t[j][d]`, each dot product accumulated in
/// `f64` in ascending `d` order and then rounded to the storage scalar.
pub fn matmul_ref<T: Scalar>(a: &DenseTensor<T>, b_t: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    if a.shape().len() != 2 || b_t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul_ref expects 2-D operands, got {:?} and {:?}",
            a.shape(),
            b_t.shape()
        )));
    }
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let (m, d2) = (b_t.shape()[0], b_t.shape()[1]);
    if d != d2 {
        return Err(Error::Dimension(format!(
            "matmul_ref inner dimensions disagree: {:?} vs {:?}",
            a.shape(),
            b_t.shape()
        )));
    }
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..m {
            let bj = b_t.row(j);
            let mut acc = 0.0f64;
            for k in 0..d {
                acc += ai[k].wide() * bj[k].wide();
            }
            out[i * m + j] = T::from_wide(acc);
        }
    }
    DenseTensor::new(vec![n, m], out)
}

/// Deterministic pseudo-random generator: xoshiro256++ seeded via SplitMix64.
///
/// The state transition is pure 64-bit integer arithmetic, so the stream is
/// identical for a given seed on every platform. Normal samples use the
/// basic Box-Muller transform: each draw consumes exactly two uniform
/// variates `u1, u2` and returns `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`
/// (the sine branch is discarded; no caching).
#[derive(Debug, Clone)]
pub struct Prng {
    state: [u64; 4],
}

impl Prng {
    /// Seed the generator. The four xoshiro words come from iterating
    /// SplitMix64 on the seed, per the generator authors' recommendation.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut next_sm = || {
            sm = sm.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        Self {
            state: [next_sm(), next_sm(), next_sm(), next_sm()],
        }
    }

    /// Next 64 random bits (xoshiro256++).
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        // 1 - u1 lies in (0, 1], so the log is finite.
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard normal truncated to [-2, 2] by rejection.
    pub fn truncated_normal(&mut self) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z;
            }
        }
    }
}

/// Tensor of standard-normal samples, deterministic per seed state.
pub fn randn<T: Scalar>(prng: &mut Prng, shape: &[usize]) -> Result<DenseTensor<T>> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Dimension(format!(
            "randn shape must be nonempty with all dims >= 1, got {shape:?}"
        )));
    }
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_wide(prng.normal())).collect();
    DenseTensor::new(shape.to_vec(), data)
}
