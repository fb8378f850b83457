//! Sparse-ternary matrix multiply and exact operation accounting.
//!
//! The kernel computes `Y = (X (.) M) W~^T` while skipping masked
//! activation columns entirely; ternary weights reduce the inner loop to
//! adds/subtracts with one scale multiply per output element. Accounting
//! still charges one MAC per kept `(d, j)` pair so dense/sparse
//! comparisons stay proportional.
//!
//! MAC convention: one MAC is one multiply+add pair; TOPs are reported as
//! `2 * MACs / 1e12`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gate::{apply_mask, keep_count, GateMask};
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::{matmul_ref, DenseTensor};
use crate::ternary::{dequantize, TernaryTensor};

/// Multiply-accumulate counter with a per-layer breakdown.
///
/// `macs` is always the sum of `by_layer` values and never decreases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OpsCounter {
    macs: u64,
    by_layer: BTreeMap<String, u64>,
}

impl OpsCounter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charge `macs` multiply-accumulates to `layer`.
    pub fn add(&mut self, layer: &str, macs: u64) {
        self.macs += macs;
        *self.by_layer.entry(layer.to_string()).or_insert(0) += macs;
    }

    pub fn total(&self) -> u64 {
        self.macs
    }

    pub fn by_layer(&self) -> &BTreeMap<String, u64> {
        &self.by_layer
    }

    /// Sum of all layer entries whose name satisfies `pred`.
    pub fn total_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.by_layer
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v)
            .sum()
    }
}

/// Tera-operations for a MAC count under the 2-ops-per-MAC convention.
pub fn tops_from_macs(macs: u64) -> f64 {
    2.0 * macs as f64 / 1e12
}

/// Gated ternary linear kernel.
///
/// `x` is `N x D`, `m` a mask over `x`, `w` a ternary `M x D` matrix.
/// Output is `N x M` with
/// `out[i][j] = gamma * sum_{d in kept(i)} x[i][d] * code[j][d]`,
/// accumulated in `f64` in ascending `d` order (bit-exact contract).
/// The counter is charged `sum_i |kept(i)| * M` under the weight's name.
pub fn sparse_ternary_matmul<T: Scalar>(
    x: &DenseTensor<T>,
    m: &GateMask,
    w: &TernaryTensor<T>,
    counter: &mut OpsCounter,
) -> Result<DenseTensor<T>> {
    if x.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "sparse_ternary_matmul expects 2-D activations, got {:?}",
            x.shape()
        )));
    }
    if x.shape() != m.shape() {
        return Err(Error::Dimension(format!(
            "mask shape {:?} does not match activations {:?}",
            m.shape(),
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (rows_w, d_w) = (w.rows(), w.cols());
    if d_w != d {
        return Err(Error::Dimension(format!(
            "weight shape {:?} does not match activations {:?}",
            [rows_w, d_w],
            x.shape()
        )));
    }
    let codes = w.unpack()?;
    let gamma = w.gamma().wide();

    let mut out = vec![T::zero(); n * rows_w];
    let mut kept_total = 0u64;
    // Gathering the kept activations once per row keeps the inner loop
    // branchless (code * value; adding a signed zero is an exact no-op,
    // so this is bit-identical to skipping zero codes).
    let mut gathered: Vec<f64> = Vec::new();
    for i in 0..n {
        let xi = x.row(i);
        let kept = m.kept(i);
        kept_total += kept.len() as u64;
        gathered.clear();
        gathered.extend(kept.iter().map(|&col| xi[col].wide()));
        for j in 0..rows_w {
            let wj = &codes[j * d..(j + 1) * d];
            let mut acc = 0.0f64;
            for (&col, &xv) in kept.iter().zip(&gathered) {
                acc += wj[col] as f64 * xv;
            }
            out[i * rows_w + j] = T::from_wide(gamma * acc);
        }
    }
    counter.add(w.name(), kept_total * rows_w as u64);
    DenseTensor::new(vec![n, rows_w], out)
}

/// Oracle path: mask the activations, dequantize the weights, multiply
/// with the reference kernel. Mathematically identical to
/// [`sparse_ternary_matmul`].
pub fn dense_ref<T: Scalar>(
    x: &DenseTensor<T>,
    m: &GateMask,
    w: &TernaryTensor<T>,
) -> Result<DenseTensor<T>> {
    let masked = apply_mask(x, m)?;
    let dense_w = dequantize(w)?;
    matmul_ref(&masked, &dense_w)
}

/// Closed-form MAC total for one image forward pass at sparsity `s`.
///
/// Sums every matrix product in the model: patch embedding, the QKV and
/// attention output projections, the attention score and value products,
/// and both MLP linears. Gated (ternary-eligible) linears scale with
/// `keep_count(s, in_dim)`; the attention batched products and the patch
/// embedding are full precision and never gated. The result equals the
/// live [`OpsCounter`] total of an actual forward pass exactly.
pub fn count_model_ops(cfg: &ModelConfig, s: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Parameter(format!(
            "sparsity must lie in [0, 1), got {s}"
        )));
    }
    let n = cfg.tokens() as u64;
    let n_patches = n - 1;
    let d = cfg.dim as u64;
    let h_mlp = cfg.mlp_hidden() as u64;
    let patch_in = cfg.patch_len() as u64;

    let kc_d = keep_count(s, cfg.dim) as u64;
    let kc_mlp = keep_count(s, cfg.mlp_hidden()) as u64;

    let mut total = n_patches * patch_in * d; // patch embedding
    for _ in 0..cfg.depth {
        total += n * kc_d * (3 * d); // qkv projection
        total += n * n * d; // attention scores (all heads)
        total += n * n * d; // attention x values (all heads)
        total += n * kc_d * d; // attention output projection
        total += n * kc_d * h_mlp; // mlp up
        total += n * kc_mlp * d; // mlp down
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::topk_mask;
    use crate::tensor::{randn, Prng};
    use crate::ternary::{pack_codes, quantize_ternary, QuantConfig};

    fn ternary_from(codes: &[i8], shape: [usize; 2], gamma: f32, name: &str) -> TernaryTensor<f32> {
        TernaryTensor::from_parts(shape, pack_codes(codes).unwrap(), gamma, name.to_string())
            .unwrap()
    }

    #[test]
    fn scalar_example() {
        let x = DenseTensor::from_rows(&[vec![1.0f32, 2.0, 3.0, 4.0]]).unwrap();
        let m = GateMask::from_kept([1, 4], vec![vec![1, 3]], 0.5).unwrap();
        let w = ternary_from(&[1, -1, 0, 1], [1, 4], 0.5, "w");
        let mut counter = OpsCounter::new();
        let y = sparse_ternary_matmul(&x, &m, &w, &mut counter).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(counter.total(), 2);
    }

    #[test]
    fn all_ones_weight_at_zero_sparsity_is_row_sum() {
        let x = DenseTensor::from_rows(&[vec![1.0f32, 2.0, 3.0], vec![-1.0, 0.5, 0.5]]).unwrap();
        let m = topk_mask(&x, 0.0).unwrap();
        let w = ternary_from(&[1, 1, 1, 1, 1, 1], [2, 3], 1.0, "w");
        let mut counter = OpsCounter::new();
        let y = sparse_ternary_matmul(&x, &m, &w, &mut counter).unwrap();
        assert_eq!(y.data(), &[6.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn counter_matches_kept_count_arithmetic() {
        let x: DenseTensor<f32> = randn(&mut Prng::new(1), &[4, 8]).unwrap();
        let m = topk_mask(&x, 0.5).unwrap();
        let w = quantize_ternary(
            &randn::<f32>(&mut Prng::new(2), &[8, 8]).unwrap(),
            &QuantConfig::default(),
        )
        .unwrap()
        .with_name("layer");
        let mut counter = OpsCounter::new();
        sparse_ternary_matmul(&x, &m, &w, &mut counter).unwrap();
        assert_eq!(counter.total(), 4 * 4 * 8);
        assert_eq!(counter.by_layer()["layer"], 128);
    }

    #[test]
    fn kernel_matches_dense_oracle() {
        let mut prng = Prng::new(33);
        for s in [0.0, 0.25, 0.5] {
            for _ in 0..40 {
                let n = 1 + prng.below(16);
                let d = 1 + prng.below(16);
                let mm = 1 + prng.below(16);
                let x: DenseTensor<f32> = randn(&mut prng, &[n, d]).unwrap();
                let w = quantize_ternary(
                    &randn::<f32>(&mut prng, &[mm, d]).unwrap(),
                    &QuantConfig::default(),
                )
                .unwrap();
                let m = topk_mask(&x, s).unwrap();
                let mut counter = OpsCounter::new();
                let fast = sparse_ternary_matmul(&x, &m, &w, &mut counter).unwrap();
                let slow = dense_ref(&x, &m, &w).unwrap();
                for (a, b) in fast.data().iter().zip(slow.data()) {
                    let tol = 1e-5 * b.abs().max(1.0);
                    assert!((a - b).abs() <= tol, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zero_gamma_zeroes_both_paths() {
        let x: DenseTensor<f32> = randn(&mut Prng::new(5), &[3, 6]).unwrap();
        let w = ternary_from(&[1; 12], [2, 6], 0.0, "w");
        let m = topk_mask(&x, 0.25).unwrap();
        let mut counter = OpsCounter::new();
        let fast = sparse_ternary_matmul(&x, &m, &w, &mut counter).unwrap();
        let slow = dense_ref(&x, &m, &w).unwrap();
        assert!(fast.data().iter().all(|&v| v == 0.0));
        assert!(slow.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x: DenseTensor<f32> = randn(&mut Prng::new(6), &[2, 4]).unwrap();
        let m = topk_mask(&x, 0.0).unwrap();
        let w = ternary_from(&[1, 0, -1], [1, 3], 1.0, "w");
        let mut counter = OpsCounter::new();
        assert!(sparse_ternary_matmul(&x, &m, &w, &mut counter).is_err());
    }

    #[test]
    fn single_ternary_linear_formula() {
        // One linear alone, N=4, D=8, M=8, s=0.5: 4 * 4 * 8 = 128.
        assert_eq!(4 * keep_count(0.5, 8) * 8, 128);
    }
}
