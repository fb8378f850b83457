//! Absolute-mean ternary quantization and the packed 2-bit storage codec.
//!
//! A weight matrix `W` is mapped to codes in `{-1, 0, +1}` by dividing by
//! its absolute mean `gamma`, rounding to the nearest integer (half away
//! from zero) and clipping to `[-1, 1]`. The effective weight at kernel
//! time is `gamma * code`; `gamma` is stored once per tensor.
//!
//! Codec (normative, bit-exact): 2 bits per code, `00 -> 0`, `01 -> +1`,
//! `10 -> -1`, `11` reserved/invalid. Four codes per byte, code `i` of a
//! byte occupying bits `2i..2i+1`, elements in row-major order, zero-code
//! padding in the final byte.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Quantizer settings. `epsilon` guards the division when `gamma` is zero.
#[derive(Debug, Clone)]
pub struct QuantConfig {
    pub epsilon: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6 }
    }
}

/// 2-bit packed ternary matrix with a per-tensor scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryTensor<T: Scalar> {
    shape: [usize; 2],
    codes: Vec<u8>,
    gamma: T,
    name: String,
}

impl<T: Scalar> TernaryTensor<T> {
    /// Assemble from already-validated parts. `codes` must be the packed
    /// form of `shape[0] * shape[1]` ternary values.
    pub fn from_parts(shape: [usize; 2], codes: Vec<u8>, gamma: T, name: String) -> Result<Self> {
        let numel = shape[0] * shape[1];
        if codes.len() != packed_len(numel) {
            return Err(Error::Codec(format!(
                "packed length {} does not match shape {:?} (expected {})",
                codes.len(),
                shape,
                packed_len(numel)
            )));
        }
        if !gamma.is_finite() || gamma < T::zero() {
            return Err(Error::Numeric(format!(
                "gamma must be finite and >= 0, got {gamma}"
            )));
        }
        // Reject reserved codes and non-zero padding up front.
        unpack_codes(&codes, numel)?;
        Ok(Self { shape, codes, gamma, name })
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn numel(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Packed code bytes, `ceil(numel / 4)` of them.
    pub fn packed(&self) -> &[u8] {
        &self.codes
    }

    /// Decode every code into `{-1, 0, +1}` in row-major order.
    pub fn unpack(&self) -> Result<Vec<i8>> {
        unpack_codes(&self.codes, self.numel())
    }

    /// Fraction of nonzero codes.
    pub fn fraction_nonzero(&self) -> Result<f64> {
        let codes = self.unpack()?;
        if codes.is_empty() {
            return Ok(0.0);
        }
        Ok(codes.iter().filter(|&&c| c != 0).count() as f64 / codes.len() as f64)
    }
}

/// Packed byte length for `numel` ternary codes.
pub fn packed_len(numel: usize) -> usize {
    numel.div_ceil(4)
}

/// Absolute mean of the tensor: `sum(|w|) / numel`, accumulated in `f64`
/// in row-major order. A zero tensor yields 0.
pub fn absmean_scale<T: Scalar>(w: &DenseTensor<T>) -> Result<f64> {
    if w.numel() == 0 {
        return Err(Error::Dimension("absmean_scale: empty tensor".into()));
    }
    let sum: f64 = w.data().iter().map(|v| v.wide().abs()).sum();
    Ok(sum / w.numel() as f64)
}

/// Round half away from zero. `f64::round` already has these semantics;
/// the wrapper exists to pin the tie rule by name.
#[inline]
fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Quantize a 2-D weight matrix to ternary codes with an absolute-mean
/// scale. The scale is computed and applied in `f64`; the stored `gamma`
/// is that value rounded into the tensor's scalar type.
pub fn quantize_ternary<T: Scalar>(
    w: &DenseTensor<T>,
    cfg: &QuantConfig,
) -> Result<TernaryTensor<T>> {
    if w.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "quantize_ternary expects a 2-D tensor, got shape {:?}",
            w.shape()
        )));
    }
    if let Some(idx) = w.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "quantize_ternary: non-finite input at flat index {idx}"
        )));
    }
    let gamma = absmean_scale(w)?;
    let denom = gamma + cfg.epsilon;
    let codes: Vec<i8> = w
        .data()
        .iter()
        .map(|v| {
            let q = round_half_away(v.wide() / denom);
            q.clamp(-1.0, 1.0) as i8
        })
        .collect();
    let packed = pack_codes(&codes)?;
    TernaryTensor::from_parts(
        [w.shape()[0], w.shape()[1]],
        packed,
        T::from_wide(gamma),
        String::new(),
    )
}

/// Restore the dense form: `out[i][j] = gamma * code[i][j]`.
pub fn dequantize<T: Scalar>(t: &TernaryTensor<T>) -> Result<DenseTensor<T>> {
    let codes = t.unpack()?;
    let gamma = t.gamma();
    let data: Vec<T> = codes
        .iter()
        .map(|&c| match c {
            0 => T::zero(),
            1 => gamma,
            _ => -gamma,
        })
        .collect();
    DenseTensor::new(vec![t.rows(), t.cols()], data)
}

/// Pack ternary values four to a byte. Values outside `{-1, 0, +1}` are
/// rejected.
pub fn pack_codes(values: &[i8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; packed_len(values.len())];
    for (i, &v) in values.iter().enumerate() {
        let bits = match v {
            0 => 0b00u8,
            1 => 0b01,
            -1 => 0b10,
            _ => {
                return Err(Error::Parameter(format!(
                    "pack_codes: value {v} at index {i} is not ternary"
                )))
            }
        };
        out[i / 4] |= bits << (2 * (i % 4));
    }
    Ok(out)
}

/// Unpack `count` codes. The reserved bit pattern `11` and non-zero
/// padding both fail with the offending byte offset.
pub fn unpack_codes(bytes: &[u8], count: usize) -> Result<Vec<i8>> {
    if bytes.len() != packed_len(count) {
        return Err(Error::Codec(format!(
            "unpack_codes: {} bytes cannot hold exactly {} codes (expected {})",
            bytes.len(),
            count,
            packed_len(count)
        )));
    }
    let mut out = Vec::with_capacity(count);
    for (offset, &byte) in bytes.iter().enumerate() {
        for slot in 0..4 {
            let idx = offset * 4 + slot;
            let bits = (byte >> (2 * slot)) & 0b11;
            if idx >= count {
                if bits != 0 {
                    return Err(Error::Codec(format!(
                        "unpack_codes: non-zero padding in final byte at offset {offset}"
                    )));
                }
                continue;
            }
            out.push(match bits {
                0b00 => 0,
                0b01 => 1,
                0b10 => -1,
                _ => {
                    return Err(Error::Codec(format!(
                        "unpack_codes: reserved code 11 at byte offset {offset}"
                    )))
                }
            });
        }
    }
    Ok(out)
}
