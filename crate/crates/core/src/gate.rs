//! Per-token top-k activation gating and the training-time sparsity
//! sampling schedule.
//!
//! Sparsity `s` is the fraction of entries zeroed; the keep fraction is
//! `1 - s`. The mask is computed per row (per token) over the feature
//! columns: each row keeps its `max(1, round((1 - s) * D))` largest-
//! magnitude entries, ties broken toward the lower column index.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Prng};

/// Per-row binary keep-mask at a given sparsity level.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    shape: [usize; 2],
    /// Retained column indices per row, strictly increasing.
    kept: Vec<Vec<usize>>,
    sparsity: f64,
}

impl GateMask {
    /// Build a mask from explicit keep lists. Each row's indices must be
    /// strictly increasing and in range.
    pub fn from_kept(shape: [usize; 2], kept: Vec<Vec<usize>>, sparsity: f64) -> Result<Self> {
        if kept.len() != shape[0] {
            return Err(Error::Dimension(format!(
                "mask has {} rows, shape says {}",
                kept.len(),
                shape[0]
            )));
        }
        for (i, row) in kept.iter().enumerate() {
            let increasing = row.windows(2).all(|w| w[0] < w[1]);
            if !increasing || row.iter().any(|&j| j >= shape[1]) {
                return Err(Error::Parameter(format!(
                    "row {i} keep list must be strictly increasing and < {}",
                    shape[1]
                )));
            }
        }
        Ok(Self { shape, kept, sparsity })
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    /// Sorted retained column indices of row `i`.
    pub fn kept(&self, i: usize) -> &[usize] {
        &self.kept[i]
    }

    /// Total retained entries across all rows.
    pub fn total_kept(&self) -> usize {
        self.kept.iter().map(|k| k.len()).sum()
    }
}

/// Number of columns a row keeps at sparsity `s` out of `d`.
/// Rounding is half away from zero; the floor of 1 keeps every token alive.
pub fn keep_count(s: f64, d: usize) -> usize {
    (((1.0 - s) * d as f64).round() as usize).max(1)
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Parameter(format!(
            "sparsity must lie in [0, 1), got {s}"
        )));
    }
    Ok(())
}

/// Build the per-row top-k keep mask over `|x|`.
pub fn topk_mask<T: Scalar>(x: &DenseTensor<T>, s: f64) -> Result<GateMask> {
    check_sparsity(s)?;
    if x.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "topk_mask expects a 2-D tensor, got shape {:?}",
            x.shape()
        )));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let kc = keep_count(s, d);
    let mut kept = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(d);
    for i in 0..n {
        let row = x.row(i);
        order.clear();
        order.extend(0..d);
        // Descending |x|; equal magnitudes fall back to ascending index,
        // so the keep set prefers lower columns on ties.
        order.sort_by(|&a, &b| {
            row[b]
                .abs()
                .partial_cmp(&row[a].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut keep: Vec<usize> = order[..kc].to_vec();
        keep.sort_unstable();
        kept.push(keep);
    }
    Ok(GateMask { shape: [n, d], kept, sparsity: s })
}

/// Hadamard product with the binary mask: kept entries copied, all other
/// entries exactly zero.
pub fn apply_mask<T: Scalar>(x: &DenseTensor<T>, m: &GateMask) -> Result<DenseTensor<T>> {
    if x.shape() != m.shape() {
        return Err(Error::Dimension(format!(
            "apply_mask shape mismatch: {:?} vs {:?}",
            x.shape(),
            m.shape()
        )));
    }
    let (n, d) = (m.shape[0], m.shape[1]);
    let mut out = DenseTensor::zeros(vec![n, d])?;
    for i in 0..n {
        let src = x.row(i);
        let dst = out.row_mut(i);
        for &j in &m.kept[i] {
            dst[j] = src[j];
        }
    }
    Ok(out)
}

/// Training schedule for the sparsity sampling range.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub s_start: f64,
    pub s_end: f64,
    pub total_steps: usize,
}

impl ScheduleConfig {
    pub fn new(s_start: f64, s_end: f64, total_steps: usize) -> Result<Self> {
        if !(0.0 <= s_start && s_start <= s_end && s_end < 1.0) {
            return Err(Error::Config(format!(
                "schedule requires 0 <= s_start <= s_end < 1, got {s_start}..{s_end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("schedule requires total_steps >= 1".into()));
        }
        Ok(Self { s_start, s_end, total_steps })
    }

    /// Default ramp from 10% to 60% over `total_steps`.
    pub fn ramp(total_steps: usize) -> Result<Self> {
        Self::new(0.10, 0.60, total_steps)
    }
}

/// Upper end of the sampling range at `step`: a linear ramp from
/// `s_start` (step 0) to `s_end` (final step).
pub fn schedule_max_sparsity(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Parameter(format!(
            "step {step} outside schedule range 0..={}",
            cfg.total_steps
        )));
    }
    Ok(cfg.s_start + (cfg.s_end - cfg.s_start) * step as f64 / cfg.total_steps as f64)
}

/// Draw a sparsity level uniformly from `[s_start, s_max(step)]`.
pub fn sample_sparsity(prng: &mut Prng, step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    let hi = schedule_max_sparsity(step, cfg)?;
    Ok(cfg.s_start + (hi - cfg.s_start) * prng.next_f64())
}
