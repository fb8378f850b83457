//! Training losses: token-level MSE for distillation and the
//! multi-similarity retrieval loss for fine-tuning, each paired with its
//! analytic gradient.

use crate::error::{Error, Result};
use crate::model::Descriptor;
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Mean squared error over all token entries:
/// `L = (1 / (N * D)) * sum_ij (S_ij - T_ij)^2`.
pub fn distill_loss<T: Scalar>(
    s_tokens: &DenseTensor<T>,
    t_tokens: &DenseTensor<T>,
) -> Result<f64> {
    if s_tokens.shape() != t_tokens.shape() {
        return Err(Error::Dimension(format!(
            "token shapes differ: {:?} vs {:?}",
            s_tokens.shape(),
            t_tokens.shape()
        )));
    }
    let n = s_tokens.numel() as f64;
    let sum: f64 = s_tokens
        .data()
        .iter()
        .zip(t_tokens.data())
        .map(|(s, t)| {
            let d = s.wide() - t.wide();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Gradient of [`distill_loss`] with respect to the student tokens:
/// `dL/dS = 2 (S - T) / (N * D)`.
pub fn distill_loss_grad<T: Scalar>(
    s_tokens: &DenseTensor<T>,
    t_tokens: &DenseTensor<T>,
) -> Result<DenseTensor<T>> {
    if s_tokens.shape() != t_tokens.shape() {
        return Err(Error::Dimension(format!(
            "token shapes differ: {:?} vs {:?}",
            s_tokens.shape(),
            t_tokens.shape()
        )));
    }
    let scale = 2.0 / s_tokens.numel() as f64;
    let data: Vec<T> = s_tokens
        .data()
        .iter()
        .zip(t_tokens.data())
        .map(|(s, t)| T::from_wide(scale * (s.wide() - t.wide())))
        .collect();
    DenseTensor::new(s_tokens.shape().to_vec(), data)
}

/// Multi-similarity loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultisimParams {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for MultisimParams {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 50.0, lambda: 1.0 }
    }
}

fn pairwise_similarities<T: Scalar>(descriptors: &[Descriptor<T>]) -> Result<Vec<Vec<f64>>> {
    let b = descriptors.len();
    if b < 2 {
        return Err(Error::Usage(format!(
            "multi-similarity loss needs at least 2 descriptors, got {b}"
        )));
    }
    let dim = descriptors[0].dim();
    if descriptors.iter().any(|d| d.dim() != dim) {
        return Err(Error::Dimension("descriptor widths differ".into()));
    }
    let mut sim = vec![vec![0.0f64; b]; b];
    for i in 0..b {
        for k in 0..b {
            sim[i][k] = descriptors[i].dot(&descriptors[k]);
        }
    }
    Ok(sim)
}

/// Multi-similarity loss over a labeled batch of unit descriptors, with
/// `S_ik` the dot product (cosine similarity of unit vectors):
///
/// `L = (1/B) sum_i [ (1/alpha) log(1 + sum_{k in P_i} e^{-alpha (S_ik - lambda)})
///                  + (1/beta)  log(1 + sum_{k in N_i} e^{ beta  (S_ik - lambda)}) ]`
///
/// `P_i` are same-label others, `N_i` different-label others. A batch
/// without any positive pair is rejected; empty per-anchor sets simply
/// contribute `log(1) = 0`.
pub fn multisim_loss<T: Scalar>(
    descriptors: &[Descriptor<T>],
    labels: &[u32],
    params: &MultisimParams,
) -> Result<f64> {
    Ok(multisim_loss_grad(descriptors, labels, params)?.0)
}

/// Loss plus per-descriptor gradient. The gradient accounts for every
/// appearance of a descriptor, as anchor and as the other endpoint of
/// another anchor's pair.
pub fn multisim_loss_grad<T: Scalar>(
    descriptors: &[Descriptor<T>],
    labels: &[u32],
    params: &MultisimParams,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if descriptors.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} descriptors but {} labels",
            descriptors.len(),
            labels.len()
        )));
    }
    let b = descriptors.len();
    let sim = pairwise_similarities(descriptors)?;

    let has_positive_pair = (0..b).any(|i| (0..b).any(|k| k != i && labels[k] == labels[i]));
    if !has_positive_pair {
        return Err(Error::Usage(
            "multi-similarity loss requires at least one positive pair in the batch".into(),
        ));
    }

    let (alpha, beta, lambda) = (params.alpha, params.beta, params.lambda);
    let mut loss = 0.0f64;
    // dL/dS_ik for the anchor-i term.
    let mut dsim = vec![vec![0.0f64; b]; b];
    for i in 0..b {
        let mut pos_sum = 0.0f64;
        let mut neg_sum = 0.0f64;
        for k in 0..b {
            if k == i {
                continue;
            }
            if labels[k] == labels[i] {
                pos_sum += (-alpha * (sim[i][k] - lambda)).exp();
            } else {
                neg_sum += (beta * (sim[i][k] - lambda)).exp();
            }
        }
        loss += (1.0 + pos_sum).ln() / alpha + (1.0 + neg_sum).ln() / beta;
        for k in 0..b {
            if k == i {
                continue;
            }
            if labels[k] == labels[i] {
                dsim[i][k] = -(-alpha * (sim[i][k] - lambda)).exp() / (1.0 + pos_sum);
            } else {
                dsim[i][k] = (beta * (sim[i][k] - lambda)).exp() / (1.0 + neg_sum);
            }
        }
    }
    loss /= b as f64;

    // S_ik = d_i . d_k appears in anchor-i and anchor-k terms; collect both.
    let dim = descriptors[0].dim();
    let mut grads = vec![vec![0.0f64; dim]; b];
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        for k in 0..b {
            if k == i {
                continue;
            }
            let w = (dsim[i][k] + dsim[k][i]) * inv_b;
            if w == 0.0 {
                continue;
            }
            for (g, dk) in grads[i].iter_mut().zip(descriptors[k].values()) {
                *g += w * dk.wide();
            }
        }
    }
    Ok((loss, grads))
}
