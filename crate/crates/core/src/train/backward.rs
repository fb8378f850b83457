//! Hand-derived reverse-mode gradients for the full model.
//!
//! Two contracts shape the quantized paths:
//! - straight-through estimation: the gradient computed for an effective
//!   ternary weight is passed to its full-precision latent unchanged;
//! - frozen masks: the gate is treated as a constant, so activation
//!   gradients for masked-out entries are exactly zero.
//!
//! All reductions run in `f64` with fixed ascending index order, matching
//! the forward kernels' bit-exact contract.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gate::GateMask;
use crate::model::forward::gelu_prime_scalar;
use crate::model::{ForwardCache, LinearWeight, LnCache, VitModel};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;
use crate::ternary::TernaryTensor;

/// Named parameter gradients, accumulated across a batch.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<String, DenseTensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    /// Add `g` into the slot for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, g: DenseTensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(existing) => {
                if existing.shape() != g.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient shape {:?} does not match accumulated {:?} for {name}",
                        g.shape(),
                        existing.shape()
                    )));
                }
                for (dst, src) in existing.data_mut().iter_mut().zip(g.data()) {
                    *dst = *dst + *src;
                }
                Ok(())
            }
            None => {
                self.map.insert(name.to_string(), g);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseTensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Loss gradient with respect to the forward outputs.
#[derive(Debug, Clone, Default)]
pub struct OutputGrad<T: Scalar> {
    /// d loss / d tokens, `N x D`.
    pub tokens: Option<DenseTensor<T>>,
    /// d loss / d descriptor, length `D`.
    pub descriptor: Option<DenseTensor<T>>,
}

/// Gradients produced by one gated linear.
#[derive(Debug, Clone)]
pub struct GatedLinearGrads<T: Scalar> {
    /// d loss / d input; masked-out entries are exactly zero.
    pub d_input: DenseTensor<T>,
    /// d loss / d effective weight (`gamma * codes` for the ternary path).
    pub d_weight: DenseTensor<T>,
    /// d loss / d bias.
    pub d_bias: DenseTensor<T>,
}

enum WeightView<'a, T: Scalar> {
    Ternary(&'a TernaryTensor<T>),
    Dense(&'a DenseTensor<T>),
}

/// Core gated-linear backward on f64 buffers.
///
/// Forward was `y[i][o] = sum_{k in kept(i)} x[i][k] * w_eff[o][k] + b[o]`.
fn gated_linear_backward_f64<T: Scalar>(
    d_out: &[f64],
    x: &DenseTensor<T>,
    mask: &GateMask,
    weight: WeightView<'_, T>,
    out_dim: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    debug_assert_eq!(d_out.len(), n * out_dim);

    // Effective weight rows in f64.
    let w_eff: Vec<f64> = match &weight {
        WeightView::Ternary(t) => {
            if t.rows() != out_dim || t.cols() != d {
                return Err(Error::Dimension(format!(
                    "weight shape {:?} does not match linear [{out_dim}, {d}]",
                    t.shape()
                )));
            }
            let gamma = t.gamma().wide();
            t.unpack()?.iter().map(|&c| gamma * c as f64).collect()
        }
        WeightView::Dense(w) => {
            if w.rows() != out_dim || w.cols() != d {
                return Err(Error::Dimension(format!(
                    "weight shape {:?} does not match linear [{out_dim}, {d}]",
                    w.shape()
                )));
            }
            w.data().iter().map(|v| v.wide()).collect()
        }
    };

    let mut d_input = vec![0.0f64; n * d];
    let mut d_weight = vec![0.0f64; out_dim * d];
    let mut d_bias = vec![0.0f64; out_dim];

    let mut gathered: Vec<f64> = Vec::new();
    for i in 0..n {
        let xi = x.row(i);
        let kept = mask.kept(i);
        gathered.clear();
        gathered.extend(kept.iter().map(|&k| xi[k].wide()));
        let dout_i = &d_out[i * out_dim..(i + 1) * out_dim];
        let din_i = &mut d_input[i * d..(i + 1) * d];
        for o in 0..out_dim {
            let g = dout_i[o];
            d_bias[o] += g;
            let w_row = &w_eff[o * d..(o + 1) * d];
            let dw_row = &mut d_weight[o * d..(o + 1) * d];
            for (&k, &xv) in kept.iter().zip(&gathered) {
                din_i[k] += g * w_row[k];
                dw_row[k] += g * xv;
            }
        }
    }
    Ok((d_input, d_weight, d_bias))
}

fn to_tensor<T: Scalar>(shape: Vec<usize>, data: Vec<f64>) -> DenseTensor<T> {
    DenseTensor::new(shape, data.into_iter().map(T::from_wide).collect())
        .expect("internal gradient shape")
}

/// Backward of [`crate::kernels::sparse_ternary_matmul`] plus bias, with
/// the mask frozen and the effective weight treated as dense.
pub fn sparse_ternary_matmul_backward<T: Scalar>(
    d_out: &DenseTensor<T>,
    x: &DenseTensor<T>,
    mask: &GateMask,
    w: &TernaryTensor<T>,
) -> Result<GatedLinearGrads<T>> {
    if x.shape() != mask.shape() {
        return Err(Error::Dimension(format!(
            "mask shape {:?} does not match activations {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    if d_out.shape() != [x.rows(), w.rows()] {
        return Err(Error::Dimension(format!(
            "output gradient shape {:?} does not match [{}, {}]",
            d_out.shape(),
            x.rows(),
            w.rows()
        )));
    }
    let d_out_f64: Vec<f64> = d_out.data().iter().map(|v| v.wide()).collect();
    let (d_input, d_weight, d_bias) =
        gated_linear_backward_f64(&d_out_f64, x, mask, WeightView::Ternary(w), w.rows())?;
    Ok(GatedLinearGrads {
        d_input: to_tensor(vec![x.rows(), x.cols()], d_input),
        d_weight: to_tensor(vec![w.rows(), w.cols()], d_weight),
        d_bias: to_tensor(vec![w.rows()], d_bias),
    })
}

/// LayerNorm backward over rows; returns `(dx, dw, db)` as f64 buffers.
fn layer_norm_backward_f64<T: Scalar>(
    d_out: &[f64],
    x: &DenseTensor<T>,
    ln: &LnCache,
    w: &DenseTensor<T>,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut dx = vec![0.0f64; n * d];
    let mut dw = vec![0.0f64; d];
    let mut db = vec![0.0f64; d];
    for i in 0..n {
        let xi = x.row(i);
        let g = &d_out[i * d..(i + 1) * d];
        let mean = ln.mean[i];
        let rstd = ln.rstd[i];

        let mut dnorm_mean = 0.0f64;
        let mut dnorm_norm_mean = 0.0f64;
        for j in 0..d {
            let xhat = (xi[j].wide() - mean) * rstd;
            let dnorm = g[j] * w.data()[j].wide();
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * xhat;
        }
        dnorm_mean /= d as f64;
        dnorm_norm_mean /= d as f64;

        for j in 0..d {
            let xhat = (xi[j].wide() - mean) * rstd;
            let dnorm = g[j] * w.data()[j].wide();
            dw[j] += g[j] * xhat;
            db[j] += g[j];
            dx[i * d + j] = (dnorm - dnorm_mean - xhat * dnorm_norm_mean) * rstd;
        }
    }
    (dx, dw, db)
}

/// Attention backward: from d(concatenated head outputs) to d(fused QKV).
fn attention_backward_f64<T: Scalar>(
    d_att: &[f64],
    qkv: &DenseTensor<T>,
    probs: &[DenseTensor<T>],
    heads: usize,
) -> Vec<f64> {
    let n = qkv.rows();
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_qkv = vec![0.0f64; n * 3 * d];

    for (head, a) in probs.iter().enumerate() {
        let q_off = head * dh;
        let k_off = d + head * dh;
        let v_off = 2 * d + head * dh;

        // dV[j][t] += sum_i A[i][j] * d_att[i][q_off + t]
        for j in 0..n {
            for t in 0..dh {
                let mut acc = 0.0f64;
                for i in 0..n {
                    acc += a.at(i, j).wide() * d_att[i * d + q_off + t];
                }
                d_qkv[j * 3 * d + v_off + t] += acc;
            }
        }

        // dA[i][j] = sum_t d_att[i][t] * V[j][t], then softmax backward.
        for i in 0..n {
            let mut da = vec![0.0f64; n];
            for j in 0..n {
                let vj = &qkv.row(j)[v_off..v_off + dh];
                let mut acc = 0.0f64;
                for t in 0..dh {
                    acc += d_att[i * d + q_off + t] * vj[t].wide();
                }
                da[j] = acc;
            }
            let mut inner = 0.0f64;
            for j in 0..n {
                inner += da[j] * a.at(i, j).wide();
            }
            // d logits, including the 1/sqrt(dh) score scale.
            let mut dlog = vec![0.0f64; n];
            for j in 0..n {
                dlog[j] = a.at(i, j).wide() * (da[j] - inner) * scale;
            }
            // dQ[i][t] += sum_j dlog[j] * K[j][t];
            // dK[j][t] += dlog[j] * Q[i][t]
            let qi: Vec<f64> = qkv.row(i)[q_off..q_off + dh]
                .iter()
                .map(|v| v.wide())
                .collect();
            for j in 0..n {
                let kj = &qkv.row(j)[k_off..k_off + dh];
                for t in 0..dh {
                    d_qkv[i * 3 * d + q_off + t] += dlog[j] * kj[t].wide();
                    d_qkv[j * 3 * d + k_off + t] += dlog[j] * qi[t];
                }
            }
        }
    }
    d_qkv
}

/// Reverse-mode gradients for every parameter tensor reachable from the
/// requested output gradients. Results are accumulated into `grads` so a
/// batch can share one container.
pub fn backward<T: Scalar>(
    model: &VitModel<T>,
    cache: &ForwardCache<T>,
    out_grad: &OutputGrad<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let cfg = &model.config;
    let n = cfg.tokens();
    let d = cfg.dim;
    if cache.blocks.len() != cfg.depth || cache.tokens.shape() != [n, d] {
        return Err(Error::Usage(
            "forward cache does not match the model configuration".into(),
        ));
    }
    if out_grad.tokens.is_none() && out_grad.descriptor.is_none() {
        return Err(Error::Usage("no output gradient supplied".into()));
    }

    // Seed d(tokens).
    let mut g_tokens = vec![0.0f64; n * d];
    if let Some(t) = &out_grad.tokens {
        if t.shape() != [n, d] {
            return Err(Error::Dimension(format!(
                "token gradient shape {:?} does not match [{n}, {d}]",
                t.shape()
            )));
        }
        for (dst, src) in g_tokens.iter_mut().zip(t.data()) {
            *dst += src.wide();
        }
    }
    if let Some(gd) = &out_grad.descriptor {
        if gd.numel() != d {
            return Err(Error::Dimension(format!(
                "descriptor gradient length {} does not match D={d}",
                gd.numel()
            )));
        }
        // descriptor = t0 / |t0|; d t0 = (g - (g . desc) desc) / |t0|
        let desc = cache.descriptor.values();
        let norm = cache.cls_norm;
        if norm == 0.0 {
            return Err(Error::Numeric("degenerate descriptor in cache".into()));
        }
        let gdotd: f64 = gd
            .data()
            .iter()
            .zip(desc)
            .map(|(g, v)| g.wide() * v.wide())
            .sum();
        for j in 0..d {
            g_tokens[j] += (gd.data()[j].wide() - gdotd * desc[j].wide()) / norm;
        }
    }

    // Final LayerNorm.
    let (mut g_x, dw, db) =
        layer_norm_backward_f64(&g_tokens, &cache.pre_final, &cache.final_ln, &model.norm.weight);
    grads.accumulate("norm.weight", to_tensor(vec![d], dw))?;
    grads.accumulate("norm.bias", to_tensor(vec![d], db))?;

    for (bi, (block, bc)) in model.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let h_mlp = cfg.mlp_hidden();

        // x_out = x_mid + mlp_down(gelu(mlp_up(ln2(x_mid)))): the residual
        // passes g_x through, the branch adds its own contribution.
        let (d_gelu, dw_down, db_down) = gated_linear_backward_f64(
            &g_x,
            &bc.gelu_out,
            &bc.mlp_down_lin.mask,
            weight_view(&block.mlp_down.weight, bc.mlp_down_lin.ternary.as_ref())?,
            d,
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.mlp_down.weight"),
            to_tensor(vec![d, h_mlp], dw_down),
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.mlp_down.bias"),
            to_tensor(vec![d], db_down),
        )?;

        let mut d_up = vec![0.0f64; n * h_mlp];
        for (idx, g) in d_gelu.iter().enumerate() {
            d_up[idx] = g * gelu_prime_scalar(bc.up_out.data()[idx].wide());
        }

        let (d_ln2, dw_up, db_up) = gated_linear_backward_f64(
            &d_up,
            &bc.ln2_out,
            &bc.mlp_up_lin.mask,
            weight_view(&block.mlp_up.weight, bc.mlp_up_lin.ternary.as_ref())?,
            h_mlp,
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.mlp_up.weight"),
            to_tensor(vec![h_mlp, d], dw_up),
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.mlp_up.bias"),
            to_tensor(vec![h_mlp], db_up),
        )?;

        let (d_x_mid_branch, dw_ln2, db_ln2) =
            layer_norm_backward_f64(&d_ln2, &bc.x_mid, &bc.ln2, &block.norm2.weight);
        grads.accumulate(&format!("blocks.{bi}.norm2.weight"), to_tensor(vec![d], dw_ln2))?;
        grads.accumulate(&format!("blocks.{bi}.norm2.bias"), to_tensor(vec![d], db_ln2))?;

        let mut g_x_mid = g_x;
        for (dst, src) in g_x_mid.iter_mut().zip(&d_x_mid_branch) {
            *dst += src;
        }

        // x_mid = x_in + attn_out(attention(qkv(ln1(x_in)))).
        let (d_att_concat, dw_ao, db_ao) = gated_linear_backward_f64(
            &g_x_mid,
            &bc.att_concat,
            &bc.attn_out_lin.mask,
            weight_view(&block.attn_out.weight, bc.attn_out_lin.ternary.as_ref())?,
            d,
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.attn_out.weight"),
            to_tensor(vec![d, d], dw_ao),
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.attn_out.bias"),
            to_tensor(vec![d], db_ao),
        )?;

        let d_qkv = attention_backward_f64(&d_att_concat, &bc.qkv_out, &bc.attn_softmax, cfg.heads);

        let (d_ln1, dw_qkv, db_qkv) = gated_linear_backward_f64(
            &d_qkv,
            &bc.ln1_out,
            &bc.qkv_lin.mask,
            weight_view(&block.qkv.weight, bc.qkv_lin.ternary.as_ref())?,
            3 * d,
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.qkv.weight"),
            to_tensor(vec![3 * d, d], dw_qkv),
        )?;
        grads.accumulate(
            &format!("blocks.{bi}.qkv.bias"),
            to_tensor(vec![3 * d], db_qkv),
        )?;

        let (d_x_in_branch, dw_ln1, db_ln1) =
            layer_norm_backward_f64(&d_ln1, &bc.x_in, &bc.ln1, &block.norm1.weight);
        grads.accumulate(&format!("blocks.{bi}.norm1.weight"), to_tensor(vec![d], dw_ln1))?;
        grads.accumulate(&format!("blocks.{bi}.norm1.bias"), to_tensor(vec![d], db_ln1))?;

        g_x = g_x_mid;
        for (dst, src) in g_x.iter_mut().zip(&d_x_in_branch) {
            *dst += src;
        }
    }

    // x0 = concat(cls, patch_embed(patches)) + pos_embed.
    grads.accumulate("pos_embed", to_tensor(vec![n, d], g_x.clone()))?;
    grads.accumulate("cls_token", to_tensor(vec![d], g_x[..d].to_vec()))?;

    let n_patches = n - 1;
    let p_len = cfg.patch_len();
    let pe_w_shape = vec![d, p_len];
    let mut dw_pe = vec![0.0f64; d * p_len];
    let mut db_pe = vec![0.0f64; d];
    for i in 0..n_patches {
        let g_row = &g_x[(i + 1) * d..(i + 2) * d];
        let patch = cache.patches.row(i);
        for o in 0..d {
            let g = g_row[o];
            db_pe[o] += g;
            let dw_row = &mut dw_pe[o * p_len..(o + 1) * p_len];
            for k in 0..p_len {
                dw_row[k] += g * patch[k].wide();
            }
        }
    }
    grads.accumulate("patch_embed.weight", to_tensor(pe_w_shape, dw_pe))?;
    grads.accumulate("patch_embed.bias", to_tensor(vec![d], db_pe))?;

    Ok(())
}

fn weight_view<'a, T: Scalar>(
    model_weight: &'a LinearWeight<T>,
    cached_ternary: Option<&'a TernaryTensor<T>>,
) -> Result<WeightView<'a, T>> {
    // The cached ternary form (re-quantized from the latent during the
    // forward) is authoritative on the quantized path.
    if let Some(t) = cached_ternary {
        return Ok(WeightView::Ternary(t));
    }
    match model_weight {
        LinearWeight::Dense(w) => Ok(WeightView::Dense(w)),
        LinearWeight::Ternary(_) => Err(Error::Usage(
            "cache is missing the ternary form used by the forward pass".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::topk_mask;
    use crate::tensor::{randn, Prng};
    use crate::ternary::{quantize_ternary, QuantConfig};

    #[test]
    fn masked_out_input_gradients_are_exactly_zero() {
        let mut prng = Prng::new(40);
        let x: DenseTensor<f64> = randn(&mut prng, &[5, 12]).unwrap();
        let w = quantize_ternary(
            &randn::<f64>(&mut prng, &[7, 12]).unwrap(),
            &QuantConfig::default(),
        )
        .unwrap();
        let mask = topk_mask(&x, 0.5).unwrap();
        let d_out: DenseTensor<f64> = randn(&mut prng, &[5, 7]).unwrap();
        let g = sparse_ternary_matmul_backward(&d_out, &x, &mask, &w).unwrap();
        for i in 0..5 {
            for j in 0..12 {
                if !mask.kept(i).contains(&j) {
                    assert_eq!(g.d_input.at(i, j), 0.0, "({i},{j}) leaked gradient");
                }
            }
        }
    }

    #[test]
    fn gated_linear_backward_matches_finite_differences() {
        let mut prng = Prng::new(41);
        let x: DenseTensor<f64> = randn(&mut prng, &[4, 8]).unwrap();
        let w = quantize_ternary(
            &randn::<f64>(&mut prng, &[6, 8]).unwrap(),
            &QuantConfig::default(),
        )
        .unwrap();
        let mask = topk_mask(&x, 0.25).unwrap();
        // Loss = sum(y), so d_out is all ones.
        let d_out = DenseTensor::new(vec![4, 6], vec![1.0f64; 24]).unwrap();
        let g = sparse_ternary_matmul_backward(&d_out, &x, &mask, &w).unwrap();

        let loss = |x: &DenseTensor<f64>| -> f64 {
            let mut counter = crate::kernels::OpsCounter::new();
            crate::kernels::sparse_ternary_matmul(x, &mask, &w, &mut counter)
                .unwrap()
                .data()
                .iter()
                .sum()
        };
        let h = 1e-5;
        for i in 0..4 {
            for &k in mask.kept(i) {
                let mut xp = x.clone();
                xp.row_mut(i)[k] += h;
                let mut xm = x.clone();
                xm.row_mut(i)[k] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                let an = g.d_input.at(i, k);
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "({i},{k}): fd {fd} vs {an}"
                );
            }
        }
    }
}
