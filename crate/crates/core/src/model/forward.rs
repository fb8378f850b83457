//! Forward pass: pre-norm blocks (LN -> MHSA -> residual, LN -> GELU MLP
//! -> residual) with every gated projection input masked by per-token
//! top-k and multiplied through the sparse ternary kernel.
//!
//! The cached variant records everything the hand-written backward needs:
//! per-layer inputs, LayerNorm statistics, gate masks, softmax outputs and
//! the ternary form actually used by each projection (students re-quantize
//! their latents on every forward).

use crate::error::{Error, Result};
use crate::gate::{topk_mask, GateMask};
use crate::kernels::{sparse_ternary_matmul, OpsCounter};
use crate::scalar::Scalar;
use crate::tensor::{matmul_ref, DenseTensor};
use crate::ternary::{quantize_ternary, QuantConfig, TernaryTensor};

use super::{descriptor_head_cls, Descriptor, Linear, LinearWeight, VitModel};

/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Per-row LayerNorm statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Mask and effective weight used by one gated linear.
#[derive(Debug, Clone)]
pub struct GatedLinCache<T: Scalar> {
    pub mask: GateMask,
    /// The ternary form consumed by the kernel; `None` on the dense path.
    pub ternary: Option<TernaryTensor<T>>,
}

/// Everything one block's backward needs.
#[derive(Debug, Clone)]
pub struct BlockCache<T: Scalar> {
    pub x_in: DenseTensor<T>,
    pub ln1: LnCache,
    pub ln1_out: DenseTensor<T>,
    pub qkv_lin: GatedLinCache<T>,
    pub qkv_out: DenseTensor<T>,
    /// Post-softmax attention per head, each `N x N`.
    pub attn_softmax: Vec<DenseTensor<T>>,
    pub att_concat: DenseTensor<T>,
    pub attn_out_lin: GatedLinCache<T>,
    pub x_mid: DenseTensor<T>,
    pub ln2: LnCache,
    pub ln2_out: DenseTensor<T>,
    pub mlp_up_lin: GatedLinCache<T>,
    pub up_out: DenseTensor<T>,
    pub gelu_out: DenseTensor<T>,
    pub mlp_down_lin: GatedLinCache<T>,
}

/// Full forward trace.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    pub s: f64,
    pub patches: DenseTensor<T>,
    pub x0: DenseTensor<T>,
    pub blocks: Vec<BlockCache<T>>,
    pub pre_final: DenseTensor<T>,
    pub final_ln: LnCache,
    pub tokens: DenseTensor<T>,
    pub descriptor: Descriptor<T>,
    /// L2 norm of the final CLS token (descriptor-head backward).
    pub cls_norm: f64,
}

/// LayerNorm over the rows of a 2-D tensor with affine parameters.
pub(crate) fn layer_norm_rows<T: Scalar>(
    x: &DenseTensor<T>,
    w: &DenseTensor<T>,
    b: &DenseTensor<T>,
) -> (DenseTensor<T>, LnCache) {
    let (n, d) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); n * d];
    let mut mean = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let m: f64 = row.iter().map(|v| v.wide()).sum::<f64>() / d as f64;
        let var: f64 = row
            .iter()
            .map(|v| {
                let c = v.wide() - m;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            let norm = (row[j].wide() - m) * r;
            out[i * d + j] = T::from_wide(norm * w.data()[j].wide() + b.data()[j].wide());
        }
        mean.push(m);
        rstd.push(r);
    }
    (
        DenseTensor::new(vec![n, d], out).expect("layer_norm shape"),
        LnCache { mean, rstd },
    )
}

/// GELU, tanh approximation (the ViT convention).
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (S * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of the tanh-approximated GELU.
pub(crate) fn gelu_prime_scalar(x: f64) -> f64 {
    const S: f64 = 0.7978845608028654;
    let u = S * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * S * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn add_bias<T: Scalar>(y: &mut DenseTensor<T>, bias: &DenseTensor<T>) {
    let cols = y.cols();
    debug_assert_eq!(cols, bias.numel());
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        for j in 0..cols {
            row[j] = row[j] + bias.data()[j];
        }
    }
}

/// Multi-head self-attention over a fused `N x 3D` QKV tensor (queries,
/// then keys, then values along the columns). Returns the concatenated
/// head outputs and the per-head post-softmax matrices. Scores and the
/// value products accumulate in `f64`; softmax is max-subtracted.
pub fn attention_forward<T: Scalar>(
    qkv: &DenseTensor<T>,
    heads: usize,
) -> Result<(DenseTensor<T>, Vec<DenseTensor<T>>)> {
    if qkv.shape().len() != 2 || qkv.cols() % (3 * heads) != 0 {
        return Err(Error::Dimension(format!(
            "attention expects [N, 3*heads*dh] input, got {:?} with {heads} heads",
            qkv.shape()
        )));
    }
    let n = qkv.rows();
    let d = qkv.cols() / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut attn_softmax = Vec::with_capacity(heads);
    let mut att_concat = DenseTensor::zeros(vec![n, d])?;
    for head in 0..heads {
        let q_off = head * dh;
        let k_off = d + head * dh;
        let v_off = 2 * d + head * dh;
        let mut probs = vec![T::zero(); n * n];
        for i in 0..n {
            let qi = &qkv.row(i)[q_off..q_off + dh];
            let mut logits = vec![0.0f64; n];
            for j in 0..n {
                let kj = &qkv.row(j)[k_off..k_off + dh];
                let mut acc = 0.0f64;
                for t in 0..dh {
                    acc += qi[t].wide() * kj[t].wide();
                }
                logits[j] = acc * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; n];
            for j in 0..n {
                exps[j] = (logits[j] - max).exp();
                denom += exps[j];
            }
            for j in 0..n {
                probs[i * n + j] = T::from_wide(exps[j] / denom);
            }
        }
        let probs = DenseTensor::new(vec![n, n], probs)?;
        for i in 0..n {
            let out_row = att_concat.row_mut(i);
            for t in 0..dh {
                let mut acc = 0.0f64;
                for j in 0..n {
                    acc += probs.at(i, j).wide() * qkv.row(j)[v_off + t].wide();
                }
                out_row[q_off + t] = T::from_wide(acc);
            }
        }
        attn_softmax.push(probs);
    }
    Ok((att_concat, attn_softmax))
}

/// One gated linear: quantized models mask the input per token and run the
/// sparse ternary kernel (latents are quantized fresh); dense models run
/// the ungated reference multiply. Both paths charge the counter.
fn gated_linear<T: Scalar>(
    x: &DenseTensor<T>,
    lin: &Linear<T>,
    name: &str,
    quantized: bool,
    s: f64,
    counter: &mut OpsCounter,
) -> Result<(DenseTensor<T>, GatedLinCache<T>)> {
    if quantized {
        let ternary = match &lin.weight {
            LinearWeight::Dense(latent) => {
                quantize_ternary(latent, &QuantConfig::default())?.with_name(name)
            }
            LinearWeight::Ternary(t) => t.clone().with_name(name),
        };
        let mask = topk_mask(x, s)?;
        let mut y = sparse_ternary_matmul(x, &mask, &ternary, counter)?;
        add_bias(&mut y, &lin.bias);
        Ok((y, GatedLinCache { mask, ternary: Some(ternary) }))
    } else {
        let w = match &lin.weight {
            LinearWeight::Dense(w) => w,
            LinearWeight::Ternary(_) => {
                return Err(Error::Usage(format!(
                    "{name}: ternary weight in a full-precision model"
                )))
            }
        };
        let mut y = matmul_ref(x, w)?;
        add_bias(&mut y, &lin.bias);
        counter.add(name, (x.rows() * x.cols() * w.rows()) as u64);
        let mask = topk_mask(x, 0.0)?;
        Ok((y, GatedLinCache { mask, ternary: None }))
    }
}

/// Split the image into flattened patches: patch rows scan top-to-bottom
/// then left-to-right; within a patch, pixels are row-major with channels
/// innermost.
fn patchify<T: Scalar>(image: &DenseTensor<T>, p: usize) -> DenseTensor<T> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (ph, pw) = (h / p, w / p);
    let plen = p * p * c;
    let mut out = vec![T::zero(); ph * pw * plen];
    let data = image.data();
    for pr in 0..ph {
        for pc in 0..pw {
            let base = (pr * pw + pc) * plen;
            let mut k = 0;
            for py in 0..p {
                let y = pr * p + py;
                for px in 0..p {
                    let x = pc * p + px;
                    for ch in 0..c {
                        out[base + k] = data[(y * w + x) * c + ch];
                        k += 1;
                    }
                }
            }
        }
    }
    DenseTensor::new(vec![ph * pw, plen], out).expect("patchify shape")
}

/// Forward pass returning the final-layer tokens and the CLS descriptor.
pub fn forward<T: Scalar>(
    model: &VitModel<T>,
    image: &DenseTensor<T>,
    s: f64,
    counter: &mut OpsCounter,
) -> Result<(DenseTensor<T>, Descriptor<T>)> {
    let cache = forward_cached(model, image, s, counter)?;
    Ok((cache.tokens, cache.descriptor))
}

/// Forward pass that records the trace needed by `train::backward`.
pub fn forward_cached<T: Scalar>(
    model: &VitModel<T>,
    image: &DenseTensor<T>,
    s: f64,
    counter: &mut OpsCounter,
) -> Result<ForwardCache<T>> {
    let cfg = &model.config;
    let (h, w, c) = cfg.image;
    if image.shape() != [h, w, c] {
        return Err(Error::Dimension(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            [h, w, c]
        )));
    }
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Parameter(format!(
            "sparsity must lie in [0, 1), got {s}"
        )));
    }
    if !cfg.quantized && s > 0.0 {
        return Err(Error::Usage(format!(
            "full-precision model requires s = 0, got {s}"
        )));
    }

    let d = cfg.dim;
    let n = cfg.tokens();
    let heads = cfg.heads;
    let dh = cfg.head_dim();

    // Patch embedding.
    let patches = patchify(image, cfg.patch);
    let pe_w = match &model.patch_embed.weight {
        LinearWeight::Dense(w) => w,
        LinearWeight::Ternary(_) => {
            return Err(Error::Usage("patch embedding must be full precision".into()))
        }
    };
    let mut embedded = matmul_ref(&patches, pe_w)?;
    add_bias(&mut embedded, &model.patch_embed.bias);
    counter.add(
        "patch_embed",
        (patches.rows() * patches.cols() * d) as u64,
    );

    // Prepend CLS, add positional embeddings.
    let mut x0 = DenseTensor::zeros(vec![n, d])?;
    x0.row_mut(0).copy_from_slice(model.cls_token.data());
    for i in 0..n - 1 {
        let src = embedded.row(i).to_vec();
        x0.row_mut(i + 1).copy_from_slice(&src);
    }
    let x0 = x0.add(&model.pos_embed)?;

    let mut x = x0.clone();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for (bi, block) in model.blocks.iter().enumerate() {
        let x_in = x.clone();
        let (ln1_out, ln1) = layer_norm_rows(&x, &block.norm1.weight, &block.norm1.bias);
        let (qkv_out, qkv_lin) = gated_linear(
            &ln1_out,
            &block.qkv,
            &format!("blocks.{bi}.qkv.weight"),
            cfg.quantized,
            s,
            counter,
        )?;

        let (att_concat, attn_softmax) = attention_forward(&qkv_out, heads)?;
        counter.add(
            &format!("blocks.{bi}.attn_scores"),
            (heads * n * n * dh) as u64,
        );
        counter.add(
            &format!("blocks.{bi}.attn_values"),
            (heads * n * n * dh) as u64,
        );

        let (attn_proj, attn_out_lin) = gated_linear(
            &att_concat,
            &block.attn_out,
            &format!("blocks.{bi}.attn_out.weight"),
            cfg.quantized,
            s,
            counter,
        )?;
        let x_mid = x.add(&attn_proj)?;

        let (ln2_out, ln2) = layer_norm_rows(&x_mid, &block.norm2.weight, &block.norm2.bias);
        let (up_out, mlp_up_lin) = gated_linear(
            &ln2_out,
            &block.mlp_up,
            &format!("blocks.{bi}.mlp_up.weight"),
            cfg.quantized,
            s,
            counter,
        )?;
        let gelu_out = DenseTensor::new(
            up_out.shape().to_vec(),
            up_out
                .data()
                .iter()
                .map(|v| T::from_wide(gelu_scalar(v.wide())))
                .collect(),
        )?;
        let (down_out, mlp_down_lin) = gated_linear(
            &gelu_out,
            &block.mlp_down,
            &format!("blocks.{bi}.mlp_down.weight"),
            cfg.quantized,
            s,
            counter,
        )?;
        x = x_mid.add(&down_out)?;

        blocks.push(BlockCache {
            x_in,
            ln1,
            ln1_out,
            qkv_lin,
            qkv_out,
            attn_softmax,
            att_concat,
            attn_out_lin,
            x_mid,
            ln2,
            ln2_out,
            mlp_up_lin,
            up_out,
            gelu_out,
            mlp_down_lin,
        });
    }

    let pre_final = x;
    let (tokens, final_ln) = layer_norm_rows(&pre_final, &model.norm.weight, &model.norm.bias);
    let descriptor = descriptor_head_cls(&tokens)?;
    let cls_norm = tokens
        .row(0)
        .iter()
        .map(|v| v.wide() * v.wide())
        .sum::<f64>()
        .sqrt();

    Ok(ForwardCache {
        s,
        patches,
        x0,
        blocks,
        pre_final,
        final_ln,
        tokens,
        descriptor,
        cls_norm,
    })
}
