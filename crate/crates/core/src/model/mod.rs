//! Tiny ViT student/teacher with ternary gated linears.
//!
//! The student and its full-precision twin share one parameter layout:
//! patch embedding, CLS token, positional embeddings, `depth` pre-norm
//! transformer blocks and a final LayerNorm. In a quantized model the four
//! projection weights of every block (`qkv`, `attn_out`, `mlp_up`,
//! `mlp_down`) are ternary; LayerNorm affines, biases, the CLS token,
//! positional embeddings and the patch embedding stay full precision.
//!
//! Projection weights exist in two interchangeable representations:
//! a full-precision latent (`Dense`), quantized fresh on every forward,
//! which is the trainable form; or a packed `Ternary` tensor, the compact
//! inference form produced by [`VitModel::quantize_in_place`] or loaded
//! from disk.

pub(crate) mod forward;
mod io;

pub use forward::{
    attention_forward, forward, forward_cached, BlockCache, ForwardCache, GatedLinCache, LnCache,
};
pub use io::{load_model, read_model_summary, save_model, ModelFileSummary, TensorRecordInfo};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Prng};
use crate::ternary::{dequantize, quantize_ternary, QuantConfig, TernaryTensor};

/// Descriptor head variants. Only the CLS-token head is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadType {
    Cls,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Image height, width, channels.
    pub image: (usize, usize, usize),
    /// Patch side length; must divide both image dimensions.
    pub patch: usize,
    /// Token embedding width.
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    /// Attention heads; must divide `dim`.
    pub heads: usize,
    /// MLP hidden width as a multiple of `dim`.
    pub mlp_ratio: f32,
    pub head_type: HeadType,
    /// True for the ternary student, false for the full-precision twin.
    pub quantized: bool,
}

impl ModelConfig {
    /// Desk-scale default: 32x32x1 images, P=8, D=64, L=4, h=4.
    pub fn desk_default(quantized: bool) -> Self {
        Self {
            image: (32, 32, 1),
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            head_type: HeadType::Cls,
            quantized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.image;
        if h == 0 || w == 0 || c == 0 || self.patch == 0 || self.dim == 0 {
            return Err(Error::Config("image, patch and dim must be >= 1".into()));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide image {}x{}",
                self.patch, h, w
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} must give a hidden width >= 1",
                self.mlp_ratio
            )));
        }
        Ok(())
    }

    /// Token count: one per patch plus the CLS token.
    pub fn tokens(&self) -> usize {
        let (h, w, _) = self.image;
        (h / self.patch) * (w / self.patch) + 1
    }

    /// Flattened patch length (`P*P*C`).
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.image.2
    }

    /// MLP hidden width, `round(mlp_ratio * dim)`.
    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio as f64 * self.dim as f64).round() as usize
    }

    /// Descriptor width (the CLS head keeps the embedding width).
    pub fn descriptor_dim(&self) -> usize {
        self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// A projection weight in one of its two representations.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearWeight<T: Scalar> {
    /// Full-precision weight (teacher) or trainable latent (student).
    Dense(DenseTensor<T>),
    /// Packed inference form.
    Ternary(TernaryTensor<T>),
}

/// Linear layer: `out x in` weight (transposed-B convention) plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar> {
    pub weight: LinearWeight<T>,
    pub bias: DenseTensor<T>,
}

/// LayerNorm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T: Scalar> {
    pub weight: DenseTensor<T>,
    pub bias: DenseTensor<T>,
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub qkv: Linear<T>,
    pub attn_out: Linear<T>,
    pub norm2: LayerNormParams<T>,
    pub mlp_up: Linear<T>,
    pub mlp_down: Linear<T>,
}

/// The model: config plus named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct VitModel<T: Scalar> {
    pub config: ModelConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: DenseTensor<T>,
    pub pos_embed: DenseTensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNormParams<T>,
}

/// Unit-norm global image descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> Descriptor<T> {
    /// Wrap values that are already unit-norm (within 1e-5).
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        let norm = values.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::Numeric(format!(
                "descriptor norm {norm} is not within 1e-5 of 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|v| v.wide() * v.wide())
            .sum::<f64>()
            .sqrt()
    }

    /// Dot product (cosine similarity for unit-norm descriptors).
    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.wide() * b.wide())
            .sum()
    }
}

/// Take the CLS token (row 0) and L2-normalize it.
pub fn descriptor_head_cls<T: Scalar>(tokens: &DenseTensor<T>) -> Result<Descriptor<T>> {
    if tokens.shape().len() != 2 || tokens.rows() == 0 {
        return Err(Error::Dimension(format!(
            "descriptor head expects [N, D] tokens, got {:?}",
            tokens.shape()
        )));
    }
    let cls = tokens.row(0);
    let norm = cls.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Numeric(
            "degenerate descriptor: CLS token is the zero vector".into(),
        ));
    }
    let values = cls.iter().map(|v| T::from_wide(v.wide() / norm)).collect();
    Ok(Descriptor { values })
}

/// Initialize a model: truncated-normal (std 0.02, cut at two sigma) for
/// weights, CLS token and positional embeddings; ones for LayerNorm
/// scales; zeros for every bias. Tensors are drawn in canonical name
/// order, elements in row-major order, so the result is deterministic
/// per seed.
pub fn init_model<T: Scalar>(cfg: &ModelConfig, prng: &mut Prng) -> Result<VitModel<T>> {
    cfg.validate()?;
    let d = cfg.dim;
    let n = cfg.tokens();
    let h_mlp = cfg.mlp_hidden();
    let p_len = cfg.patch_len();

    fn trunc<T: Scalar>(prng: &mut Prng, shape: Vec<usize>) -> Result<DenseTensor<T>> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| T::from_wide(0.02 * prng.truncated_normal()))
            .collect();
        DenseTensor::new(shape, data)
    }

    fn linear<T: Scalar>(prng: &mut Prng, out_dim: usize, in_dim: usize) -> Result<Linear<T>> {
        Ok(Linear {
            weight: LinearWeight::Dense(trunc(prng, vec![out_dim, in_dim])?),
            bias: DenseTensor::zeros(vec![out_dim])?,
        })
    }

    fn ln<T: Scalar>(dim: usize) -> Result<LayerNormParams<T>> {
        Ok(LayerNormParams {
            weight: DenseTensor::new(vec![dim], vec![T::one(); dim])?,
            bias: DenseTensor::zeros(vec![dim])?,
        })
    }

    let patch_embed = linear(prng, d, p_len)?;
    let cls_token = trunc(prng, vec![d])?;
    let pos_embed = trunc(prng, vec![n, d])?;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        blocks.push(Block {
            norm1: ln(d)?,
            qkv: linear(prng, 3 * d, d)?,
            attn_out: linear(prng, d, d)?,
            norm2: ln(d)?,
            mlp_up: linear(prng, h_mlp, d)?,
            mlp_down: linear(prng, d, h_mlp)?,
        });
    }
    Ok(VitModel {
        config: cfg.clone(),
        patch_embed,
        cls_token,
        pos_embed,
        blocks,
        norm: ln(d)?,
    })
}

/// Names of the four gated projections of block `i`, in canonical order.
pub fn projection_names(i: usize) -> [String; 4] {
    [
        format!("blocks.{i}.qkv.weight"),
        format!("blocks.{i}.attn_out.weight"),
        format!("blocks.{i}.mlp_up.weight"),
        format!("blocks.{i}.mlp_down.weight"),
    ]
}

impl<T: Scalar> VitModel<T> {
    /// Canonical tensor-name order. Also the model-file record order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "patch_embed.weight".to_string(),
            "patch_embed.bias".to_string(),
            "cls_token".to_string(),
            "pos_embed".to_string(),
        ];
        for i in 0..self.config.depth {
            for part in [
                "norm1.weight",
                "norm1.bias",
                "qkv.weight",
                "qkv.bias",
                "attn_out.weight",
                "attn_out.bias",
                "norm2.weight",
                "norm2.bias",
                "mlp_up.weight",
                "mlp_up.bias",
                "mlp_down.weight",
                "mlp_down.bias",
            ] {
                names.push(format!("blocks.{i}.{part}"));
            }
        }
        names.push("norm.weight".to_string());
        names.push("norm.bias".to_string());
        names
    }

    /// Tensor names belonging to block `i`.
    pub fn block_tensor_names(&self, i: usize) -> Vec<String> {
        self.tensor_names()
            .into_iter()
            .filter(|n| n.starts_with(&format!("blocks.{i}.")))
            .collect()
    }

    /// All dense (trainable-representation) tensors with their names, in
    /// canonical order. Projection weights currently in ternary form are
    /// skipped.
    pub fn dense_params_mut(&mut self) -> Vec<(String, &mut DenseTensor<T>)> {
        let mut out: Vec<(String, &mut DenseTensor<T>)> = Vec::new();
        if let LinearWeight::Dense(w) = &mut self.patch_embed.weight {
            out.push(("patch_embed.weight".into(), w));
        }
        out.push(("patch_embed.bias".into(), &mut self.patch_embed.bias));
        out.push(("cls_token".into(), &mut self.cls_token));
        out.push(("pos_embed".into(), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.norm1.weight"), &mut b.norm1.weight));
            out.push((format!("blocks.{i}.norm1.bias"), &mut b.norm1.bias));
            if let LinearWeight::Dense(w) = &mut b.qkv.weight {
                out.push((format!("blocks.{i}.qkv.weight"), w));
            }
            out.push((format!("blocks.{i}.qkv.bias"), &mut b.qkv.bias));
            if let LinearWeight::Dense(w) = &mut b.attn_out.weight {
                out.push((format!("blocks.{i}.attn_out.weight"), w));
            }
            out.push((format!("blocks.{i}.attn_out.bias"), &mut b.attn_out.bias));
            out.push((format!("blocks.{i}.norm2.weight"), &mut b.norm2.weight));
            out.push((format!("blocks.{i}.norm2.bias"), &mut b.norm2.bias));
            if let LinearWeight::Dense(w) = &mut b.mlp_up.weight {
                out.push((format!("blocks.{i}.mlp_up.weight"), w));
            }
            out.push((format!("blocks.{i}.mlp_up.bias"), &mut b.mlp_up.bias));
            if let LinearWeight::Dense(w) = &mut b.mlp_down.weight {
                out.push((format!("blocks.{i}.mlp_down.weight"), w));
            }
            out.push((format!("blocks.{i}.mlp_down.bias"), &mut b.mlp_down.bias));
        }
        out.push(("norm.weight".into(), &mut self.norm.weight));
        out.push(("norm.bias".into(), &mut self.norm.bias));
        out
    }

    /// Immutable view of dense tensors (see [`Self::dense_params_mut`]).
    pub fn dense_params(&self) -> Vec<(String, &DenseTensor<T>)> {
        let mut out: Vec<(String, &DenseTensor<T>)> = Vec::new();
        if let LinearWeight::Dense(w) = &self.patch_embed.weight {
            out.push(("patch_embed.weight".into(), w));
        }
        out.push(("patch_embed.bias".into(), &self.patch_embed.bias));
        out.push(("cls_token".into(), &self.cls_token));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.norm1.weight"), &b.norm1.weight));
            out.push((format!("blocks.{i}.norm1.bias"), &b.norm1.bias));
            if let LinearWeight::Dense(w) = &b.qkv.weight {
                out.push((format!("blocks.{i}.qkv.weight"), w));
            }
            out.push((format!("blocks.{i}.qkv.bias"), &b.qkv.bias));
            if let LinearWeight::Dense(w) = &b.attn_out.weight {
                out.push((format!("blocks.{i}.attn_out.weight"), w));
            }
            out.push((format!("blocks.{i}.attn_out.bias"), &b.attn_out.bias));
            out.push((format!("blocks.{i}.norm2.weight"), &b.norm2.weight));
            out.push((format!("blocks.{i}.norm2.bias"), &b.norm2.bias));
            if let LinearWeight::Dense(w) = &b.mlp_up.weight {
                out.push((format!("blocks.{i}.mlp_up.weight"), w));
            }
            out.push((format!("blocks.{i}.mlp_up.bias"), &b.mlp_up.bias));
            if let LinearWeight::Dense(w) = &b.mlp_down.weight {
                out.push((format!("blocks.{i}.mlp_down.weight"), w));
            }
            out.push((format!("blocks.{i}.mlp_down.bias"), &b.mlp_down.bias));
        }
        out.push(("norm.weight".into(), &self.norm.weight));
        out.push(("norm.bias".into(), &self.norm.bias));
        out
    }

    fn projections_mut(&mut self) -> Vec<(String, &mut Linear<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let [qkv, attn_out, mlp_up, mlp_down] = projection_names(i);
            out.push((qkv, &mut b.qkv));
            out.push((attn_out, &mut b.attn_out));
            out.push((mlp_up, &mut b.mlp_up));
            out.push((mlp_down, &mut b.mlp_down));
        }
        out
    }

    /// Convert every latent projection weight to its packed ternary form.
    /// Only meaningful for a quantized model.
    pub fn quantize_in_place(&mut self) -> Result<()> {
        if !self.config.quantized {
            return Err(Error::Usage(
                "quantize_in_place called on a full-precision model".into(),
            ));
        }
        let cfg = QuantConfig::default();
        for (name, lin) in self.projections_mut() {
            if let LinearWeight::Dense(latent) = &lin.weight {
                let tern = quantize_ternary(latent, &cfg)?.with_name(&name);
                lin.weight = LinearWeight::Ternary(tern);
            }
        }
        Ok(())
    }

    /// Reconstruct trainable latents for projections stored in ternary
    /// form. The latent `(gamma / f) * code` (with `f` the nonzero-code
    /// fraction) re-quantizes to exactly the same codes and scale, so a
    /// forward pass is unchanged by this conversion.
    pub fn ensure_latents(&mut self) -> Result<()> {
        for (_, lin) in self.projections_mut() {
            if let LinearWeight::Ternary(t) = &lin.weight {
                let f = t.fraction_nonzero()?;
                let latent = if f == 0.0 || t.gamma() == T::zero() {
                    DenseTensor::zeros(vec![t.rows(), t.cols()])?
                } else {
                    dequantize(t)?.scale(T::from_wide(1.0 / f))
                };
                lin.weight = LinearWeight::Dense(latent);
            }
        }
        Ok(())
    }

    /// Count of projections currently in ternary form.
    pub fn ternary_tensor_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| [&b.qkv, &b.attn_out, &b.mlp_up, &b.mlp_down])
            .filter(|l| matches!(l.weight, LinearWeight::Ternary(_)))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ternary::TernaryTensor;

    #[test]
    fn desk_config_has_seventeen_tokens() {
        let cfg = ModelConfig::desk_default(true);
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens(), 17);
        assert_eq!(cfg.mlp_hidden(), 256);
        assert_eq!(cfg.head_dim(), 16);
    }

    #[test]
    fn invalid_configs_name_the_constraint() {
        let mut cfg = ModelConfig::desk_default(true);
        cfg.patch = 5;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("divide"), "{err}");

        let mut cfg = ModelConfig::desk_default(true);
        cfg.heads = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::desk_default(true);
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::desk_default(true);
        let a: VitModel<f32> = init_model(&cfg, &mut Prng::new(42)).unwrap();
        let b: VitModel<f32> = init_model(&cfg, &mut Prng::new(42)).unwrap();
        assert_eq!(a, b);
        let c: VitModel<f32> = init_model(&cfg, &mut Prng::new(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn quantize_in_place_yields_valid_ternary_projections() {
        let cfg = ModelConfig::desk_default(true);
        let mut model: VitModel<f32> = init_model(&cfg, &mut Prng::new(1)).unwrap();
        model.quantize_in_place().unwrap();
        assert_eq!(model.ternary_tensor_count(), 4 * cfg.depth);
        for b in &model.blocks {
            for lin in [&b.qkv, &b.attn_out, &b.mlp_up, &b.mlp_down] {
                match &lin.weight {
                    LinearWeight::Ternary(t) => {
                        assert!(t.gamma() > 0.0);
                        assert!(t.unpack().unwrap().iter().all(|c| (-1..=1).contains(c)));
                    }
                    LinearWeight::Dense(_) => panic!("projection left dense"),
                }
            }
        }
    }

    #[test]
    fn teacher_and_student_share_names_and_shapes() {
        let student: VitModel<f32> =
            init_model(&ModelConfig::desk_default(true), &mut Prng::new(7)).unwrap();
        let teacher: VitModel<f32> =
            init_model(&ModelConfig::desk_default(false), &mut Prng::new(7)).unwrap();
        assert_eq!(student.tensor_names(), teacher.tensor_names());
        let s_shapes: Vec<_> = student
            .dense_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let t_shapes: Vec<_> = teacher
            .dense_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        assert_eq!(s_shapes, t_shapes);
    }

    #[test]
    fn latents_reconstructed_from_ternary_requantize_identically() {
        let cfg = ModelConfig::desk_default(true);
        let mut model: VitModel<f32> = init_model(&cfg, &mut Prng::new(3)).unwrap();
        model.quantize_in_place().unwrap();
        let before: Vec<TernaryTensor<f32>> = model
            .blocks
            .iter()
            .flat_map(|b| [&b.qkv, &b.attn_out, &b.mlp_up, &b.mlp_down])
            .map(|l| match &l.weight {
                LinearWeight::Ternary(t) => t.clone(),
                _ => unreachable!(),
            })
            .collect();
        model.ensure_latents().unwrap();
        model.quantize_in_place().unwrap();
        let after: Vec<TernaryTensor<f32>> = model
            .blocks
            .iter()
            .flat_map(|b| [&b.qkv, &b.attn_out, &b.mlp_up, &b.mlp_down])
            .map(|l| match &l.weight {
                LinearWeight::Ternary(t) => t.clone(),
                _ => unreachable!(),
            })
            .collect();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.unpack().unwrap(), b.unpack().unwrap());
            let rel = (a.gamma() - b.gamma()).abs() / a.gamma().max(f32::MIN_POSITIVE);
            assert!(rel < 1e-6, "gamma drift {} vs {}", a.gamma(), b.gamma());
        }
    }

    #[test]
    fn descriptor_head_normalizes_cls_token() {
        let mut tokens: DenseTensor<f32> = DenseTensor::zeros(vec![3, 4]).unwrap();
        tokens.row_mut(0).copy_from_slice(&[3.0, 4.0, 0.0, 0.0]);
        let d = descriptor_head_cls(&tokens).unwrap();
        assert_eq!(d.values(), &[0.6, 0.8, 0.0, 0.0]);
        assert!((d.l2_norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn descriptor_head_is_scale_invariant_and_idempotent() {
        let mut tokens: DenseTensor<f64> = DenseTensor::zeros(vec![2, 3]).unwrap();
        tokens.row_mut(0).copy_from_slice(&[0.6, 0.8, 0.0]);
        let unit = descriptor_head_cls(&tokens).unwrap();
        assert_eq!(unit.values(), &[0.6, 0.8, 0.0]);
        let scaled = descriptor_head_cls(&tokens.scale(5.0)).unwrap();
        for (a, b) in unit.values().iter().zip(scaled.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn descriptor_head_rejects_zero_cls() {
        let tokens: DenseTensor<f32> = DenseTensor::zeros(vec![2, 4]).unwrap();
        assert!(matches!(
            descriptor_head_cls(&tokens),
            Err(Error::Numeric(_))
        ));
    }
}
