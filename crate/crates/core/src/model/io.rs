//! Bit-exact model file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "TATV"                        4 bytes
//! u32    format version = 1
//! config u32 H, W, C, P, D, L, h; f32 mlp_ratio; u8 head_type; u8 quantized
//! u32    tensor count
//! per tensor:
//!   u16  name length, UTF-8 name
//!   u8   dtype: 0 = f32 dense, 1 = ternary2bit, 2 = ternary2bit + f32 latent
//!   u8   rank, then u32 dims
//!   payload:
//!     dtype 0: f32 row-major values
//!     dtype 1: f32 gamma, packed codes (ceil(numel/4) bytes)
//!     dtype 2: f32 gamma, packed codes, f32 row-major latent values
//! ```
//!
//! Dtype 2 is the resumable-training extension: the codes/gamma mirror
//! what quantizing the stored latent produces, so inference-only readers
//! may ignore the latent payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::ternary::{packed_len, quantize_ternary, QuantConfig, TernaryTensor};

use super::{
    Block, HeadType, LayerNormParams, Linear, LinearWeight, ModelConfig, VitModel,
};

pub const MODEL_MAGIC: &[u8; 4] = b"TATV";
pub const MODEL_VERSION: u32 = 1;

pub const DTYPE_DENSE_F32: u8 = 0;
pub const DTYPE_TERNARY: u8 = 1;
pub const DTYPE_TERNARY_LATENT: u8 = 2;

struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn bytes(&mut self, len: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!(
                    "truncated file: reading {what} at byte offset {}",
                    self.offset
                ))
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += len as u64;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.bytes(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_vec(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.bytes(4 * count, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

enum Payload<'a> {
    Dense(&'a DenseTensor<f32>),
    Ternary(TernaryTensor<f32>),
    TernaryLatent(TernaryTensor<f32>, &'a DenseTensor<f32>),
}

fn projection_payload<'a>(
    lin: &'a Linear<f32>,
    name: &str,
    quantized: bool,
    save_latents: bool,
) -> Result<(String, Payload<'a>)> {
    let payload = if quantized {
        match &lin.weight {
            LinearWeight::Ternary(t) => Payload::Ternary(t.clone().with_name(name)),
            LinearWeight::Dense(latent) => {
                let tern = quantize_ternary(latent, &QuantConfig::default())?.with_name(name);
                if save_latents {
                    Payload::TernaryLatent(tern, latent)
                } else {
                    Payload::Ternary(tern)
                }
            }
        }
    } else {
        match &lin.weight {
            LinearWeight::Dense(w) => Payload::Dense(w),
            LinearWeight::Ternary(_) => {
                return Err(Error::Usage(format!(
                    "{name}: ternary weight in a full-precision model"
                )))
            }
        }
    };
    Ok((name.to_string(), payload))
}

fn dense_only<'a>(name: &str, lin_weight: &'a LinearWeight<f32>) -> Result<&'a DenseTensor<f32>> {
    match lin_weight {
        LinearWeight::Dense(w) => Ok(w),
        LinearWeight::Ternary(_) => Err(Error::Usage(format!(
            "{name}: expected a full-precision tensor"
        ))),
    }
}

/// Serialize a model. `save_latents` switches projection records from
/// dtype 1 to dtype 2 when a trainable latent is present.
pub fn save_model(model: &VitModel<f32>, path: &Path, save_latents: bool) -> Result<()> {
    let cfg = &model.config;
    cfg.validate()?;

    let mut records: Vec<(String, Payload)> = Vec::new();
    records.push((
        "patch_embed.weight".into(),
        Payload::Dense(dense_only("patch_embed.weight", &model.patch_embed.weight)?),
    ));
    records.push(("patch_embed.bias".into(), Payload::Dense(&model.patch_embed.bias)));
    records.push(("cls_token".into(), Payload::Dense(&model.cls_token)));
    records.push(("pos_embed".into(), Payload::Dense(&model.pos_embed)));
    for (i, b) in model.blocks.iter().enumerate() {
        records.push((format!("blocks.{i}.norm1.weight"), Payload::Dense(&b.norm1.weight)));
        records.push((format!("blocks.{i}.norm1.bias"), Payload::Dense(&b.norm1.bias)));
        records.push(projection_payload(
            &b.qkv,
            &format!("blocks.{i}.qkv.weight"),
            cfg.quantized,
            save_latents,
        )?);
        records.push((format!("blocks.{i}.qkv.bias"), Payload::Dense(&b.qkv.bias)));
        records.push(projection_payload(
            &b.attn_out,
            &format!("blocks.{i}.attn_out.weight"),
            cfg.quantized,
            save_latents,
        )?);
        records.push((format!("blocks.{i}.attn_out.bias"), Payload::Dense(&b.attn_out.bias)));
        records.push((format!("blocks.{i}.norm2.weight"), Payload::Dense(&b.norm2.weight)));
        records.push((format!("blocks.{i}.norm2.bias"), Payload::Dense(&b.norm2.bias)));
        records.push(projection_payload(
            &b.mlp_up,
            &format!("blocks.{i}.mlp_up.weight"),
            cfg.quantized,
            save_latents,
        )?);
        records.push((format!("blocks.{i}.mlp_up.bias"), Payload::Dense(&b.mlp_up.bias)));
        records.push(projection_payload(
            &b.mlp_down,
            &format!("blocks.{i}.mlp_down.weight"),
            cfg.quantized,
            save_latents,
        )?);
        records.push((format!("blocks.{i}.mlp_down.bias"), Payload::Dense(&b.mlp_down.bias)));
    }
    records.push(("norm.weight".into(), Payload::Dense(&model.norm.weight)));
    records.push(("norm.bias".into(), Payload::Dense(&model.norm.bias)));

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    for v in [
        cfg.image.0,
        cfg.image.1,
        cfg.image.2,
        cfg.patch,
        cfg.dim,
        cfg.depth,
        cfg.heads,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.mlp_ratio.to_le_bytes())?;
    w.write_all(&[match cfg.head_type {
        HeadType::Cls => 0u8,
    }])?;
    w.write_all(&[cfg.quantized as u8])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;

    for (name, payload) in &records {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        match payload {
            Payload::Dense(t) => {
                w.write_all(&[DTYPE_DENSE_F32, t.shape().len() as u8])?;
                for &dim in t.shape() {
                    w.write_all(&(dim as u32).to_le_bytes())?;
                }
                write_f32s(&mut w, t.data())?;
            }
            Payload::Ternary(t) => {
                w.write_all(&[DTYPE_TERNARY, 2])?;
                w.write_all(&(t.rows() as u32).to_le_bytes())?;
                w.write_all(&(t.cols() as u32).to_le_bytes())?;
                w.write_all(&t.gamma().to_le_bytes())?;
                w.write_all(t.packed())?;
            }
            Payload::TernaryLatent(t, latent) => {
                w.write_all(&[DTYPE_TERNARY_LATENT, 2])?;
                w.write_all(&(t.rows() as u32).to_le_bytes())?;
                w.write_all(&(t.cols() as u32).to_le_bytes())?;
                w.write_all(&t.gamma().to_le_bytes())?;
                w.write_all(t.packed())?;
                write_f32s(&mut w, latent.data())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct RawTensor {
    dtype: u8,
    dims: Vec<usize>,
    dense: Option<DenseTensor<f32>>,
    ternary: Option<TernaryTensor<f32>>,
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<(ModelConfig, u32)> {
    let magic = r.bytes(4, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}: expected \"TATV\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32("format version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}, expected {MODEL_VERSION}"
        )));
    }
    let h = r.u32("config H")? as usize;
    let w = r.u32("config W")? as usize;
    let c = r.u32("config C")? as usize;
    let patch = r.u32("config P")? as usize;
    let dim = r.u32("config D")? as usize;
    let depth = r.u32("config L")? as usize;
    let heads = r.u32("config h")? as usize;
    let mlp_ratio = r.f32("config mlp_ratio")?;
    let head_type = match r.u8("config head_type")? {
        0 => HeadType::Cls,
        other => {
            return Err(Error::Format(format!("unknown head_type tag {other}")));
        }
    };
    let quantized = match r.u8("config quantized")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format(format!("invalid quantized flag {other}")));
        }
    };
    let count = r.u32("tensor count")?;
    let cfg = ModelConfig {
        image: (h, w, c),
        patch,
        dim,
        depth,
        heads,
        mlp_ratio,
        head_type,
        quantized,
    };
    cfg.validate()?;
    Ok((cfg, count))
}

fn read_tensor_record<R: Read>(r: &mut Reader<R>) -> Result<(String, RawTensor)> {
    let name_len = r.u16("tensor name length")? as usize;
    let name = String::from_utf8(r.bytes(name_len, "tensor name")?)
        .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
    let dtype = r.u8("tensor dtype")?;
    let rank = r.u8("tensor rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32("tensor dim")? as usize);
    }
    let numel: usize = dims.iter().product();
    let raw = match dtype {
        DTYPE_DENSE_F32 => {
            let data = r.f32_vec(numel, &format!("{name} payload"))?;
            RawTensor {
                dtype,
                dims: dims.clone(),
                dense: Some(DenseTensor::new(dims, data)?),
                ternary: None,
            }
        }
        DTYPE_TERNARY | DTYPE_TERNARY_LATENT => {
            if rank != 2 {
                return Err(Error::Format(format!(
                    "{name}: ternary tensors must be rank 2, got {rank}"
                )));
            }
            let gamma = r.f32(&format!("{name} gamma"))?;
            let codes = r.bytes(packed_len(numel), &format!("{name} codes"))?;
            let tern =
                TernaryTensor::from_parts([dims[0], dims[1]], codes, gamma, name.clone())?;
            let dense = if dtype == DTYPE_TERNARY_LATENT {
                let data = r.f32_vec(numel, &format!("{name} latent payload"))?;
                Some(DenseTensor::new(dims.clone(), data)?)
            } else {
                None
            };
            RawTensor { dtype, dims, dense, ternary: Some(tern) }
        }
        other => {
            return Err(Error::Format(format!(
                "{name}: unknown dtype tag {other}"
            )));
        }
    };
    Ok((name, raw))
}

type RawMap = std::collections::BTreeMap<String, RawTensor>;

fn take_dense(raw: &mut RawMap, name: &str, shape: &[usize]) -> Result<DenseTensor<f32>> {
    let rec = raw
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    if rec.dtype != DTYPE_DENSE_F32 {
        return Err(Error::Format(format!(
            "{name}: expected dense f32 record, got dtype {}",
            rec.dtype
        )));
    }
    if rec.dims != shape {
        return Err(Error::Format(format!(
            "{name}: shape {:?} does not match config {:?}",
            rec.dims, shape
        )));
    }
    Ok(rec.dense.expect("dense payload"))
}

fn take_projection(
    raw: &mut RawMap,
    quantized: bool,
    name: &str,
    shape: [usize; 2],
) -> Result<LinearWeight<f32>> {
    let rec = raw
        .remove(name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
    if rec.dims != shape {
        return Err(Error::Format(format!(
            "{name}: shape {:?} does not match config {:?}",
            rec.dims, shape
        )));
    }
    match (quantized, rec.dtype) {
        (true, DTYPE_TERNARY) => Ok(LinearWeight::Ternary(rec.ternary.expect("codes"))),
        (true, DTYPE_TERNARY_LATENT) => Ok(LinearWeight::Dense(rec.dense.expect("latent"))),
        (false, DTYPE_DENSE_F32) => Ok(LinearWeight::Dense(rec.dense.expect("dense"))),
        (q, dt) => Err(Error::Format(format!(
            "{name}: dtype {dt} is invalid for quantized={q}"
        ))),
    }
}

/// Load a model, verifying names, shapes and dtypes against the config.
pub fn load_model(path: &Path) -> Result<VitModel<f32>> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    let (cfg, count) = read_header(&mut r)?;

    let mut raw: RawMap = Default::default();
    for _ in 0..count {
        let (name, tensor) = read_tensor_record(&mut r)?;
        if raw.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor record {name}")));
        }
    }

    let d = cfg.dim;
    let n = cfg.tokens();
    let h_mlp = cfg.mlp_hidden();
    let p_len = cfg.patch_len();

    let patch_embed = Linear {
        weight: LinearWeight::Dense(take_dense(&mut raw, "patch_embed.weight", &[d, p_len])?),
        bias: take_dense(&mut raw, "patch_embed.bias", &[d])?,
    };
    let cls_token = take_dense(&mut raw, "cls_token", &[d])?;
    let pos_embed = take_dense(&mut raw, "pos_embed", &[n, d])?;

    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let norm1 = LayerNormParams {
            weight: take_dense(&mut raw, &format!("blocks.{i}.norm1.weight"), &[d])?,
            bias: take_dense(&mut raw, &format!("blocks.{i}.norm1.bias"), &[d])?,
        };
        let qkv = Linear {
            weight: take_projection(
                &mut raw,
                cfg.quantized,
                &format!("blocks.{i}.qkv.weight"),
                [3 * d, d],
            )?,
            bias: take_dense(&mut raw, &format!("blocks.{i}.qkv.bias"), &[3 * d])?,
        };
        let attn_out = Linear {
            weight: take_projection(
                &mut raw,
                cfg.quantized,
                &format!("blocks.{i}.attn_out.weight"),
                [d, d],
            )?,
            bias: take_dense(&mut raw, &format!("blocks.{i}.attn_out.bias"), &[d])?,
        };
        let norm2 = LayerNormParams {
            weight: take_dense(&mut raw, &format!("blocks.{i}.norm2.weight"), &[d])?,
            bias: take_dense(&mut raw, &format!("blocks.{i}.norm2.bias"), &[d])?,
        };
        let mlp_up = Linear {
            weight: take_projection(
                &mut raw,
                cfg.quantized,
                &format!("blocks.{i}.mlp_up.weight"),
                [h_mlp, d],
            )?,
            bias: take_dense(&mut raw, &format!("blocks.{i}.mlp_up.bias"), &[h_mlp])?,
        };
        let mlp_down = Linear {
            weight: take_projection(
                &mut raw,
                cfg.quantized,
                &format!("blocks.{i}.mlp_down.weight"),
                [d, h_mlp],
            )?,
            bias: take_dense(&mut raw, &format!("blocks.{i}.mlp_down.bias"), &[d])?,
        };
        blocks.push(Block { norm1, qkv, attn_out, norm2, mlp_up, mlp_down });
    }

    let norm = LayerNormParams {
        weight: take_dense(&mut raw, "norm.weight", &[d])?,
        bias: take_dense(&mut raw, "norm.bias", &[d])?,
    };

    if let Some(name) = raw.keys().next() {
        return Err(Error::Format(format!("unexpected tensor record {name}")));
    }

    Ok(VitModel { config: cfg, patch_embed, cls_token, pos_embed, blocks, norm })
}

/// Per-tensor metadata of a model file, without building the model.
#[derive(Debug, Clone)]
pub struct TensorRecordInfo {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub payload_bytes: u64,
    pub gamma: Option<f32>,
}

#[derive(Debug, Clone)]
pub struct ModelFileSummary {
    pub config: ModelConfig,
    pub tensors: Vec<TensorRecordInfo>,
    pub payload_bytes: u64,
    pub file_bytes: u64,
}

impl ModelFileSummary {
    /// Bytes the same tensors would occupy as plain 32-bit floats.
    pub fn f32_equivalent_bytes(&self) -> u64 {
        self.tensors
            .iter()
            .map(|t| 4 * t.dims.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Parse a model file into per-tensor size/metadata records.
pub fn read_model_summary(path: &Path) -> Result<ModelFileSummary> {
    let file_bytes = std::fs::metadata(path)?.len();
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    let (config, count) = read_header(&mut r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    let mut payload_bytes = 0u64;
    for _ in 0..count {
        let (name, raw) = read_tensor_record(&mut r)?;
        let numel: usize = raw.dims.iter().product();
        let bytes = match raw.dtype {
            DTYPE_DENSE_F32 => 4 * numel as u64,
            DTYPE_TERNARY => 4 + packed_len(numel) as u64,
            DTYPE_TERNARY_LATENT => 4 + packed_len(numel) as u64 + 4 * numel as u64,
            _ => unreachable!("validated by read_tensor_record"),
        };
        payload_bytes += bytes;
        tensors.push(TensorRecordInfo {
            name,
            dtype: raw.dtype,
            dims: raw.dims,
            payload_bytes: bytes,
            gamma: raw.ternary.map(|t| t.gamma()),
        });
    }
    Ok(ModelFileSummary { config, tensors, payload_bytes, file_bytes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::OpsCounter;
    use crate::model::{forward, init_model};
    use crate::tensor::{randn, Prng};

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tmpdir();
        let cfg = ModelConfig::desk_default(true);
        let mut model = init_model::<f32>(&cfg, &mut Prng::new(17)).unwrap();
        model.quantize_in_place().unwrap();

        let p1 = dir.path().join("a.tatv");
        let p2 = dir.path().join("b.tatv");
        save_model(&model, &p1, false).unwrap();
        let loaded = load_model(&p1).unwrap();
        save_model(&loaded, &p2, false).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn latent_roundtrip_preserves_training_state() {
        let dir = tmpdir();
        let cfg = ModelConfig::desk_default(true);
        let model = init_model::<f32>(&cfg, &mut Prng::new(23)).unwrap();

        let p1 = dir.path().join("latent.tatv");
        let p2 = dir.path().join("latent2.tatv");
        save_model(&model, &p1, true).unwrap();
        let loaded = load_model(&p1).unwrap();
        assert_eq!(loaded, model);
        save_model(&loaded, &p2, true).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_forwards_identically() {
        let dir = tmpdir();
        let cfg = ModelConfig::desk_default(true);
        let mut model = init_model::<f32>(&cfg, &mut Prng::new(31)).unwrap();
        model.quantize_in_place().unwrap();
        let path = dir.path().join("m.tatv");
        save_model(&model, &path, false).unwrap();
        let loaded = load_model(&path).unwrap();

        let img = randn::<f32>(&mut Prng::new(4), &[32, 32, 1]).unwrap();
        let mut c1 = OpsCounter::new();
        let mut c2 = OpsCounter::new();
        let (t1, _) = forward(&model, &img, 0.4, &mut c1).unwrap();
        let (t2, _) = forward(&loaded, &img, 0.4, &mut c2).unwrap();
        assert_eq!(t1.data(), t2.data());
    }

    #[test]
    fn ternary_payload_matches_codec_arithmetic() {
        let dir = tmpdir();
        let cfg = ModelConfig::desk_default(true);
        let mut model = init_model::<f32>(&cfg, &mut Prng::new(2)).unwrap();
        model.quantize_in_place().unwrap();
        let path = dir.path().join("m.tatv");
        save_model(&model, &path, false).unwrap();
        let summary = read_model_summary(&path).unwrap();
        for t in summary.tensors.iter().filter(|t| t.dtype == DTYPE_TERNARY) {
            let numel: usize = t.dims.iter().product();
            assert_eq!(t.payload_bytes, 4 + numel.div_ceil(4) as u64, "{}", t.name);
        }
    }

    #[test]
    fn student_file_is_at_least_five_times_smaller() {
        let dir = tmpdir();
        let mut student =
            init_model::<f32>(&ModelConfig::desk_default(true), &mut Prng::new(8)).unwrap();
        student.quantize_in_place().unwrap();
        let teacher =
            init_model::<f32>(&ModelConfig::desk_default(false), &mut Prng::new(8)).unwrap();

        let sp = dir.path().join("s.tatv");
        let tp = dir.path().join("t.tatv");
        save_model(&student, &sp, false).unwrap();
        save_model(&teacher, &tp, false).unwrap();
        let sb = std::fs::metadata(&sp).unwrap().len() as f64;
        let tb = std::fs::metadata(&tp).unwrap().len() as f64;
        assert!(tb / sb >= 5.0, "ratio {}", tb / sb);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tmpdir();
        let cfg = ModelConfig::desk_default(true);
        let mut model = init_model::<f32>(&cfg, &mut Prng::new(5)).unwrap();
        model.quantize_in_place().unwrap();
        let path = dir.path().join("m.tatv");
        save_model(&model, &path, false).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        let p = dir.path().join("bad_magic.tatv");
        std::fs::write(&p, &bad).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("TATV"), "{err}");

        // Version mismatch.
        let mut bad = good.clone();
        bad[4] = 9;
        let p = dir.path().join("bad_version.tatv");
        std::fs::write(&p, &bad).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        // Truncated tensor payload.
        let p = dir.path().join("truncated.tatv");
        std::fs::write(&p, &good[..good.len() - 10]).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        // Reserved ternary code: find the first ternary payload and poison it.
        let summary = read_model_summary(&path).unwrap();
        assert!(summary.tensors.iter().any(|t| t.dtype == DTYPE_TERNARY));
        // Walk the records to locate a code byte: header is
        // 4 + 4 + 7*4 + 4 + 1 + 1 + 4 bytes, then records follow.
        let mut off = 4 + 4 + 28 + 4 + 1 + 1 + 4;
        let mut poisoned = None;
        for t in &summary.tensors {
            off += 2 + t.name.len() + 1 + 1 + 4 * t.dims.len();
            if t.dtype == DTYPE_TERNARY {
                poisoned = Some(off + 4); // skip gamma, first code byte
                break;
            }
            off += t.payload_bytes as usize;
        }
        let mut bad = good.clone();
        bad[poisoned.unwrap()] = 0xFF;
        let p = dir.path().join("bad_code.tatv");
        std::fs::write(&p, &bad).unwrap();
        let err = load_model(&p).unwrap_err();
        assert!(matches!(err, Error::Codec(_)), "{err}");
    }
}
