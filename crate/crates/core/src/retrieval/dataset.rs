//! Synthetic place-recognition dataset: each place is a seeded
//! low-frequency noise field; queries are the base pattern under additive
//! Gaussian noise, multiplicative brightness jitter and a circular integer
//! pixel shift.
//!
//! On-disk layout: one directory per place holding raw tensor images
//! (magic "TIMG", little-endian u32 version/H/W/C, then f32 row-major
//! pixels, channels innermost) plus a `manifest.json` listing places,
//! file roles and ground truth.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Prng};

pub const IMAGE_MAGIC: &[u8; 4] = b"TIMG";
pub const IMAGE_VERSION: u32 = 1;

/// Coarse grid side of the per-place noise field before upsampling.
const PATTERN_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetConfig {
    pub num_places: usize,
    pub refs_per_place: usize,
    pub queries_per_place: usize,
    /// Image height, width, channels.
    pub image: (usize, usize, usize),
    pub noise_std: f64,
    pub brightness_jitter: f64,
    pub max_shift_px: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            num_places: 50,
            refs_per_place: 1,
            queries_per_place: 2,
            image: (32, 32, 1),
            noise_std: 0.1,
            brightness_jitter: 0.1,
            max_shift_px: 2,
            seed: 0,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_places == 0 || self.refs_per_place == 0 || self.queries_per_place == 0 {
            return Err(Error::Config(
                "num_places, refs_per_place and queries_per_place must be >= 1".into(),
            ));
        }
        let (h, w, c) = self.image;
        if h < 2 || w < 2 || c == 0 {
            return Err(Error::Config(format!(
                "image must be at least 2x2 with >= 1 channel, got {:?}",
                self.image
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        if self.brightness_jitter < 0.0 || !self.brightness_jitter.is_finite() {
            return Err(Error::Config(format!(
                "brightness_jitter must be finite and >= 0, got {}",
                self.brightness_jitter
            )));
        }
        if self.max_shift_px as f64 >= h.min(w) as f64 / 4.0 {
            return Err(Error::Config(format!(
                "max_shift_px {} must be < min(H, W)/4 = {}",
                self.max_shift_px,
                h.min(w) as f64 / 4.0
            )));
        }
        Ok(())
    }
}

/// One image with its place and within-place id (references first).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub place: u32,
    pub image_id: u32,
    pub pixels: DenseTensor<f32>,
}

/// Ground truth: query id -> correct reference ids.
pub type GroundTruth = BTreeMap<(u32, u32), Vec<(u32, u32)>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticDatasetConfig,
    pub references: Vec<ImageRecord>,
    pub queries: Vec<ImageRecord>,
    pub ground_truth: GroundTruth,
}

impl SyntheticDataset {
    /// References and queries pooled (distillation image pool).
    pub fn all_images(&self) -> Vec<DenseTensor<f32>> {
        self.references
            .iter()
            .chain(&self.queries)
            .map(|r| r.pixels.clone())
            .collect()
    }

    /// Images grouped by place index (fine-tune batch source).
    pub fn grouped_by_place(&self) -> Vec<Vec<DenseTensor<f32>>> {
        let mut groups = vec![Vec::new(); self.config.num_places];
        for rec in self.references.iter().chain(&self.queries) {
            groups[rec.place as usize].push(rec.pixels.clone());
        }
        groups
    }
}

/// Smooth per-place base pattern: a `PATTERN_GRID`-sided standard-normal
/// grid per channel, bilinearly upsampled (corner-aligned) to `H x W`.
fn base_pattern(prng: &mut Prng, h: usize, w: usize, c: usize) -> DenseTensor<f32> {
    let g = PATTERN_GRID;
    let mut grid = vec![0.0f64; c * g * g];
    for v in grid.iter_mut() {
        *v = prng.normal();
    }
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        let gy = y as f64 * (g - 1) as f64 / (h - 1) as f64;
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(g - 1);
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 * (g - 1) as f64 / (w - 1) as f64;
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(g - 1);
            let fx = gx - x0 as f64;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| grid[(ch * g + yy) * g + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(y * w + x) * c + ch] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    DenseTensor::new(vec![h, w, c], out).expect("pattern shape")
}

/// Query view of a base pattern: circular shift by `(dy, dx)`, brightness
/// scale `1 + jitter`, then per-pixel additive Gaussian noise.
fn perturb(
    base: &DenseTensor<f32>,
    prng: &mut Prng,
    cfg: &SyntheticDatasetConfig,
) -> DenseTensor<f32> {
    let (h, w, c) = cfg.image;
    let span = 2 * cfg.max_shift_px + 1;
    let dy = prng.below(span) as isize - cfg.max_shift_px as isize;
    let dx = prng.below(span) as isize - cfg.max_shift_px as isize;
    let jitter = prng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);
    let scale = (1.0 + jitter) as f32;

    let src = base.data();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            for ch in 0..c {
                let noise = (prng.normal() * cfg.noise_std) as f32;
                out[(y * w + x) * c + ch] = src[(sy * w + sx) * c + ch] * scale + noise;
            }
        }
    }
    DenseTensor::new(vec![h, w, c], out).expect("query shape")
}

/// Generate the dataset deterministically from its config.
pub fn gen_synthetic_dataset(cfg: &SyntheticDatasetConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (h, w, c) = cfg.image;
    let mut prng = Prng::new(cfg.seed);
    let mut references = Vec::new();
    let mut queries = Vec::new();
    let mut ground_truth = GroundTruth::new();

    for p in 0..cfg.num_places as u32 {
        let base = base_pattern(&mut prng, h, w, c);
        let ref_ids: Vec<(u32, u32)> = (0..cfg.refs_per_place as u32).map(|r| (p, r)).collect();
        for &(_, r) in &ref_ids {
            references.push(ImageRecord { place: p, image_id: r, pixels: base.clone() });
        }
        for q in 0..cfg.queries_per_place as u32 {
            let image_id = cfg.refs_per_place as u32 + q;
            let pixels = perturb(&base, &mut prng, cfg);
            ground_truth.insert((p, image_id), ref_ids.clone());
            queries.push(ImageRecord { place: p, image_id, pixels });
        }
    }
    Ok(SyntheticDataset { config: cfg.clone(), references, queries, ground_truth })
}

/// Write one raw tensor image.
pub fn write_timg(path: &Path, image: &DenseTensor<f32>) -> Result<()> {
    if image.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "TIMG expects [H, W, C], got {:?}",
            image.shape()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(IMAGE_MAGIC)?;
    f.write_all(&IMAGE_VERSION.to_le_bytes())?;
    for &dim in image.shape() {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in image.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Read one raw tensor image.
pub fn read_timg(path: &Path) -> Result<DenseTensor<f32>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut head = [0u8; 4 + 4 * 4];
    f.read_exact(&mut head).map_err(|e| truncated(path, e))?;
    if &head[..4] != IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, expected \"TIMG\"",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != IMAGE_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported TIMG version {version}",
            path.display()
        )));
    }
    let (h, w, c) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let numel = h * w * c;
    let mut payload = vec![0u8; 4 * numel];
    f.read_exact(&mut payload).map_err(|e| truncated(path, e))?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    DenseTensor::new(vec![h, w, c], data)
}

fn truncated(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("{}: truncated TIMG file", path.display()))
    } else {
        Error::Io(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestImage {
    id: u32,
    role: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestPlace {
    id: u32,
    dir: String,
    images: Vec<ManifestImage>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestGroundTruth {
    query: (u32, u32),
    refs: Vec<(u32, u32)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: SyntheticDatasetConfig,
    places: Vec<ManifestPlace>,
    ground_truth: Vec<ManifestGroundTruth>,
}

fn image_rel_path(place: u32, role: &str, idx: u32) -> String {
    format!("place_{place:04}/{role}_{idx:03}.timg")
}

/// Write the dataset directory: per-place subdirectories of TIMG files
/// plus `manifest.json`.
pub fn save_dataset(ds: &SyntheticDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut places: Vec<ManifestPlace> = (0..ds.config.num_places as u32)
        .map(|p| ManifestPlace {
            id: p,
            dir: format!("place_{p:04}"),
            images: Vec::new(),
        })
        .collect();
    for place in &places {
        std::fs::create_dir_all(dir.join(&place.dir))?;
    }
    for rec in &ds.references {
        let rel = image_rel_path(rec.place, "ref", rec.image_id);
        write_timg(&dir.join(&rel), &rec.pixels)?;
        places[rec.place as usize].images.push(ManifestImage {
            id: rec.image_id,
            role: "ref".into(),
            file: rel,
        });
    }
    for rec in &ds.queries {
        let idx = rec.image_id - ds.config.refs_per_place as u32;
        let rel = image_rel_path(rec.place, "query", idx);
        write_timg(&dir.join(&rel), &rec.pixels)?;
        places[rec.place as usize].images.push(ManifestImage {
            id: rec.image_id,
            role: "query".into(),
            file: rel,
        });
    }
    let manifest = Manifest {
        version: 1,
        config: ds.config.clone(),
        places,
        ground_truth: ds
            .ground_truth
            .iter()
            .map(|(q, refs)| ManifestGroundTruth { query: *q, refs: refs.clone() })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json.as_bytes())?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    let mut references = Vec::new();
    let mut queries = Vec::new();
    for place in &manifest.places {
        for img in &place.images {
            let pixels = read_timg(&dir.join(&img.file))?;
            let rec = ImageRecord { place: place.id, image_id: img.id, pixels };
            match img.role.as_str() {
                "ref" => references.push(rec),
                "query" => queries.push(rec),
                other => {
                    return Err(Error::Format(format!(
                        "unknown image role {other:?} in manifest"
                    )))
                }
            }
        }
    }
    let ground_truth: GroundTruth = manifest
        .ground_truth
        .into_iter()
        .map(|g| (g.query, g.refs))
        .collect();
    Ok(SyntheticDataset { config: manifest.config, references, queries, ground_truth })
}

/// Directory of a place (exposed for inspection tooling).
pub fn place_dir(dir: &Path, place: u32) -> PathBuf {
    dir.join(format!("place_{place:04}"))
}
