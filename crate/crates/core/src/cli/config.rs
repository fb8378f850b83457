//! JSON run configuration.
//!
//! Every field is optional with the documented default; unknown keys are
//! rejected. `schema_version` is required and must be 1. Seed precedence
//! is flag > `TAT_SEED` > config > 0; the dataset section carries its own
//! seed and falls back to the run seed when unset.
//!
//! Full schema with defaults:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "seed": 0,
//!   "model": {
//!     "image": [32, 32, 1], "patch": 8, "dim": 64,
//!     "depth": 4, "heads": 4, "mlp_ratio": 4.0
//!   },
//!   "dataset": {
//!     "num_places": 50, "refs_per_place": 1, "queries_per_place": 2,
//!     "image": [32, 32, 1], "noise_std": 0.1, "brightness_jitter": 0.1,
//!     "max_shift_px": 2, "seed": <run seed>
//!   },
//!   "train_distill": {
//!     "steps": 300, "batch_size": 4, "learning_rate": 0.001,
//!     "s_start": 0.1, "s_end": 0.6, "save_latents": false
//!   },
//!   "train_finetune": {
//!     "steps": 100, "batch_size": 8, "learning_rate": 0.0005,
//!     "sparsity": 0.0, "images_per_place": 2,
//!     "trainable": "last_two", "save_latents": false
//!   },
//!   "eval": { "sparsity_levels": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6] }
//! }
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gate::ScheduleConfig;
use crate::model::{HeadType, ModelConfig};
use crate::retrieval::SyntheticDatasetConfig;
use crate::train::{AdamParams, TrainConfig};

/// Which tensors fine-tuning updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSet {
    /// Descriptor head, final LayerNorm and the last two blocks.
    LastTwo,
    /// Every tensor.
    All,
}

#[derive(Debug, Clone)]
pub struct DistillSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub s_start: f64,
    pub s_end: f64,
    pub save_latents: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sparsity: f64,
    pub images_per_place: usize,
    pub trainable: TrainableSet,
    pub save_latents: bool,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub sparsity_levels: Vec<f64>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset: SyntheticDatasetConfig,
    pub distill: DistillSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Training config for the distillation stage; the sparsity ramp
    /// spans the run.
    pub fn distill_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.distill.steps,
            batch_size: self.distill.batch_size,
            learning_rate: self.distill.learning_rate,
            adam: AdamParams::default(),
            schedule: ScheduleConfig {
                s_start: self.distill.s_start,
                s_end: self.distill.s_end,
                total_steps: self.distill.steps.saturating_sub(1).max(1),
            },
            seed: self.seed,
        }
    }

    pub fn finetune_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.finetune.steps,
            batch_size: self.finetune.batch_size,
            learning_rate: self.finetune.learning_rate,
            adam: AdamParams::default(),
            schedule: ScheduleConfig {
                s_start: 0.0,
                s_end: 0.0,
                total_steps: self.finetune.steps.max(1),
            },
            seed: self.seed,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    image: Option<(usize, usize, usize)>,
    patch: Option<usize>,
    dim: Option<usize>,
    depth: Option<usize>,
    heads: Option<usize>,
    mlp_ratio: Option<f32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    num_places: Option<usize>,
    refs_per_place: Option<usize>,
    queries_per_place: Option<usize>,
    image: Option<(usize, usize, usize)>,
    noise_std: Option<f64>,
    brightness_jitter: Option<f64>,
    max_shift_px: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistill {
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    s_start: Option<f64>,
    s_end: Option<f64>,
    save_latents: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFinetune {
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    sparsity: Option<f64>,
    images_per_place: Option<usize>,
    trainable: Option<String>,
    save_latents: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    sparsity_levels: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    schema_version: Option<u32>,
    seed: Option<u64>,
    model: Option<RawModel>,
    dataset: Option<RawDataset>,
    train_distill: Option<RawDistill>,
    train_finetune: Option<RawFinetune>,
    eval: Option<RawEval>,
}

/// Load and resolve a run config. `path = None` means all defaults.
/// `seed_override` is the already-resolved flag/env seed, if any.
pub fn load_run_config(path: Option<&Path>, seed_override: Option<u64>) -> Result<RunConfig> {
    let raw: RawRunConfig = match path {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RawRunConfig {
            schema_version: Some(1),
            seed: None,
            model: None,
            dataset: None,
            train_distill: None,
            train_finetune: None,
            eval: None,
        },
    };

    match raw.schema_version {
        Some(1) => {}
        Some(v) => {
            return Err(Error::Config(format!(
                "unsupported schema_version {v}, expected 1"
            )))
        }
        None => return Err(Error::Config("missing required field schema_version".into())),
    }

    let seed = seed_override.or(raw.seed).unwrap_or(0);

    let m = raw.model.unwrap_or_default();
    let model = ModelConfig {
        image: m.image.unwrap_or((32, 32, 1)),
        patch: m.patch.unwrap_or(8),
        dim: m.dim.unwrap_or(64),
        depth: m.depth.unwrap_or(4),
        heads: m.heads.unwrap_or(4),
        mlp_ratio: m.mlp_ratio.unwrap_or(4.0),
        head_type: HeadType::Cls,
        quantized: true,
    };
    model.validate()?;

    let d = raw.dataset.unwrap_or_default();
    let dataset = SyntheticDatasetConfig {
        num_places: d.num_places.unwrap_or(50),
        refs_per_place: d.refs_per_place.unwrap_or(1),
        queries_per_place: d.queries_per_place.unwrap_or(2),
        image: d.image.unwrap_or(model.image),
        noise_std: d.noise_std.unwrap_or(0.1),
        brightness_jitter: d.brightness_jitter.unwrap_or(0.1),
        max_shift_px: d.max_shift_px.unwrap_or(2),
        seed: d.seed.unwrap_or(seed),
    };
    dataset.validate()?;

    let ds = raw.train_distill.unwrap_or_default();
    let distill = DistillSection {
        steps: ds.steps.unwrap_or(300),
        batch_size: ds.batch_size.unwrap_or(4),
        learning_rate: ds.learning_rate.unwrap_or(1e-3),
        s_start: ds.s_start.unwrap_or(0.10),
        s_end: ds.s_end.unwrap_or(0.60),
        save_latents: ds.save_latents.unwrap_or(false),
    };
    if !(0.0 <= distill.s_start && distill.s_start <= distill.s_end && distill.s_end < 1.0) {
        return Err(Error::Config(format!(
            "train_distill sparsity range {}..{} invalid",
            distill.s_start, distill.s_end
        )));
    }

    let ft = raw.train_finetune.unwrap_or_default();
    let trainable = match ft.trainable.as_deref() {
        None | Some("last_two") => TrainableSet::LastTwo,
        Some("all") => TrainableSet::All,
        Some(other) => {
            return Err(Error::Config(format!(
                "train_finetune.trainable must be \"last_two\" or \"all\", got {other:?}"
            )))
        }
    };
    let finetune = FinetuneSection {
        steps: ft.steps.unwrap_or(100),
        batch_size: ft.batch_size.unwrap_or(8),
        learning_rate: ft.learning_rate.unwrap_or(5e-4),
        sparsity: ft.sparsity.unwrap_or(0.0),
        images_per_place: ft.images_per_place.unwrap_or(2),
        trainable,
        save_latents: ft.save_latents.unwrap_or(false),
    };
    if !(0.0..1.0).contains(&finetune.sparsity) {
        return Err(Error::Config(format!(
            "train_finetune.sparsity {} outside [0, 1)",
            finetune.sparsity
        )));
    }

    let ev = raw.eval.unwrap_or_default();
    let sparsity_levels = ev
        .sparsity_levels
        .unwrap_or_else(|| (0..7).map(|i| 0.1 * i as f64).collect());
    for &s in &sparsity_levels {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!(
                "eval.sparsity_levels entry {s} outside [0, 1)"
            )));
        }
    }

    Ok(RunConfig {
        seed,
        model,
        dataset,
        distill,
        finetune,
        eval: EvalSection { sparsity_levels },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_config_resolves_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, r#"{"schema_version": 1}"#);
        let cfg = load_run_config(Some(&p), None).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.model.dim, 64);
        assert_eq!(cfg.dataset.num_places, 50);
        assert_eq!(cfg.distill.steps, 300);
        assert_eq!(cfg.finetune.trainable, TrainableSet::LastTwo);
        assert_eq!(cfg.eval.sparsity_levels.len(), 7);
    }

    #[test]
    fn missing_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, r#"{"seed": 3}"#);
        let err = load_run_config(Some(&p), None).unwrap_err();
        assert!(err.to_string().contains("schema_version"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            r#"{"schema_version": 1, "model": {"dimension": 32}}"#,
        );
        let err = load_run_config(Some(&p), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn seed_precedence_flag_over_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, r#"{"schema_version": 1, "seed": 5}"#);
        assert_eq!(load_run_config(Some(&p), None).unwrap().seed, 5);
        assert_eq!(load_run_config(Some(&p), Some(9)).unwrap().seed, 9);
        // Dataset seed follows the effective seed unless pinned.
        assert_eq!(load_run_config(Some(&p), Some(9)).unwrap().dataset.seed, 9);
    }

    #[test]
    fn dataset_seed_can_be_pinned_independently() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            r#"{"schema_version": 1, "seed": 5, "dataset": {"seed": 77}}"#,
        );
        let cfg = load_run_config(Some(&p), Some(9)).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.seed, 77);
    }

    #[test]
    fn invalid_trainable_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            r#"{"schema_version": 1, "train_finetune": {"trainable": "everything"}}"#,
        );
        assert!(load_run_config(Some(&p), None).is_err());
    }
}
