//! Command implementations and the JSON run configuration.
//!
//! Exit-code contract: 0 success, 2 config/validation, 3 I/O or file
//! format, 4 numeric failure (non-finite loss). Every artifact a command
//! writes is deterministic per config and seed; outputs are only written
//! after their producing stage has fully succeeded, so a failed run
//! leaves no partial artifacts.

mod config;

pub use config::{load_run_config, RunConfig, TrainableSet};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::count_model_ops;
use crate::model::{
    init_model, load_model, read_model_summary, save_model, ModelConfig, VitModel,
};
use crate::retrieval::{
    extract_descriptors, gen_synthetic_dataset, load_dataset, memory_report, save_dataset, sweep,
    write_descriptor_db, write_sweep_csv,
};
use crate::tensor::Prng;
use crate::train::{
    train_distill, train_finetune, FinetuneConfig, FreezeMask, MultisimParams, StepRecord,
};

/// Stable exit code for an error class.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) | Error::Usage(_) | Error::Dimension(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Codec(_) | Error::Data(_) | Error::Json(_) => 3,
        Error::Numeric(_) => 4,
    }
}

/// Loss-curve CSV: `step,sparsity,loss`, sparsity with 4 decimals, loss
/// with 6 significant digits.
pub fn write_loss_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,sparsity,loss").expect("write to vec");
    for r in records {
        writeln!(out, "{},{:.4},{:.5e}", r.step, r.sparsity, r.loss).expect("write to vec");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generate and write the synthetic dataset; prints summary counts.
pub fn cmd_gen_data(run: &RunConfig, out: &Path) -> Result<()> {
    let ds = gen_synthetic_dataset(&run.dataset)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote dataset: places={} references={} queries={} dir={}",
        run.dataset.num_places,
        ds.references.len(),
        ds.queries.len(),
        out.display()
    );
    Ok(())
}

/// Which twin to initialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Student,
    Teacher,
}

/// Initialize a model file from the config. Students keep their latents
/// (resumable); teachers are plain f32.
pub fn cmd_init(run: &RunConfig, kind: ModelKind, out: &Path) -> Result<()> {
    let cfg = ModelConfig {
        quantized: kind == ModelKind::Student,
        ..run.model.clone()
    };
    let model: VitModel<f32> = init_model(&cfg, &mut Prng::new(run.seed))?;
    save_model(&model, out, kind == ModelKind::Student)?;
    println!(
        "initialized {} model: dim={} depth={} file={}",
        if kind == ModelKind::Student { "student" } else { "teacher" },
        cfg.dim,
        cfg.depth,
        out.display()
    );
    Ok(())
}

fn default_losses_path(out: &Path) -> std::path::PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".losses.csv");
    std::path::PathBuf::from(os)
}

/// Distillation stage: teacher from file, student either resumed from a
/// latent checkpoint or freshly initialized from the config. The training
/// pool is the config's synthetic dataset, generated in memory.
pub fn cmd_distill(
    run: &RunConfig,
    teacher_path: &Path,
    resume: Option<&Path>,
    out: &Path,
    losses: Option<&Path>,
) -> Result<()> {
    let teacher = load_model(teacher_path)?;
    let mut student = match resume {
        Some(path) => {
            let m = load_model(path)?;
            if !m.config.quantized {
                return Err(Error::Usage(format!(
                    "{}: resume model must be a quantized student",
                    path.display()
                )));
            }
            m
        }
        None => {
            let cfg = ModelConfig { quantized: true, ..run.model.clone() };
            init_model(&cfg, &mut Prng::new(run.seed))?
        }
    };

    let dataset = gen_synthetic_dataset(&run.dataset)?;
    let images = dataset.all_images();
    let cfg = run.distill_train_config();
    let records = train_distill(&mut student, &teacher, &images, &cfg)?;

    save_model(&student, out, run.distill.save_latents)?;
    let losses_path = losses
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| default_losses_path(out));
    write_loss_csv(&records, &losses_path)?;
    let final_loss = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "distilled {} steps, final loss {:.5e}; model={} losses={}",
        records.len(),
        final_loss,
        out.display(),
        losses_path.display()
    );
    Ok(())
}

/// Fine-tuning stage on a dataset directory.
pub fn cmd_finetune(
    run: &RunConfig,
    model_path: &Path,
    data: &Path,
    out: &Path,
    losses: Option<&Path>,
) -> Result<()> {
    let mut model = load_model(model_path)?;
    let dataset = load_dataset(data)?;
    let places = dataset.grouped_by_place();

    let freeze = match run.finetune.trainable {
        TrainableSet::LastTwo => FreezeMask::head_and_last_two(&model),
        TrainableSet::All => FreezeMask::all(&model),
    };
    let fcfg = FinetuneConfig {
        train: run.finetune_train_config(),
        sparsity: run.finetune.sparsity,
        images_per_place: run.finetune.images_per_place,
        multisim: MultisimParams::default(),
    };
    let records = train_finetune(&mut model, &places, &fcfg, &freeze)?;

    save_model(&model, out, run.finetune.save_latents)?;
    let losses_path = losses
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| default_losses_path(out));
    write_loss_csv(&records, &losses_path)?;
    let final_loss = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "fine-tuned {} steps, final loss {:.5e}; model={} losses={}",
        records.len(),
        final_loss,
        out.display(),
        losses_path.display()
    );
    Ok(())
}

/// Parse a comma-separated sparsity list, each value in [0, 1).
pub fn parse_sparsity_list(text: &str) -> Result<Vec<f64>> {
    let mut levels = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let v: f64 = part
            .parse()
            .map_err(|_| Error::Parameter(format!("invalid sparsity value {part:?}")))?;
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Parameter(format!(
                "sparsity {v} outside [0, 1)"
            )));
        }
        levels.push(v);
    }
    if levels.is_empty() {
        return Err(Error::Parameter("empty sparsity list".into()));
    }
    Ok(levels)
}

/// Accuracy-vs-compute sweep over sparsity levels; writes the CSV and
/// prints the endpoint rows.
pub fn cmd_sweep(
    model_path: &Path,
    data: &Path,
    levels: &[f64],
    out: &Path,
    threads: usize,
) -> Result<()> {
    let model = load_model(model_path)?;
    let model_bytes = std::fs::metadata(model_path)?.len();
    let dataset = load_dataset(data)?;
    let results = sweep(&model, model_bytes, &dataset, levels, threads)?;
    write_sweep_csv(&results, out)?;

    let first = results.first().expect("at least one level");
    let last = results.last().expect("at least one level");
    println!(
        "sweep endpoints: s={:.4} recall@1={:.6} tops={:.6e} | s={:.4} recall@1={:.6} tops={:.6e}",
        first.sparsity,
        first.recall_at[&1],
        first.tops_per_query,
        last.sparsity,
        last.recall_at[&1],
        last.tops_per_query,
    );
    let at = |s: f64| results.iter().find(|r| (r.sparsity - s).abs() < 1e-9);
    if let (Some(r0), Some(r4)) = (at(0.0), at(0.4)) {
        println!(
            "recall@1 delta (s=0.4 vs s=0.0): {:+.6}",
            r4.recall_at[&1] - r0.recall_at[&1]
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Extract a descriptor DB for one split at one sparsity level.
pub fn cmd_extract(
    model_path: &Path,
    data: &Path,
    sparsity: f64,
    split: &str,
    out: &Path,
    threads: usize,
) -> Result<()> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Parameter(format!(
            "sparsity {sparsity} outside [0, 1)"
        )));
    }
    let model = load_model(model_path)?;
    let dataset = load_dataset(data)?;
    let records: Vec<_> = match split {
        "refs" => dataset.references.clone(),
        "queries" => dataset.queries.clone(),
        "all" => dataset
            .references
            .iter()
            .chain(&dataset.queries)
            .cloned()
            .collect(),
        other => {
            return Err(Error::Parameter(format!(
                "unknown split {other:?} (expected refs, queries or all)"
            )))
        }
    };
    let index = extract_descriptors(&model, &records, sparsity, threads)?;
    write_descriptor_db(out, &index)?;
    println!(
        "extracted {} descriptors (dim {}) at s={:.4} into {}",
        index.len(),
        index.dim(),
        sparsity,
        out.display()
    );
    Ok(())
}

const DTYPE_NAMES: [&str; 3] = ["f32", "ternary2bit", "ternary2bit+latent"];

/// Print the per-tensor table of a model file.
pub fn cmd_inspect(model_path: &Path) -> Result<()> {
    let summary = read_model_summary(model_path)?;
    println!(
        "model {}: image={:?} patch={} dim={} depth={} heads={} quantized={}",
        model_path.display(),
        summary.config.image,
        summary.config.patch,
        summary.config.dim,
        summary.config.depth,
        summary.config.heads,
        summary.config.quantized
    );
    println!("{:<28} {:<20} {:<14} {:>10}  gamma", "name", "dtype", "shape", "bytes");
    for t in &summary.tensors {
        let dtype = DTYPE_NAMES
            .get(t.dtype as usize)
            .copied()
            .unwrap_or("unknown");
        let gamma = t
            .gamma
            .map(|g| format!("{g:.6}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:<28} {:<20} {:<14} {:>10}  {}",
            t.name,
            dtype,
            format!("{:?}", t.dims),
            t.payload_bytes,
            gamma
        );
    }
    let f32_bytes = summary.f32_equivalent_bytes();
    println!(
        "total payload {} bytes, file {} bytes, f32-equivalent {} bytes (ratio {:.2}x)",
        summary.payload_bytes,
        summary.file_bytes,
        f32_bytes,
        f32_bytes as f64 / summary.payload_bytes as f64
    );
    Ok(())
}

/// Print the per-tensor memory comparison of two model files.
pub fn cmd_memory_report(model_path: &Path, baseline_path: &Path) -> Result<()> {
    let report = memory_report(model_path, baseline_path)?;
    println!("{:<28} {:>12} {:>14}", "name", "bytes", "baseline_bytes");
    for row in &report.rows {
        println!("{:<28} {:>12} {:>14}", row.name, row.bytes, row.baseline_bytes);
    }
    println!(
        "file {} bytes vs baseline {} bytes: ratio {:.3}x",
        report.file_bytes,
        report.baseline_file_bytes,
        report.ratio()
    );
    Ok(())
}

/// Closed-form ops table for a model config (used by `ops` inspection).
pub fn cmd_ops(model_path: &Path, levels: &[f64]) -> Result<()> {
    let summary = read_model_summary(model_path)?;
    println!("sparsity,macs_per_query,tops_per_query");
    for &s in levels {
        let macs = count_model_ops(&summary.config, s)?;
        println!("{:.4},{},{:.6e}", s, macs, crate::kernels::tops_from_macs(macs));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_list_parsing() {
        assert_eq!(parse_sparsity_list("0,0.1,0.6").unwrap(), vec![0.0, 0.1, 0.6]);
        assert!(parse_sparsity_list("0,0.95,1.2").is_err());
        assert!(parse_sparsity_list("abc").is_err());
        assert!(parse_sparsity_list("").is_err());
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Parameter("x".into())), 2);
        assert_eq!(exit_code(&Error::Usage("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 3);
        assert_eq!(exit_code(&Error::Codec("x".into())), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
    }
}
