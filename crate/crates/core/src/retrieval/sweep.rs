//! Accuracy-vs-compute sweep and the memory report.
//!
//! For each sparsity level the sweep extracts descriptors for every
//! reference and query, runs exact retrieval, and records Recall@{1,5,10}
//! together with the closed-form MACs/TOPs of one forward pass and the
//! model file size. One CSV row per level:
//!
//! `sparsity,recall_at_1,recall_at_5,recall_at_10,macs_per_query,tops_per_query,model_bytes,recall1_per_mb`

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{count_model_ops, tops_from_macs, OpsCounter};
use crate::model::{forward, Descriptor, VitModel};
use crate::util::parallel_map;

use super::dataset::{ImageRecord, SyntheticDataset};
use super::index::{build_index, recall_at_k, search, DescriptorIndex};

/// Retrieval metrics and cost accounting for one sparsity level.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub sparsity: f64,
    pub recall_at: BTreeMap<usize, f64>,
    pub macs_per_query: u64,
    pub tops_per_query: f64,
    pub model_bytes: u64,
}

impl EvalResult {
    /// Recall@1 per megabyte of model file (decimal MB).
    pub fn recall1_per_mb(&self) -> f64 {
        self.recall_at[&1] / (self.model_bytes as f64 / 1e6)
    }
}

/// Extract descriptors for a batch of images at one sparsity level.
/// Forwards are independent, so they may fan out over `threads` workers;
/// results are positionally ordered and identical to a sequential run.
pub fn extract_descriptors(
    model: &VitModel<f32>,
    records: &[ImageRecord],
    s: f64,
    threads: usize,
) -> Result<DescriptorIndex> {
    let descriptors: Vec<Result<Descriptor<f32>>> = parallel_map(records, threads, |rec| {
        let mut counter = OpsCounter::new();
        forward(model, &rec.pixels, s, &mut counter).map(|(_, d)| d)
    });
    let mut rows = Vec::with_capacity(records.len());
    for d in descriptors {
        rows.push(d?);
    }
    let ids: Vec<(u32, u32)> = records.iter().map(|r| (r.place, r.image_id)).collect();
    build_index(rows, ids)
}

/// Check that no two reference descriptors coincide (degenerate-dataset
/// guard: identical descriptors make rank-1 retrieval ambiguous).
pub fn references_distinct(index: &DescriptorIndex) -> bool {
    let n = index.len();
    for i in 0..n {
        for j in i + 1..n {
            if index.rows()[i].values() == index.rows()[j].values() {
                return false;
            }
        }
    }
    true
}

/// Run the sweep. `model_bytes` is the size of the model file being
/// evaluated (the memory-footprint measure reported per row).
pub fn sweep(
    model: &VitModel<f32>,
    model_bytes: u64,
    dataset: &SyntheticDataset,
    levels: &[f64],
    threads: usize,
) -> Result<Vec<EvalResult>> {
    if levels.is_empty() {
        return Err(Error::Parameter("sweep needs at least one sparsity level".into()));
    }
    for &s in levels {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Parameter(format!(
                "sparsity level {s} outside [0, 1)"
            )));
        }
    }
    if dataset.references.is_empty() || dataset.queries.is_empty() {
        return Err(Error::Usage("sweep needs references and queries".into()));
    }

    let mut results = Vec::with_capacity(levels.len());
    for &s in levels {
        let ref_index = extract_descriptors(model, &dataset.references, s, threads)?;
        let query_index = extract_descriptors(model, &dataset.queries, s, threads)?;

        let top_k = 10.min(ref_index.len());
        let rankings: Vec<((u32, u32), Vec<(u32, u32)>)> = query_index
            .ids()
            .iter()
            .zip(query_index.rows())
            .map(|(id, q)| Ok((*id, search(&ref_index, q, top_k)?)))
            .collect::<Result<_>>()?;

        let mut recall_at = BTreeMap::new();
        for k in [1usize, 5, 10] {
            recall_at.insert(k, recall_at_k(&rankings, &dataset.ground_truth, k)?);
        }
        let macs = count_model_ops(&model.config, s)?;
        results.push(EvalResult {
            sparsity: s,
            recall_at,
            macs_per_query: macs,
            tops_per_query: tops_from_macs(macs),
            model_bytes,
        });
    }
    Ok(results)
}

/// Serialize sweep rows. Sparsity renders with 4 decimal places; recall
/// columns with 6.
pub fn write_sweep_csv(results: &[EvalResult], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(
        out,
        "sparsity,recall_at_1,recall_at_5,recall_at_10,macs_per_query,tops_per_query,model_bytes,recall1_per_mb"
    )
    .expect("write to vec");
    for r in results {
        writeln!(
            out,
            "{:.4},{:.6},{:.6},{:.6},{},{:.6e},{},{:.6}",
            r.sparsity,
            r.recall_at[&1],
            r.recall_at[&5],
            r.recall_at[&10],
            r.macs_per_query,
            r.tops_per_query,
            r.model_bytes,
            r.recall1_per_mb()
        )
        .expect("write to vec");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-tensor byte comparison of two model files.
#[derive(Debug, Clone)]
pub struct MemoryRow {
    pub name: String,
    pub bytes: u64,
    pub baseline_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
    pub file_bytes: u64,
    pub baseline_file_bytes: u64,
}

impl MemoryReport {
    /// File-size ratio baseline / subject.
    pub fn ratio(&self) -> f64 {
        self.baseline_file_bytes as f64 / self.file_bytes as f64
    }
}

/// Compare a model file against a baseline (typically the full-precision
/// twin), per tensor and in total.
pub fn memory_report(model_path: &Path, baseline_path: &Path) -> Result<MemoryReport> {
    let subject = crate::model::read_model_summary(model_path)?;
    let baseline = crate::model::read_model_summary(baseline_path)?;
    let baseline_by_name: BTreeMap<&str, u64> = baseline
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.payload_bytes))
        .collect();
    let rows = subject
        .tensors
        .iter()
        .map(|t| MemoryRow {
            name: t.name.clone(),
            bytes: t.payload_bytes,
            baseline_bytes: baseline_by_name.get(t.name.as_str()).copied().unwrap_or(0),
        })
        .collect();
    Ok(MemoryReport {
        rows,
        file_bytes: subject.file_bytes,
        baseline_file_bytes: baseline.file_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, save_model, ModelConfig};
    use crate::retrieval::dataset::{gen_synthetic_dataset, SyntheticDatasetConfig};
    use crate::tensor::Prng;

    fn small_dataset() -> SyntheticDataset {
        gen_synthetic_dataset(&SyntheticDatasetConfig {
            num_places: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn desk_student() -> VitModel<f32> {
        let mut m = init_model(&ModelConfig::desk_default(true), &mut Prng::new(90)).unwrap();
        m.quantize_in_place().unwrap();
        m
    }

    #[test]
    fn sweep_rows_are_deterministic_and_macs_decrease() {
        let model = desk_student();
        let ds = small_dataset();
        let levels = [0.0, 0.2, 0.4, 0.6];
        let r1 = sweep(&model, 1000, &ds, &levels, 1).unwrap();
        let r2 = sweep(&model, 1000, &ds, &levels, 4).unwrap();
        assert_eq!(r1, r2, "threads must not change results");
        assert_eq!(r1.len(), 4);
        for pair in r1.windows(2) {
            assert!(pair[1].macs_per_query < pair[0].macs_per_query);
        }
        for r in &r1 {
            assert!(r.recall_at[&1] <= r.recall_at[&5]);
            assert!(r.recall_at[&5] <= r.recall_at[&10]);
        }
    }

    #[test]
    fn single_level_sweep_uses_dense_count() {
        let model = desk_student();
        let ds = small_dataset();
        let r = sweep(&model, 1, &ds, &[0.0], 1).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(
            r[0].macs_per_query,
            count_model_ops(&model.config, 0.0).unwrap()
        );
    }

    #[test]
    fn degenerate_dataset_gives_perfect_recall_at_zero_sparsity() {
        let cfg = SyntheticDatasetConfig {
            num_places: 10,
            noise_std: 0.0,
            brightness_jitter: 0.0,
            max_shift_px: 0,
            ..Default::default()
        };
        let ds = gen_synthetic_dataset(&cfg).unwrap();
        let model = desk_student();
        let refs = extract_descriptors(&model, &ds.references, 0.0, 1).unwrap();
        assert!(references_distinct(&refs), "descriptor collision");
        let results = sweep(&model, 1, &ds, &[0.0], 1).unwrap();
        assert_eq!(results[0].recall_at[&1], 1.0);
    }

    #[test]
    fn invalid_levels_are_rejected() {
        let model = desk_student();
        let ds = small_dataset();
        assert!(sweep(&model, 1, &ds, &[0.2, 1.2], 1).is_err());
        assert!(sweep(&model, 1, &ds, &[], 1).is_err());
    }

    #[test]
    fn memory_report_identical_files_ratio_one() {
        let dir = tempfile::tempdir().unwrap();
        let model = desk_student();
        let p1 = dir.path().join("a.tatv");
        let p2 = dir.path().join("b.tatv");
        save_model(&model, &p1, false).unwrap();
        save_model(&model, &p2, false).unwrap();
        let report = memory_report(&p1, &p2).unwrap();
        assert_eq!(report.ratio(), 1.0);
        for row in &report.rows {
            assert_eq!(row.bytes, row.baseline_bytes);
        }
    }

    #[test]
    fn memory_report_student_vs_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let student = desk_student();
        let teacher =
            init_model::<f32>(&ModelConfig::desk_default(false), &mut Prng::new(91)).unwrap();
        let sp = dir.path().join("s.tatv");
        let tp = dir.path().join("t.tatv");
        save_model(&student, &sp, false).unwrap();
        save_model(&teacher, &tp, false).unwrap();
        let report = memory_report(&sp, &tp).unwrap();
        assert!(report.ratio() >= 5.0, "ratio {}", report.ratio());
        // Ternary tensors: ceil(M*D/4) + 4 bytes vs 4*M*D dense.
        for row in report.rows.iter().filter(|r| r.name.ends_with("qkv.weight")) {
            let numel = 3 * 64 * 64usize;
            assert_eq!(row.bytes, numel.div_ceil(4) as u64 + 4);
            assert_eq!(row.baseline_bytes, 4 * numel as u64);
        }
    }

    #[test]
    fn csv_has_one_row_per_level_plus_header() {
        let dir = tempfile::tempdir().unwrap();
        let model = desk_student();
        let ds = small_dataset();
        let levels: Vec<f64> = (0..7).map(|i| 0.1 * i as f64).collect();
        let results = sweep(&model, 12345, &ds, &levels, 2).unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&results, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[0].starts_with("sparsity,recall_at_1"));
        assert!(lines[1].starts_with("0.0000,"));
        assert!(lines[7].starts_with("0.6000,"));
    }
}
