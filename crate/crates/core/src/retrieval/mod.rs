//! Synthetic place-recognition harness: dataset generation, exact
//! nearest-neighbor retrieval with Recall@k, the accuracy-vs-compute
//! sweep, and the model-memory report.

mod dataset;
mod index;
mod sweep;

pub use dataset::{
    gen_synthetic_dataset, load_dataset, place_dir, read_timg, save_dataset, write_timg,
    GroundTruth, ImageRecord, SyntheticDataset, SyntheticDatasetConfig, IMAGE_MAGIC,
    IMAGE_VERSION,
};
pub use index::{
    build_index, read_descriptor_db, recall_at_k, search, write_descriptor_db, DescriptorIndex,
    DESCRIPTOR_MAGIC,
};
pub use sweep::{
    extract_descriptors, memory_report, references_distinct, sweep, write_sweep_csv, EvalResult,
    MemoryReport, MemoryRow,
};
