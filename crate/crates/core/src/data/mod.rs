//! Synthetic benchmark generation, manifests, preprocessing and
//! image-level statistics.

pub mod generator;
pub mod images;
pub mod manifest;
pub mod preprocess;
pub mod stats;

pub use generator::{
    default_domain_specs, generate_dataset, render_sample, DomainSpec, GeneratorConfig, ShapeKind,
};
pub use images::ImageSet;
pub use manifest::{
    dataset_root, load_manifest, parse_manifest, save_manifest, DatasetManifest, SampleRecord,
};
pub use preprocess::{
    corpus_stats, crop, load_resized_all, normalize, preprocess, sample_crop, CropParams, PrepMode,
    PreprocessConfig, Preprocessed,
};
pub use stats::{stats_report, write_stats, StatsReport, StatsSummary};
