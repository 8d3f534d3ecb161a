//! Dataset ingestion, preprocessing, synthetic-set initialization, batching and persistence.

pub mod dataset;
pub mod preprocess;
pub mod sampler;
pub mod synthetic;

pub use dataset::{load_dataset, load_dataset_with, toy_fixture_raw, DatasetSplits, LabeledImageSet, LoadOptions};
pub use preprocess::{apply_preprocess, fit_mean_std, fit_zca, invert_preprocess, PreprocessMode, PreprocessRecord};
pub use sampler::{sample_class_batch, ClassSampler};
pub use synthetic::{container_dtype, init_synthetic, load_synthetic, save_synthetic, SyntheticDataset};
