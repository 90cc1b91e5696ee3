//! Experiment orchestration: datasets, audio features, augmentation,
//! sparse training, checkpoints and the λ sweep.

mod audio;
mod augment;
mod checkpoint;
mod data;
mod experiment;
mod train;

pub use audio::{
    hz_to_mel, logmel_extract, mel_band_centers, mel_to_hz, read_wav, resample_linear, LogMelOptions, LOG_FLOOR,
};
pub use augment::{apply_masks, mixup, mixup_with, specaugment, AugmentConfig};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, TensorRecord, BLOB_FILE, FORMAT_VERSION,
    MANIFEST_FILE,
};
pub use data::{
    load_feature_dataset, nearest_centroid_accuracy, stratified_split, synth_dataset, Dataset, DatasetSpec,
    FeatureSpec, Split, SynthSpec,
};
pub use experiment::{
    analyze_results, compression_at, read_scatter_csv, run_experiment, summary_table, write_scatter_csv,
    CorrelationOutcome, ExperimentConfig, ExperimentManifest, ExperimentResult, FileEntry, RunRecord, RunStatus,
    ScatterRow, SeedResult, DEFAULT_LAMBDA_GRID,
};
pub use train::{evaluate, finetune, finetune_config, train_sparse, EpochStats, TrainOutcome};
