//! File formats, configuration, dataset loading and synthetic data.

pub mod checkpoint;
pub mod dataset;
pub mod feature_file;
pub mod manifest;
pub mod predictions;
pub mod run_config;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{load_dataset, Dataset, LoadedQuery, LoadedVideo};
pub use feature_file::{read_feature_file, write_feature_file};
pub use manifest::{DatasetManifest, ManifestQuery, ManifestVideo};
pub use predictions::{load_predictions, render_predictions, save_predictions};
pub use run_config::{
    DataPaths, DecodeSettings, EvalSettings, RunConfig, SynthSettings, TrainSettings,
};
pub use synth::{generate as synth_generate, read_truth, SynthOutput};
