//! Command-line workflow over the `retina-ensemble` library.
//!
//! The binary is a thin wrapper; the stages live here so they can be driven
//! from tests as well.

pub mod config;
pub mod pipeline;

use retina_ensemble::ErrorKind;

/// Process exit code for a failed command.
pub fn exit_code(err: &retina_ensemble::Error) -> u8 {
    match err.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Degenerate => 4,
    }
}

use std::path::Path;

use indexmap::IndexMap;
use retina_ensemble::imaging::NormalizationStats;
use retina_ensemble::training::FeatureSpec;

use crate::config::{ArchitectureConfig, RunConfig};

/// Configuration for a dataset written by the synthetic generator: two
/// reference architectures reading 8×8 and 4×4 downscales of the unchanged
/// input, both used for detectors and classifiers.
pub fn synthetic_run_config(manifest: &Path, work_dir: &Path, seed: u64) -> RunConfig {
    let arch = |size| ArchitectureConfig {
        input_size: 64,
        features: FeatureSpec::Downscaled { size },
    };
    let mut architectures = IndexMap::new();
    architectures.insert("ref8".to_string(), arch(8));
    architectures.insert("ref4".to_string(), arch(4));
    RunConfig {
        manifest: manifest.to_path_buf(),
        work_dir: work_dir.to_path_buf(),
        seed,
        upsample_threshold: 0,
        camera_profiles: Vec::new(),
        normalization: NormalizationStats::identity(),
        architectures,
        detector_architectures: vec!["ref8".into(), "ref4".into()],
        classifier_architectures: vec!["ref8".into(), "ref4".into()],
        ..RunConfig::default()
    }
}
