//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use retina_ensemble::dataset::TargetMode;
use retina_ensemble::ensemble::{EnsembleSpec, StackerConfig};
use retina_ensemble::imaging::{ArchPreset, AugmentRanges, CameraProfile, NormalizationStats};
use retina_ensemble::io::read_json;
use retina_ensemble::training::{FeatureSpec, TrainingConfig};
use retina_ensemble::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Square side after preprocessing.
    pub input_size: usize,
    pub features: FeatureSpec,
}

/// Which rows the stacker is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackerRows {
    /// Original samples with out-of-fold member predictions.
    #[default]
    OutOfFold,
    /// Up-sampled replicas with every member's own predictions.
    AugmentedReplica,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackerSettings {
    #[serde(flatten)]
    pub fit: StackerConfig,
    pub rows: StackerRows,
}

impl Default for StackerSettings {
    fn default() -> Self {
        Self {
            fit: StackerConfig::default(),
            rows: StackerRows::OutOfFold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Defaults to `images/` next to the manifest.
    pub image_root: Option<PathBuf>,
    pub image_extensions: Vec<String>,
    pub work_dir: PathBuf,
    pub disease_risk_name: String,
    pub seed: u64,
    pub k: usize,
    /// Minimum per-label count after up-sampling; 0 disables up-sampling.
    pub upsample_threshold: usize,
    pub augment: AugmentRanges,
    pub camera_profiles: Vec<CameraProfile>,
    pub normalization: NormalizationStats,
    pub architectures: IndexMap<String, ArchitectureConfig>,
    pub detector_architectures: Vec<String>,
    pub classifier_architectures: Vec<String>,
    pub training: TrainingConfig,
    pub stacker: StackerSettings,
    pub allow_degenerate: bool,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let features = FeatureSpec::default();
        let architectures = ArchPreset::standard(224)
            .into_iter()
            .map(|p| {
                (
                    p.name.to_lowercase(),
                    ArchitectureConfig {
                        input_size: p.input_size,
                        features,
                    },
                )
            })
            .collect();
        Self {
            manifest: PathBuf::from("manifest.csv"),
            image_root: None,
            image_extensions: vec!["png".into(), "ppm".into()],
            work_dir: PathBuf::from("work"),
            disease_risk_name: "Disease_Risk".into(),
            seed: 0,
            k: 5,
            upsample_threshold: 100,
            augment: AugmentRanges::default(),
            camera_profiles: CameraProfile::rfmid(),
            normalization: NormalizationStats::imagenet(),
            architectures,
            detector_architectures: vec!["densenet201".into(), "efficientnetb4".into()],
            classifier_architectures: vec![
                "resnet152".into(),
                "inceptionv3".into(),
                "densenet201".into(),
                "efficientnetb4".into(),
            ],
            training: TrainingConfig::default(),
            stacker: StackerSettings::default(),
            allow_degenerate: false,
            workers: 0,
        }
    }
}

/// Sets `path` (dot separated) inside `doc` to `raw`, read as JSON when it
/// parses and as a plain string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("override {key:?}: {part:?} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::InvalidArgument(format!("override {key:?} has an empty key")))
}

impl RunConfig {
    /// Defaults, then the optional config file, then the overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = path {
            let file: Value = read_json(path)?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| Error::InvalidArgument(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("k = {} must be >= 2", self.k)));
        }
        for name in self.detector_architectures.iter().chain(&self.classifier_architectures) {
            if !self.architectures.contains_key(name) {
                return Err(Error::InvalidArgument(format!("unknown architecture {name:?}")));
            }
        }
        self.training.validate()?;
        self.stacker.fit.lbfgs.validate()?;
        self.augment.validate()?;
        self.normalization.validate()
    }

    pub fn image_root(&self) -> PathBuf {
        self.image_root.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("images")
        })
    }

    pub fn architecture(&self, name: &str) -> Result<&ArchitectureConfig> {
        self.architectures
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {name:?}")))
    }

    /// Architectures used by any member, in first-use order.
    pub fn used_architectures(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for a in self.detector_architectures.iter().chain(&self.classifier_architectures) {
            if !out.contains(a) {
                out.push(a.clone());
            }
        }
        out
    }

    pub fn ensemble_spec(&self) -> Result<EnsembleSpec> {
        EnsembleSpec::bagged(
            &[
                (TargetMode::Detector, self.detector_architectures.clone()),
                (TargetMode::Classifier, self.classifier_architectures.clone()),
            ],
            self.k,
        )
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // architectures are replaced wholesale so a file can drop presets
                    Some(slot) if k != "architectures" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}
