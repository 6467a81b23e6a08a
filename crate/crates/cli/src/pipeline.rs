//! Pipeline stages. Every stage reads and writes documented files under the
//! work directory, so any stage can be rerun on its own.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use rayon::prelude::*;
use retina_ensemble::dataset::{load_manifest, LabelMatrix, SchemaMode, TargetMode};
use retina_ensemble::ensemble::{
    assemble_features, assemble_oof_features, check_out_of_fold, cross_validate_stacker, fit_stacker,
    predict_stacked, EnsembleSpec, MemberSpec, PredictionMatrix, StackedModel,
};
use retina_ensemble::imaging::{
    augment, normalize_zscore, preprocess, sample_augment_params, write_tensor, ArchPreset, CameraProfile,
    ImageBuffer, NormalizationStats,
};
use retina_ensemble::io::{write_atomic, write_json};
use retina_ensemble::losses::ClassWeights;
use retina_ensemble::metrics::{evaluate_multilabel, macro_over_folds, roc_curve, EvalReport};
use retina_ensemble::sampling::{stratified_kfold, upsample_plan, FoldAssignment, UpsamplePlan};
use retina_ensemble::seeds::{derive, stream};
use retina_ensemble::training::{fit_reference_model, predict, FeatureSet, FeatureSpec, ReferenceModel, Split};
use retina_ensemble::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StackerRows};

/// File layout of a work directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn folds(&self) -> PathBuf {
        self.root.join("folds.csv")
    }

    pub fn plan(&self) -> PathBuf {
        self.root.join("upsample_plan.csv")
    }

    pub fn features(&self, arch: &str) -> PathBuf {
        self.root.join("features").join(format!("{arch}.csv"))
    }

    pub fn tensors(&self, arch: &str) -> PathBuf {
        self.root.join("tensors").join(arch)
    }

    pub fn model(&self, member: &str) -> PathBuf {
        self.root.join("models").join(format!("{member}.json"))
    }

    pub fn history(&self, member: &str) -> PathBuf {
        self.root.join("models").join(format!("{member}.history.csv"))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn predictions(&self, member: &str) -> PathBuf {
        self.predictions_dir().join(format!("{member}.csv"))
    }

    pub fn stacker(&self) -> PathBuf {
        self.root.join("stacker.json")
    }

    pub fn stacked(&self) -> PathBuf {
        self.root.join("stacked.csv")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

pub fn load_labels(cfg: &RunConfig) -> Result<LabelMatrix> {
    load_manifest(
        &cfg.manifest,
        &SchemaMode::HeaderDriven {
            disease_risk_name: cfg.disease_risk_name.clone(),
        },
    )
}

fn read_plan(ws: &Workspace) -> Result<UpsamplePlan> {
    if ws.plan().is_file() {
        UpsamplePlan::read_csv(&ws.plan())
    } else {
        Ok(UpsamplePlan::default())
    }
}

/// Labels of originals and planned replicas, and folds covering both.
pub struct Corpus {
    pub originals: LabelMatrix,
    pub all: LabelMatrix,
    pub plan: UpsamplePlan,
    pub folds: FoldAssignment,
    pub folds_all: FoldAssignment,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ws = Workspace::new(&cfg.work_dir);
        let originals = load_labels(cfg)?;
        let folds = FoldAssignment::read_csv(&ws.folds())?;
        for id in originals.sample_ids() {
            if folds.fold_of(&id).is_none() {
                return Err(Error::Schema(format!("sample {id:?} has no fold in {}", ws.folds().display())));
            }
        }
        let plan = read_plan(&ws)?;
        let all = plan.materialize(&originals)?;
        let folds_all = folds.with_replicas(&plan)?;
        Ok(Self {
            originals,
            all,
            plan,
            folds,
            folds_all,
        })
    }

    /// Original samples of `fold`.
    pub fn validation_ids(&self, fold: usize) -> Vec<String> {
        self.folds
            .members(fold)
            .into_iter()
            .filter(|id| self.originals.position(id).is_some())
            .collect()
    }
}

/// Writes the fold assignment and returns a per-fold, per-label count table.
pub fn split(cfg: &RunConfig) -> Result<(FoldAssignment, String)> {
    let labels = load_labels(cfg)?;
    let ids = labels.sample_ids();
    let folds = stratified_kfold(labels.label_array().view(), cfg.k, derive(cfg.seed, stream::SPLIT, 0))?;
    let assignment = FoldAssignment::from_folds(cfg.k, &ids, &folds)?;
    assignment.write_csv(&Workspace::new(&cfg.work_dir).folds())?;

    let names = labels.schema().class_names();
    let mut table = String::from("fold\tsamples");
    for n in names {
        let _ = write!(table, "\t{n}");
    }
    table.push('\n');
    let matrix = labels.label_array();
    for f in 0..cfg.k {
        let rows: Vec<usize> = (0..ids.len()).filter(|&i| folds[i] == f).collect();
        let _ = write!(table, "{f}\t{}", rows.len());
        for c in 0..names.len() {
            let count: usize = rows.iter().map(|&i| usize::from(matrix[[i, c]])).sum();
            let _ = write!(table, "\t{count}");
        }
        table.push('\n');
    }
    Ok((assignment, table))
}

pub fn upsample(cfg: &RunConfig) -> Result<UpsamplePlan> {
    let labels = load_labels(cfg)?;
    let plan = if cfg.upsample_threshold == 0 {
        UpsamplePlan::default()
    } else {
        upsample_plan(&labels, cfg.upsample_threshold, derive(cfg.seed, stream::UPSAMPLE, 0))
    };
    plan.write_csv(&Workspace::new(&cfg.work_dir).plan())?;
    Ok(plan)
}

/// Geometry plus augmentation of one sample for one architecture, before
/// normalization is applied.
fn prepared_image(
    img: &ImageBuffer,
    profiles: &[CameraProfile],
    input_size: usize,
    aug_seed: Option<u64>,
    cfg: &RunConfig,
) -> Result<ImageBuffer> {
    let preset = ArchPreset::new("input", input_size)?;
    let cam = CameraProfile::find(profiles, img.width(), img.height());
    let geometric = preprocess(img, cam.as_ref(), &preset, &NormalizationStats::identity())?;
    let augmented = match aug_seed {
        Some(seed) => augment(&geometric, &sample_augment_params(seed, &cfg.augment)?),
        None => geometric,
    };
    Ok(normalize_zscore(&augmented, &cfg.normalization))
}

/// Computes the feature file of every image-based architecture for all
/// originals and replicas. With `tensors` the preprocessed inputs are also
/// written as raw tensors.
pub fn preprocess_all(cfg: &RunConfig, tensors: bool) -> Result<Vec<PathBuf>> {
    let ws = Workspace::new(&cfg.work_dir);
    let mut labels = load_labels(cfg)?;
    let exts: Vec<&str> = cfg.image_extensions.iter().map(String::as_str).collect();
    labels.attach_images(&cfg.image_root(), &exts)?;
    let plan = read_plan(&ws)?;
    let archs: Vec<(String, usize, usize)> = cfg
        .used_architectures()
        .into_iter()
        .filter_map(|name| {
            let a = &cfg.architectures[&name];
            match a.features {
                FeatureSpec::Downscaled { size } => Some((name, a.input_size, size)),
                FeatureSpec::Embedding { .. } => None,
            }
        })
        .collect();
    if archs.is_empty() {
        return Ok(Vec::new());
    }
    if cfg.camera_profiles.is_empty() {
        log::info!("no camera profiles configured; images are padded without cropping");
    }

    // (sample id, source image, augmentation seed)
    let mut jobs: Vec<(String, PathBuf, Option<u64>)> = labels
        .records()
        .iter()
        .map(|r| (r.sample_id.clone(), r.image_path.clone().expect("attached"), None))
        .collect();
    for e in &plan.entries {
        let src = labels.get(&e.source_id).ok_or_else(|| Error::MissingSample {
            model: "upsample plan".into(),
            sample: e.source_id.clone(),
        })?;
        jobs.push((e.replica_id(), src.image_path.clone().expect("attached"), Some(e.aug_seed)));
    }
    log::info!("preprocessing {} images for {} architectures", jobs.len(), archs.len());

    let rows: Vec<Vec<Vec<f64>>> = jobs
        .par_iter()
        .map(|(id, path, seed)| {
            let img = ImageBuffer::load(path)?;
            archs
                .iter()
                .map(|(name, input_size, size)| {
                    let prepared = prepared_image(&img, &cfg.camera_profiles, *input_size, *seed, cfg)?;
                    if tensors {
                        write_tensor(&ws.tensors(name).join(format!("{id}.fens")), &prepared)?;
                    }
                    FeatureSpec::Downscaled { size: *size }.extract(&prepared)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let ids: Vec<String> = jobs.iter().map(|j| j.0.clone()).collect();
    let mut written = Vec::new();
    for (a, (name, _, size)) in archs.iter().enumerate() {
        let dim = FeatureSpec::Downscaled { size: *size }.len();
        let mut values = Array2::zeros((ids.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            values.row_mut(i).assign(&ndarray::ArrayView1::from(&r[a]));
        }
        let path = ws.features(name);
        FeatureSet::new(ids.clone(), values)?.write_csv(&path)?;
        written.push(path);
    }
    Ok(written)
}

fn member_targets(labels: &LabelMatrix, ids: &[String], mode: TargetMode) -> Result<(Vec<String>, Array2<u8>)> {
    let t = labels.select(ids)?.targets(mode);
    if t.columns.is_empty() {
        return Err(Error::InvalidArgument("no label classes in the schema".into()));
    }
    Ok((t.columns, t.values))
}

/// Index of `member` in the ensemble spec, used to derive its training seed.
fn member_index(spec: &EnsembleSpec, member: &MemberSpec) -> u64 {
    spec.members.iter().position(|m| m == member).unwrap_or(0) as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_id: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_loss: f64,
}

/// Trains one member on every fold except its own, validating on the
/// original samples of its fold, and writes model, history and predictions
/// for every sample in the feature file.
pub fn train_member(cfg: &RunConfig, corpus: &Corpus, spec: &EnsembleSpec, member: &MemberSpec) -> Result<TrainSummary> {
    let ws = Workspace::new(&cfg.work_dir);
    let arch = cfg.architecture(&member.architecture)?;
    let features = FeatureSet::read_csv(&ws.features(&member.architecture))?;
    if features.dim() != arch.features.len() {
        return Err(Error::Shape {
            context: "feature file width",
            expected: arch.features.len(),
            found: features.dim(),
        });
    }
    if member.fold >= corpus.folds.k() {
        return Err(Error::InvalidArgument(format!(
            "fold {} out of range for k = {}",
            member.fold,
            corpus.folds.k()
        )));
    }
    let train_ids = corpus.folds_all.complement(member.fold);
    let val_ids = corpus.validation_ids(member.fold);
    let (classes, train_y) = member_targets(&corpus.all, &train_ids, member.model_type)?;
    let (_, val_y) = member_targets(&corpus.all, &val_ids, member.model_type)?;
    let weights = ClassWeights::from_targets(train_y.view(), &classes)?;
    let train_x = features.select(&train_ids)?;
    let val_x = features.select(&val_ids)?;
    let mut tcfg = cfg.training;
    tcfg.seed = derive(cfg.seed, stream::TRAIN, member_index(spec, member));
    log::info!(
        "training {} on {} samples, validating on {}",
        member.model_id,
        train_ids.len(),
        val_ids.len()
    );
    let outcome = fit_reference_model(
        Split {
            x: train_x.values(),
            y: train_y.view(),
        },
        Split {
            x: val_x.values(),
            y: val_y.view(),
        },
        &classes,
        &weights,
        arch.features,
        &tcfg,
    )?;
    outcome.model.write(&ws.model(&member.model_id))?;
    outcome.history.write_csv(&ws.history(&member.model_id))?;
    predict(&outcome.model, &member.model_id, &features)?.write_csv(&ws.predictions(&member.model_id))?;
    Ok(TrainSummary {
        model_id: member.model_id.clone(),
        epochs: outcome.history.len(),
        best_epoch: outcome.checkpoint.epoch,
        val_loss: outcome.checkpoint.val_loss,
    })
}

/// Trains every member matching the filters, in parallel.
pub fn train_members(
    cfg: &RunConfig,
    mode: Option<TargetMode>,
    arch: Option<&str>,
    fold: Option<usize>,
) -> Result<Vec<TrainSummary>> {
    let spec = cfg.ensemble_spec()?;
    let corpus = Corpus::load(cfg)?;
    let selected: Vec<&MemberSpec> = spec
        .members
        .iter()
        .filter(|m| mode.is_none_or(|x| m.model_type == x))
        .filter(|m| arch.is_none_or(|x| m.architecture == x))
        .filter(|m| fold.is_none_or(|x| m.fold == x))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument("no ensemble member matches the selection".into()));
    }
    selected
        .par_iter()
        .map(|m| train_member(cfg, &corpus, &spec, m))
        .collect()
}

pub fn load_member_predictions(dir: &Path, spec: &EnsembleSpec) -> Result<Vec<PredictionMatrix>> {
    spec.members
        .par_iter()
        .map(|m| PredictionMatrix::read_csv(&dir.join(format!("{}.csv", m.model_id)), Some(&m.model_id)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackFitSummary {
    pub feature_columns: usize,
    pub models: usize,
    pub training_rows: usize,
    pub degenerate: Vec<String>,
    pub cv_report: Option<EvalReport>,
}

/// Fits the stacker from member predictions in the work directory and, in
/// out-of-fold mode, cross-validates it with the same folds.
pub fn stack_fit(cfg: &RunConfig) -> Result<StackFitSummary> {
    let ws = Workspace::new(&cfg.work_dir);
    let spec = cfg.ensemble_spec()?;
    let corpus = Corpus::load(cfg)?;
    let preds = load_member_predictions(&ws.predictions_dir(), &spec)?;
    let (ids, table) = match cfg.stacker.rows {
        StackerRows::OutOfFold => {
            let ids = corpus.originals.sample_ids();
            let table = assemble_oof_features(&preds, &spec, &corpus.folds_all, &ids)?;
            check_out_of_fold(&table, &spec, &corpus.folds_all)?;
            (ids, table)
        }
        StackerRows::AugmentedReplica => {
            let ids: Vec<String> = corpus.plan.entries.iter().map(|e| e.replica_id()).collect();
            if ids.is_empty() {
                return Err(Error::InvalidArgument(
                    "augmented-replica stacking needs a non-empty up-sampling plan".into(),
                ));
            }
            let table = assemble_features(&preds, &spec, &ids)?;
            (ids, table)
        }
    };
    let truth = corpus.all.select(&ids)?;
    let targets = truth.label_array();
    let classes = truth.schema().class_names().to_vec();
    log::info!("stacker features: {} columns over {} rows", table.columns.len(), ids.len());
    let model = fit_stacker(&table, targets.view(), &classes, &spec, &cfg.stacker.fit)?;
    if !model.degenerate.is_empty() && !cfg.allow_degenerate {
        return Err(Error::Degenerate(format!(
            "stacker classes with a single outcome: {}",
            model.degenerate.join(", ")
        )));
    }
    model.write(&ws.stacker())?;

    let cv_report = match cfg.stacker.rows {
        StackerRows::OutOfFold => {
            let folds = cross_validate_stacker(&table, targets.view(), &classes, &spec, &corpus.folds_all, &cfg.stacker.fit)?;
            let reports = folds
                .iter()
                .map(|p| evaluate_multilabel(p, &corpus.all, p.model_id()))
                .collect::<Result<Vec<_>>>()?;
            let report = macro_over_folds(&reports, "stacker")?;
            report.write_json(&ws.reports().join("stacker_cv.json"))?;
            report.write_csv(&ws.reports().join("stacker_cv.csv"))?;
            Some(report)
        }
        StackerRows::AugmentedReplica => None,
    };
    Ok(StackFitSummary {
        feature_columns: table.columns.len(),
        models: model.classes.len(),
        training_rows: ids.len(),
        degenerate: model.degenerate.clone(),
        cv_report,
    })
}

/// Applies a stacker to member predictions read from `dir`.
pub fn stack_predict(model: &StackedModel, dir: &Path) -> Result<PredictionMatrix> {
    let preds = load_member_predictions(dir, &model.members)?;
    predict_stacked(model, &preds)
}

/// Writes report JSON and CSV plus per-class ROC CSV and SVG under `out`.
pub fn write_evaluation(preds: &PredictionMatrix, truth: &LabelMatrix, out: &Path) -> Result<EvalReport> {
    let report = evaluate_multilabel(preds, truth, preds.model_id())?;
    report.write_json(&out.join("report.json"))?;
    report.write_csv(&out.join("report.csv"))?;
    let rows: Vec<usize> = preds
        .sample_ids()
        .iter()
        .map(|id| truth.position(id).expect("checked by evaluate_multilabel"))
        .collect();
    for (j, class) in preds.class_names().iter().enumerate() {
        if report.skipped.contains(class) {
            continue;
        }
        let c = truth.schema().index_of(class).expect("checked by evaluate_multilabel");
        let labels: Vec<u8> = rows.iter().map(|&i| truth.records()[i].labels[c]).collect();
        let scores = preds.values().column(j).to_vec();
        let curve = roc_curve(&scores, &labels)?;
        let stem = sanitize(class);
        write_atomic(&out.join(format!("roc_{stem}.csv")), &curve.to_csv_bytes()?)?;
        write_atomic(
            &out.join(format!("roc_{stem}.svg")),
            curve.to_svg(&format!("{} {class}", preds.model_id())).as_bytes(),
        )?;
    }
    Ok(report)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Each member scored on the original samples of its held-out fold.
pub fn member_reports(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    let ws = Workspace::new(&cfg.work_dir);
    let spec = cfg.ensemble_spec()?;
    let corpus = Corpus::load(cfg)?;
    let preds = load_member_predictions(&ws.predictions_dir(), &spec)?;
    spec.members
        .iter()
        .zip(&preds)
        .map(|(m, p)| {
            let held_out = p.select(&corpus.validation_ids(m.fold))?;
            let report = evaluate_multilabel(&held_out, &corpus.originals, &m.model_id)?;
            report.write_json(&ws.reports().join("members").join(format!("{}.json", m.model_id)))?;
            Ok(report)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub feature_columns: usize,
    pub stacker_models: usize,
    /// Held-out macro AUROC and mAP of every member.
    pub members: IndexMap<String, (Option<f64>, Option<f64>)>,
    pub stacker_cv: Option<EvalReport>,
    pub stacked_in_sample: EvalReport,
}

/// The whole flow: split, up-sample, preprocess, train every member, fit and
/// cross-validate the stacker, predict and evaluate.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary> {
    let ws = Workspace::new(&cfg.work_dir);
    let (_, table) = split(cfg)?;
    log::info!("folds:\n{table}");
    let plan = upsample(cfg)?;
    log::info!("up-sampling plan: {} replicas", plan.len());
    preprocess_all(cfg, false)?;
    train_members(cfg, None, None, None)?;
    let fit = stack_fit(cfg)?;
    let members = member_reports(cfg)?;
    let model = StackedModel::read(&ws.stacker())?;
    let corpus = Corpus::load(cfg)?;
    let stacked = stack_predict(&model, &ws.predictions_dir())?.select(&corpus.originals.sample_ids())?;
    stacked.write_csv(&ws.stacked())?;
    let in_sample = write_evaluation(&stacked, &corpus.originals, &ws.reports().join("stacked"))?;
    let summary = RunSummary {
        feature_columns: fit.feature_columns,
        stacker_models: fit.models,
        members: members
            .iter()
            .map(|r| (r.tag.clone(), (r.macro_auroc, r.macro_map)))
            .collect(),
        stacker_cv: fit.cv_report,
        stacked_in_sample: in_sample,
    };
    write_json(&ws.reports().join("summary.json"), &summary)?;
    Ok(summary)
}

/// Predictions of a saved reference model over a feature file.
pub fn predict_file(model_path: &Path, features: &Path, model_id: &str) -> Result<PredictionMatrix> {
    let model = ReferenceModel::read(model_path)?;
    predict(&model, model_id, &FeatureSet::read_csv(features)?)
}
