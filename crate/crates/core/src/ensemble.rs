//! Prediction matrices, bagging and the per-class stacked logistic regression.
//!
//! Every base model, built-in or external, hands its output over as a
//! [`PredictionMatrix`]. The stacker sees one feature column per
//! `(member, class)` pair, named `model_id/class`, in [`EnsembleSpec`] order.
//!
//! Training rows for the stacker are out-of-fold: a bagged member
//! `(type, architecture, fold g)` was trained on every fold except `g`, so for a
//! sample in fold `f` each column of that member group is filled with the
//! prediction of the group's fold-`f` member, the only one that never saw the
//! sample. Every cell records which member produced it, and
//! [`check_out_of_fold`] verifies the discipline from that provenance.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::TargetMode;
use crate::io::{csv_bytes, csv_reader, fmt_real, parse_real, read_json, write_atomic, write_json};
use crate::lbfgs::{fit_logistic, predict_logistic, LbfgsConfig, LogisticModel};
use crate::sampling::FoldAssignment;
use crate::{logit, Error, Result, PROB_EPSILON};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    model_id: String,
    sample_ids: Vec<String>,
    class_names: Vec<String>,
    values: Array2<f64>,
    index: HashMap<String, usize>,
}

impl PredictionMatrix {
    pub fn new(
        model_id: impl Into<String>,
        sample_ids: Vec<String>,
        class_names: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self> {
        let model_id = model_id.into();
        if values.dim() != (sample_ids.len(), class_names.len()) {
            return Err(Error::Schema(format!(
                "{model_id}: values are {:?}, expected ({}, {})",
                values.dim(),
                sample_ids.len(),
                class_names.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "{model_id}: probability {v} outside [0, 1]"
            )));
        }
        let mut index = HashMap::with_capacity(sample_ids.len());
        for (i, id) in sample_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateSample(id.clone()));
            }
        }
        Ok(Self {
            model_id,
            sample_ids,
            class_names,
            values,
            index,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row_of(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    /// Rows for `sample_ids`, in that order.
    pub fn select(&self, sample_ids: &[String]) -> Result<PredictionMatrix> {
        let rows = sample_ids
            .iter()
            .map(|id| {
                self.row_of(id).ok_or_else(|| Error::MissingSample {
                    model: self.model_id.clone(),
                    sample: id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let values = self.values.select(Axis(0), &rows);
        PredictionMatrix::new(
            self.model_id.clone(),
            sample_ids.to_vec(),
            self.class_names.clone(),
            values,
        )
    }

    /// Stacks rows of several matrices with identical class schemas.
    pub fn concat(model_id: &str, parts: &[PredictionMatrix]) -> Result<PredictionMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let mut ids = Vec::new();
        let mut views = Vec::new();
        for p in parts {
            if p.class_names != first.class_names {
                return Err(Error::MemberMismatch(format!(
                    "{} and {} have different classes",
                    p.model_id, first.model_id
                )));
            }
            ids.extend(p.sample_ids.iter().cloned());
            views.push(p.values.view());
        }
        let values = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Schema(e.to_string()))?;
        PredictionMatrix::new(model_id, ids, first.class_names.clone(), values)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        csv_bytes(Path::new(&self.model_id), |w| {
            let mut header = vec!["sample_id".to_string()];
            header.extend(self.class_names.iter().cloned());
            w.write_record(&header)?;
            for (id, row) in self.sample_ids.iter().zip(self.values.outer_iter()) {
                let mut rec = vec![id.clone()];
                rec.extend(row.iter().map(|&v| fmt_real(v)));
                w.write_record(&rec)?;
            }
            Ok(())
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }

    /// Reads `sample_id,<class…>`; the model id defaults to the file stem.
    pub fn read_csv(path: &Path, model_id: Option<&str>) -> Result<PredictionMatrix> {
        let model_id = model_id
            .map(str::to_string)
            .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .unwrap_or_default();
        let mut rows = csv_reader(path)?.into_records();
        let header = match rows.next() {
            Some(h) => h.map_err(|e| Error::csv(path, e))?,
            None => return Err(Error::Schema(format!("{}: empty prediction file", path.display()))),
        };
        let class_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for row in rows {
            let row = row.map_err(|e| Error::csv(path, e))?;
            if row.len() != header.len() {
                return Err(Error::Schema(format!(
                    "{}: row {:?} has {} cells, header has {}",
                    path.display(),
                    row.get(0).unwrap_or(""),
                    row.len(),
                    header.len()
                )));
            }
            ids.push(row[0].to_string());
            for cell in row.iter().skip(1) {
                data.push(parse_real(path, cell)?);
            }
        }
        let values = Array2::from_shape_vec((ids.len(), class_names.len()), data)
            .map_err(|e| Error::Schema(e.to_string()))?;
        PredictionMatrix::new(model_id, ids, class_names, values)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub model_id: String,
    pub model_type: TargetMode,
    pub architecture: String,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<MemberSpec>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<MemberSpec>) -> Result<Self> {
        let spec = Self { members };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for m in &self.members {
            if !seen.insert(m.model_id.as_str()) {
                return Err(Error::DuplicateModel(m.model_id.clone()));
            }
        }
        Ok(())
    }

    /// `{mode}-{architecture}-f{fold}` members for every architecture of each
    /// mode and every fold, in that nesting order.
    pub fn bagged(layout: &[(TargetMode, Vec<String>)], k: usize) -> Result<Self> {
        let mut members = Vec::new();
        for (mode, archs) in layout {
            for arch in archs {
                for fold in 0..k {
                    members.push(MemberSpec {
                        model_id: member_id(*mode, arch, fold),
                        model_type: *mode,
                        architecture: arch.clone(),
                        fold,
                    });
                }
            }
        }
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub fn member_id(mode: TargetMode, architecture: &str, fold: usize) -> String {
    format!("{}-{architecture}-f{fold}", mode.as_str())
}

/// Stacking features with the member that produced every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub sample_ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
    /// Index into the ensemble spec of the member behind each cell.
    pub provenance: Array2<u32>,
}

fn index_preds(preds: &[PredictionMatrix]) -> Result<HashMap<&str, &PredictionMatrix>> {
    let mut by_id = HashMap::with_capacity(preds.len());
    for p in preds {
        if by_id.insert(p.model_id(), p).is_some() {
            return Err(Error::DuplicateModel(p.model_id().to_string()));
        }
    }
    Ok(by_id)
}

fn member_pred<'a>(
    by_id: &HashMap<&str, &'a PredictionMatrix>,
    id: &str,
) -> Result<&'a PredictionMatrix> {
    by_id
        .get(id)
        .copied()
        .ok_or_else(|| Error::MemberMismatch(format!("no predictions for member {id:?}")))
}

fn column_layout(
    spec: &EnsembleSpec,
    by_id: &HashMap<&str, &PredictionMatrix>,
) -> Result<Vec<(usize, usize, String)>> {
    let mut cols = Vec::new();
    for (m, member) in spec.members.iter().enumerate() {
        let pred = member_pred(by_id, &member.model_id)?;
        for (c, class) in pred.class_names().iter().enumerate() {
            cols.push((m, c, format!("{}/{class}", member.model_id)));
        }
    }
    Ok(cols)
}

/// Concatenates every member's every class probability for each sample, in
/// spec order. Each column comes from its own member.
pub fn assemble_features(
    preds: &[PredictionMatrix],
    spec: &EnsembleSpec,
    sample_ids: &[String],
) -> Result<FeatureTable> {
    spec.validate()?;
    let by_id = index_preds(preds)?;
    let layout = column_layout(spec, &by_id)?;
    let mut values = Array2::zeros((sample_ids.len(), layout.len()));
    let mut provenance = Array2::zeros((sample_ids.len(), layout.len()));
    for (i, id) in sample_ids.iter().enumerate() {
        for (j, (m, c, _)) in layout.iter().enumerate() {
            let pred = by_id[spec.members[*m].model_id.as_str()];
            let row = pred.row_of(id).ok_or_else(|| Error::MissingSample {
                model: pred.model_id().to_string(),
                sample: id.clone(),
            })?;
            values[[i, j]] = pred.values[[row, *c]];
            provenance[[i, j]] = *m as u32;
        }
    }
    Ok(FeatureTable {
        sample_ids: sample_ids.to_vec(),
        columns: layout.into_iter().map(|(_, _, n)| n).collect(),
        values,
        provenance,
    })
}

/// Out-of-fold stacking features: same column layout as
/// [`assemble_features`], with every cell of a `(type, architecture)` group
/// taken from the group member whose held-out fold contains the sample.
pub fn assemble_oof_features(
    preds: &[PredictionMatrix],
    spec: &EnsembleSpec,
    folds: &FoldAssignment,
    sample_ids: &[String],
) -> Result<FeatureTable> {
    spec.validate()?;
    let by_id = index_preds(preds)?;
    let layout = column_layout(spec, &by_id)?;
    let mut holder: HashMap<(TargetMode, &str, usize), usize> = HashMap::new();
    for (m, member) in spec.members.iter().enumerate() {
        holder.insert((member.model_type, member.architecture.as_str(), member.fold), m);
    }
    let mut values = Array2::zeros((sample_ids.len(), layout.len()));
    let mut provenance = Array2::zeros((sample_ids.len(), layout.len()));
    for (i, id) in sample_ids.iter().enumerate() {
        let fold = folds.fold_of(id).ok_or_else(|| Error::MissingSample {
            model: "folds".into(),
            sample: id.clone(),
        })?;
        for (j, (m, c, name)) in layout.iter().enumerate() {
            let member = &spec.members[*m];
            let src = *holder
                .get(&(member.model_type, member.architecture.as_str(), fold))
                .ok_or_else(|| {
                    Error::MemberMismatch(format!(
                        "no {} {} member holds out fold {fold}",
                        member.model_type.as_str(),
                        member.architecture
                    ))
                })?;
            let pred = member_pred(&by_id, &spec.members[src].model_id)?;
            let class = &by_id[member.model_id.as_str()].class_names()[*c];
            if pred.class_names().get(*c) != Some(class) {
                return Err(Error::MemberMismatch(format!(
                    "column {name}: {} has a different class layout",
                    pred.model_id()
                )));
            }
            let row = pred.row_of(id).ok_or_else(|| Error::MissingSample {
                model: pred.model_id().to_string(),
                sample: id.clone(),
            })?;
            values[[i, j]] = pred.values[[row, *c]];
            provenance[[i, j]] = src as u32;
        }
    }
    Ok(FeatureTable {
        sample_ids: sample_ids.to_vec(),
        columns: layout.into_iter().map(|(_, _, n)| n).collect(),
        values,
        provenance,
    })
}

/// Fails if any cell was produced by a member that trained on its sample.
pub fn check_out_of_fold(
    table: &FeatureTable,
    spec: &EnsembleSpec,
    folds: &FoldAssignment,
) -> Result<()> {
    for (i, id) in table.sample_ids.iter().enumerate() {
        let fold = folds.fold_of(id).ok_or_else(|| Error::MissingSample {
            model: "folds".into(),
            sample: id.clone(),
        })?;
        for (j, &m) in table.provenance.row(i).iter().enumerate() {
            let member = &spec.members[m as usize];
            if member.fold != fold {
                return Err(Error::MemberMismatch(format!(
                    "leak: column {} of sample {id:?} (fold {fold}) comes from {}, trained on it",
                    table.columns[j], member.model_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureTransform {
    #[default]
    Raw,
    /// `ln(p / (1 − p))` of the probability clamped to `[ε, 1 − ε]`.
    Logit,
}

impl FeatureTransform {
    pub fn apply(self, values: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            FeatureTransform::Raw => values.to_owned(),
            FeatureTransform::Logit => {
                values.mapv(|p| logit(p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedModel {
    pub members: EnsembleSpec,
    pub transform: FeatureTransform,
    pub feature_columns: Vec<String>,
    /// One model per output class, in output schema order.
    pub classes: IndexMap<String, LogisticModel>,
    /// Classes that fell back to a constant model.
    #[serde(default)]
    pub degenerate: Vec<String>,
}

impl StackedModel {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.members.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackerConfig {
    pub lambda: f64,
    pub transform: FeatureTransform,
    pub lbfgs: LbfgsConfig,
}

impl Default for StackerConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            transform: FeatureTransform::Raw,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// One logistic regression per target column over every feature column.
/// Classes with a single outcome get a constant model and are listed in
/// `degenerate`.
pub fn fit_stacker(
    features: &FeatureTable,
    targets: ArrayView2<'_, u8>,
    class_names: &[String],
    spec: &EnsembleSpec,
    cfg: &StackerConfig,
) -> Result<StackedModel> {
    if targets.nrows() != features.values.nrows() {
        return Err(Error::Shape {
            context: "stacker targets",
            expected: features.values.nrows(),
            found: targets.nrows(),
        });
    }
    if targets.ncols() != class_names.len() {
        return Err(Error::Shape {
            context: "stacker classes",
            expected: targets.ncols(),
            found: class_names.len(),
        });
    }
    let x = cfg.transform.apply(features.values.view());
    let fits = (0..class_names.len())
        .into_par_iter()
        .map(|c| {
            let y: Vec<u8> = targets.column(c).to_vec();
            fit_logistic(x.view(), &y, cfg.lambda, &cfg.lbfgs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut classes = IndexMap::new();
    let mut degenerate = Vec::new();
    for (name, fit) in class_names.iter().zip(fits) {
        if fit.degenerate {
            log::warn!("stacker class {name:?} has a single outcome; using a constant model");
            degenerate.push(name.clone());
        } else if !fit.converged {
            log::warn!(
                "stacker class {name:?} stopped after {} iterations with gradient {:.3e}",
                fit.iterations,
                fit.grad_norm
            );
        }
        classes.insert(
            name.clone(),
            fit.model.with_feature_names(features.columns.clone()),
        );
    }
    Ok(StackedModel {
        members: spec.clone(),
        transform: cfg.transform,
        feature_columns: features.columns.clone(),
        classes,
        degenerate,
    })
}

/// Applies a fitted stacker to member predictions. Output rows follow the
/// sample order of the first spec member.
pub fn predict_stacked(model: &StackedModel, preds: &[PredictionMatrix]) -> Result<PredictionMatrix> {
    let first = model
        .members
        .members
        .first()
        .ok_or_else(|| Error::MemberMismatch("stacker has no members".into()))?;
    let by_id = index_preds(preds)?;
    let sample_ids = member_pred(&by_id, &first.model_id)?.sample_ids().to_vec();
    let table = assemble_features(preds, &model.members, &sample_ids)?;
    if table.columns != model.feature_columns {
        return Err(Error::MemberMismatch(
            "member predictions do not reproduce the stacker's feature columns".into(),
        ));
    }
    predict_table(model, &table)
}

/// Applies a fitted stacker to an already assembled feature table.
pub fn predict_table(model: &StackedModel, table: &FeatureTable) -> Result<PredictionMatrix> {
    let x = model.transform.apply(table.values.view());
    let mut values = Array2::zeros((table.sample_ids.len(), model.classes.len()));
    for (c, lr) in model.classes.values().enumerate() {
        let p = predict_logistic(lr, x.view())?;
        values.column_mut(c).assign(&ndarray::Array1::from(p));
    }
    PredictionMatrix::new(
        "stacker",
        table.sample_ids.clone(),
        model.classes.keys().cloned().collect(),
        values,
    )
}

/// Stacker trained on every fold but `f` and applied to fold `f`, for each
/// fold. Rows of `features` and `targets` are aligned.
pub fn cross_validate_stacker(
    features: &FeatureTable,
    targets: ArrayView2<'_, u8>,
    class_names: &[String],
    spec: &EnsembleSpec,
    folds: &FoldAssignment,
    cfg: &StackerConfig,
) -> Result<Vec<PredictionMatrix>> {
    let fold_of = features
        .sample_ids
        .iter()
        .map(|id| {
            folds.fold_of(id).ok_or_else(|| Error::MissingSample {
                model: "folds".into(),
                sample: id.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let subset = |rows: &[usize]| FeatureTable {
        sample_ids: rows.iter().map(|&i| features.sample_ids[i].clone()).collect(),
        columns: features.columns.clone(),
        values: features.values.select(Axis(0), rows),
        provenance: features.provenance.select(Axis(0), rows),
    };
    let mut out = Vec::with_capacity(folds.k());
    for f in 0..folds.k() {
        let train: Vec<usize> = (0..fold_of.len()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..fold_of.len()).filter(|&i| fold_of[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let model = fit_stacker(
            &subset(&train),
            targets.select(Axis(0), &train).view(),
            class_names,
            spec,
            cfg,
        )?;
        out.push(predict_table(&model, &subset(&test))?.with_model_id(format!("stacker-f{f}")));
    }
    Ok(out)
}

/// Element-wise mean of members sharing one class schema; rows follow the
/// first member.
pub fn mean_bag(preds: &[PredictionMatrix]) -> Result<PredictionMatrix> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean_bag needs at least one member".into()))?;
    let mut sum = Array2::<f64>::zeros(first.values.dim());
    for p in preds {
        if p.class_names != first.class_names {
            return Err(Error::MemberMismatch(format!(
                "{} and {} have different classes",
                p.model_id, first.model_id
            )));
        }
        let aligned = p.select(&first.sample_ids)?;
        sum += &aligned.values;
    }
    let values = sum.mapv(|v| (v / preds.len() as f64).clamp(0.0, 1.0));
    PredictionMatrix::new(
        "mean_bag",
        first.sample_ids.clone(),
        first.class_names.clone(),
        values,
    )
}
