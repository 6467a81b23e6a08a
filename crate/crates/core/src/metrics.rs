//! ROC curves, AUROC, average precision and macro-averaged reports.
//!
//! Tied scores are always handled as one group: they enter the ROC curve as a
//! single (possibly diagonal) segment and the precision/recall table as one
//! rank. Average precision is the non-interpolated step sum
//! `AP = Σ (R_n − R_{n−1})·P_n` over those groups in descending score order.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelMatrix;
use crate::ensemble::PredictionMatrix;
use crate::io::{csv_bytes, fmt_real, write_atomic, write_json};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Curve from `(0, 0)` (threshold `+∞`) to `(1, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Confusion counts after each tie group, scores in descending order.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Result<(Vec<(f64, usize, usize)>, usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            context: "metric labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] > 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        groups.push((s, tp, fp));
    }
    Ok((groups, tp, fp))
}

pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (groups, pos, neg) = tie_groups(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!(
            "ROC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    points.extend(groups.into_iter().map(|(s, tp, fp)| RocPoint {
        fpr: fp as f64 / neg as f64,
        tpr: tp as f64 / pos as f64,
        threshold: s,
    }));
    Ok(RocCurve { points })
}

impl RocCurve {
    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5)
            .sum()
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        csv_bytes(Path::new("<roc>"), |w| {
            w.write_record(["fpr", "tpr", "threshold"])?;
            for p in &self.points {
                let t = if p.threshold.is_infinite() {
                    "inf".to_string()
                } else {
                    fmt_real(p.threshold)
                };
                w.write_record([fmt_real(p.fpr), fmt_real(p.tpr), t])?;
            }
            Ok(())
        })
    }

    /// Unit-square SVG: the curve as a polyline plus the chance diagonal.
    pub fn to_svg(&self, title: &str) -> String {
        let mut pts = String::new();
        for p in &self.points {
            let _ = write!(pts, "{:.6},{:.6} ", p.fpr, 1.0 - p.tpr);
        }
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 1 1\" width=\"400\" height=\"400\">\n",
                "<title>{}</title>\n",
                "<rect x=\"0\" y=\"0\" width=\"1\" height=\"1\" fill=\"white\" stroke=\"black\" stroke-width=\"0.004\"/>\n",
                "<line x1=\"0\" y1=\"1\" x2=\"1\" y2=\"0\" stroke=\"gray\" stroke-width=\"0.003\" stroke-dasharray=\"0.02,0.02\"/>\n",
                "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"0.006\" points=\"{}\"/>\n",
                "</svg>\n"
            ),
            escape_xml(title),
            pts.trim_end()
        )
    }
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Area under the ROC curve; ties count one half.
///
/// The trapezoids are accumulated in integer confusion counts and divided
/// once, so the result equals the Mann–Whitney pair statistic exactly.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (groups, pos, neg) = tie_groups(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!(
            "AUROC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let (mut twice_area, mut prev_tp, mut prev_fp) = (0u128, 0u128, 0u128);
    for (_, tp, fp) in groups {
        let (tp, fp) = (tp as u128, fp as u128);
        twice_area += (fp - prev_fp) * (tp + prev_tp);
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64)
}

pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (groups, pos, _) = tie_groups(scores, labels)?;
    if pos == 0 {
        return Err(Error::SingleClass("average precision needs a positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in groups {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub auroc: Option<f64>,
    pub ap: Option<f64>,
    pub positives: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tag: String,
    pub classes: IndexMap<String, ClassMetrics>,
    pub macro_auroc: Option<f64>,
    pub macro_map: Option<f64>,
    /// `(macro_auroc + macro_map) / 2`.
    pub composite: Option<f64>,
    pub skipped: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    fn from_classes(tag: String, classes: IndexMap<String, ClassMetrics>) -> Self {
        let evaluable = || classes.values().filter(|c| c.auroc.is_some() && c.ap.is_some());
        let macro_auroc = mean(evaluable().filter_map(|c| c.auroc));
        let macro_map = mean(evaluable().filter_map(|c| c.ap));
        let skipped: Vec<String> = classes
            .iter()
            .filter(|(_, c)| c.auroc.is_none() || c.ap.is_none())
            .map(|(k, _)| k.clone())
            .collect();
        let composite = match (macro_auroc, macro_map) {
            (Some(a), Some(m)) => Some(0.5 * (a + m)),
            _ => None,
        };
        Self {
            tag,
            classes,
            macro_auroc,
            macro_map,
            composite,
            skipped,
        }
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_default();
        csv_bytes(Path::new("<report>"), |w| {
            w.write_record(["class", "auroc", "ap", "positives"])?;
            for (name, c) in &self.classes {
                w.write_record([name.clone(), opt(c.auroc), opt(c.ap), c.positives.to_string()])?;
            }
            Ok(())
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }
}

/// Per-class AUROC and AP of `preds` against `truth`, aligned by class name
/// and sample id. Classes lacking positives (AP, AUROC) or negatives (AUROC)
/// are left out of the macro averages and listed in `skipped`.
pub fn evaluate_multilabel(
    preds: &PredictionMatrix,
    truth: &LabelMatrix,
    fold_tag: &str,
) -> Result<EvalReport> {
    let rows = preds
        .sample_ids()
        .iter()
        .map(|id| {
            truth.position(id).ok_or_else(|| {
                Error::Schema(format!("sample {id:?} of {} not in ground truth", preds.model_id()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = truth.records();
    let mut classes = IndexMap::new();
    for (j, class) in preds.class_names().iter().enumerate() {
        let c = truth
            .schema()
            .index_of(class)
            .ok_or_else(|| Error::Schema(format!("class {class:?} not in ground truth")))?;
        let labels: Vec<u8> = rows.iter().map(|&i| records[i].labels[c]).collect();
        let scores: Vec<f64> = preds.values().column(j).to_vec();
        let positives = labels.iter().filter(|&&v| v > 0).count();
        let auroc_v = auroc(&scores, &labels).ok();
        let ap_v = average_precision(&scores, &labels).ok();
        if auroc_v.is_none() || ap_v.is_none() {
            log::warn!(
                "{fold_tag}: class {class:?} has {positives}/{} positives; excluded from macro averages",
                labels.len()
            );
        }
        classes.insert(
            class.clone(),
            ClassMetrics {
                auroc: auroc_v,
                ap: ap_v,
                positives,
                samples: labels.len(),
            },
        );
    }
    Ok(EvalReport::from_classes(fold_tag.to_string(), classes))
}

/// Class-wise unweighted mean over folds (using the folds where the class was
/// evaluable), then macro over classes.
pub fn macro_over_folds(reports: &[EvalReport], tag: &str) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to average".into()))?;
    for r in reports {
        if !r.classes.keys().eq(first.classes.keys()) {
            return Err(Error::Schema(format!(
                "report {:?} has a different class schema than {:?}",
                r.tag, first.tag
            )));
        }
    }
    let classes = first
        .classes
        .keys()
        .map(|name| {
            let per: Vec<&ClassMetrics> = reports.iter().map(|r| &r.classes[name]).collect();
            (
                name.clone(),
                ClassMetrics {
                    auroc: mean(per.iter().filter_map(|c| c.auroc)),
                    ap: mean(per.iter().filter_map(|c| c.ap)),
                    positives: per.iter().map(|c| c.positives).sum(),
                    samples: per.iter().map(|c| c.samples).sum(),
                },
            )
        })
        .collect();
    Ok(EvalReport::from_classes(tag.to_string(), classes))
}
