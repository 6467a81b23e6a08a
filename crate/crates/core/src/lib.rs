//! Multi-label fundus image classification pipeline.
//!
//! The crate covers every stage between a labelled image manifest and a
//! stacked ensemble prediction:
//!
//! * [`dataset`]: manifest loading, label statistics and training targets.
//! * [`imaging`]: pad / crop / resize / normalize geometry and seeded augmentation.
//! * [`sampling`]: iterative multi-label stratified k-fold and augmentation up-sampling.
//! * [`losses`]: binary class weights, weighted focal loss and cross-entropy.
//! * [`training`]: Adam, the two-phase plateau schedule and a linear reference model.
//! * [`lbfgs`]: L-BFGS with a Wolfe line search and L2 logistic regression.
//! * [`ensemble`]: prediction matrices, feature assembly and the per-class stacker.
//! * [`metrics`]: ROC curves, AUROC, average precision and macro-averaged reports.
//!
//! Deep CNN backbones are not part of the crate. Any external model can take
//! part in the ensemble by writing a [`ensemble::PredictionMatrix`] CSV.

pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod imaging;
pub mod io;
pub mod lbfgs;
pub mod losses;
pub mod metrics;
pub mod sampling;
pub mod seeds;
pub mod synthetic;
pub mod training;

pub use error::{Error, ErrorKind, Result};

/// Probability clamp used by every log-loss evaluation in the crate.
pub const PROB_EPSILON: f64 = 1e-7;

/// Version tags of every persisted file format, printed by `--version`.
pub const FORMAT_VERSIONS: &[(&str, u32)] = &[
    ("manifest_csv", 1),
    ("fold_csv", 1),
    ("upsample_plan_csv", 1),
    ("tensor_fens", 1),
    ("class_weights_json", 1),
    ("reference_model_json", 1),
    ("history_csv", 1),
    ("logistic_model_json", 1),
    ("prediction_csv", 1),
    ("stacked_model_json", 1),
    ("eval_report_json", 1),
    ("roc_csv", 1),
];

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
