//! Binary class weights and the weighted focal / cross-entropy losses.
//!
//! For each class `c` with prediction `p_c` and label `y_c`, the focal term is
//!
//! ```text
//! p_t = p_c        if y_c = 1, else 1 − p_c
//! α_t = w_pos(c)   if y_c = 1, else w_neg(c)
//! FL  = −α_t · (1 − p_t)^γ · ln(p_t)
//! ```
//!
//! with `p_c` clamped to `[ε, 1 − ε]`. A sample's loss is the plain sum over
//! classes; batch losses are means over samples.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json};
use crate::{Error, Result, PROB_EPSILON};

/// `n_samples / (n_classes_in_decision · count)`.
pub fn class_weight(n_samples: usize, n_classes_in_decision: usize, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(Error::EmptyClass(format!(
            "count 0 of {n_samples} samples"
        )));
    }
    if n_classes_in_decision == 0 {
        return Err(Error::InvalidArgument("decision needs at least one class".into()));
    }
    Ok(n_samples as f64 / (n_classes_in_decision as f64 * count as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryWeight {
    pub pos: f64,
    pub neg: f64,
}

/// Per-class `(w_pos, w_neg)` pairs, serialized as `{class: {pos, neg}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights {
    weights: IndexMap<String, BinaryWeight>,
}

impl ClassWeights {
    pub fn new(weights: IndexMap<String, BinaryWeight>) -> Result<Self> {
        for (class, w) in &weights {
            for v in [w.pos, w.neg] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "weight {v} for class {class:?} must be finite and positive"
                    )));
                }
            }
        }
        Ok(Self { weights })
    }

    /// All weights equal to 1.
    pub fn uniform(classes: &[String]) -> Self {
        Self {
            weights: classes
                .iter()
                .map(|c| (c.clone(), BinaryWeight { pos: 1.0, neg: 1.0 }))
                .collect(),
        }
    }

    /// Each class treated as its own binary decision:
    /// `w_pos = n / (2·positives)`, `w_neg = n / (2·negatives)`.
    pub fn from_targets(targets: ArrayView2<'_, u8>, classes: &[String]) -> Result<Self> {
        let (n, n_classes) = targets.dim();
        if classes.len() != n_classes {
            return Err(Error::Shape {
                context: "class weight names",
                expected: n_classes,
                found: classes.len(),
            });
        }
        let mut weights = IndexMap::with_capacity(n_classes);
        for (c, name) in classes.iter().enumerate() {
            let pos = targets.column(c).iter().filter(|&&v| v > 0).count();
            let w_pos = class_weight(n, 2, pos).map_err(|_| Error::EmptyClass(name.clone()))?;
            let w_neg = class_weight(n, 2, n - pos).map_err(|_| Error::EmptyClass(name.clone()))?;
            weights.insert(name.clone(), BinaryWeight { pos: w_pos, neg: w_neg });
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, class: &str) -> Option<BinaryWeight> {
        self.weights.get(class).copied()
    }

    pub fn pair(&self, index: usize) -> BinaryWeight {
        self.weights[index]
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.weights.keys().map(String::as_str)
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|(k, w)| {
                    (
                        k.clone(),
                        BinaryWeight {
                            pos: w.pos * factor,
                            neg: w.neg * factor,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let w: Self = read_json(path)?;
        Self::new(w.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            epsilon: PROB_EPSILON,
        }
    }
}

impl FocalConfig {
    pub fn cross_entropy() -> Self {
        Self {
            gamma: 0.0,
            epsilon: PROB_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma {} must be >= 0", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} must be in (0, 0.5)",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Focal { gamma: f64 },
    Bce,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Focal { gamma: 2.0 }
    }
}

impl LossKind {
    pub fn focal_config(self) -> FocalConfig {
        match self {
            LossKind::Focal { gamma } => FocalConfig {
                gamma,
                epsilon: PROB_EPSILON,
            },
            LossKind::Bce => FocalConfig::cross_entropy(),
        }
    }
}

fn check_lengths(p: &[f64], y: &[u8], w: &ClassWeights) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::Shape {
            context: "loss labels",
            expected: p.len(),
            found: y.len(),
        });
    }
    if w.len() != p.len() {
        return Err(Error::Shape {
            context: "loss weights",
            expected: p.len(),
            found: w.len(),
        });
    }
    Ok(())
}

#[inline]
fn alpha_and_pt(p: f64, y: u8, w: BinaryWeight, eps: f64) -> (f64, f64) {
    let p = p.clamp(eps, 1.0 - eps);
    if y > 0 {
        (w.pos, p)
    } else {
        (w.neg, 1.0 - p)
    }
}

/// Focal term for one binary decision.
#[inline]
pub fn focal_term(p: f64, y: u8, w: BinaryWeight, cfg: &FocalConfig) -> f64 {
    let (alpha, pt) = alpha_and_pt(p, y, w, cfg.epsilon);
    -alpha * (1.0 - pt).powf(cfg.gamma) * pt.ln()
}

/// `∂ focal_term / ∂p`. Zero where the clamp is active.
#[inline]
pub fn focal_term_grad(p: f64, y: u8, w: BinaryWeight, cfg: &FocalConfig) -> f64 {
    if p < cfg.epsilon || p > 1.0 - cfg.epsilon {
        return 0.0;
    }
    let (alpha, pt) = alpha_and_pt(p, y, w, cfg.epsilon);
    let q = 1.0 - pt;
    // d/dpt of −α q^γ ln(pt) = α (γ q^(γ−1) ln pt − q^γ / pt)
    let mut d_pt = -q.powf(cfg.gamma) / pt;
    if cfg.gamma != 0.0 {
        d_pt += cfg.gamma * q.powf(cfg.gamma - 1.0) * pt.ln();
    }
    let d_pt = alpha * d_pt;
    if y > 0 {
        d_pt
    } else {
        -d_pt
    }
}

pub fn focal_loss(p: &[f64], y: &[u8], w: &ClassWeights, cfg: &FocalConfig) -> Result<f64> {
    check_lengths(p, y, w)?;
    Ok(p
        .iter()
        .zip(y)
        .enumerate()
        .map(|(c, (&pc, &yc))| focal_term(pc, yc, w.pair(c), cfg))
        .sum())
}

pub fn focal_loss_grad(p: &[f64], y: &[u8], w: &ClassWeights, cfg: &FocalConfig) -> Result<Vec<f64>> {
    check_lengths(p, y, w)?;
    Ok(p
        .iter()
        .zip(y)
        .enumerate()
        .map(|(c, (&pc, &yc))| focal_term_grad(pc, yc, w.pair(c), cfg))
        .collect())
}

/// Weighted binary cross-entropy: the focal loss with `γ = 0`.
pub fn weighted_bce(p: &[f64], y: &[u8], w: &ClassWeights, epsilon: f64) -> Result<f64> {
    focal_loss(
        p,
        y,
        w,
        &FocalConfig {
            gamma: 0.0,
            epsilon,
        },
    )
}
