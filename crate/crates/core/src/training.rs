//! Adam, the two-phase learning-rate schedule and the linear reference model.
//!
//! The reference model is a multi-label logistic layer `σ(xW + b)` over a
//! flat feature vector. It stands in for a CNN backbone and is trained with
//! the same loop a backbone would get:
//!
//! * phase 1 trains only the bias at a fixed rate (the frozen-backbone phase);
//! * phase 2 trains everything, decays the rate by `lr_factor` after
//!   `plateau_patience` epochs without validation improvement and stops early
//!   once `early_stop_patience` stale epochs accumulate at or after epoch
//!   `early_stop_active_after`.
//!
//! Epochs are numbered globally from 1 across both phases. The parameters with
//! the lowest validation loss seen so far are kept as the checkpoint.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::PredictionMatrix;
use crate::imaging::{resize_bilinear, ImageBuffer};
use crate::io::{csv_bytes, csv_reader, fmt_real, parse_real, read_json, write_atomic, write_json};
use crate::losses::{focal_term, BinaryWeight, ClassWeights, FocalConfig, LossKind};
use crate::seeds::{derive, stream};
use crate::{sigmoid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr_start: f64,
    pub lr_floor: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub early_stop_active_after: usize,
    pub max_phase2_epochs: usize,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 10,
            phase1_lr: 1e-4,
            phase2_lr_start: 1e-5,
            lr_floor: 1e-7,
            lr_factor: 0.1,
            plateau_patience: 8,
            early_stop_patience: 20,
            early_stop_active_after: 60,
            max_phase2_epochs: 290,
            iterations_per_epoch: 250,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            loss: LossKind::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr_floor > 0.0 && self.lr_floor < self.phase2_lr_start) {
            return bad(format!(
                "lr_floor {} must be in (0, phase2_lr_start = {})",
                self.lr_floor, self.phase2_lr_start
            ));
        }
        if !(self.phase1_lr > 0.0 && self.phase1_lr.is_finite()) {
            return bad(format!("phase1_lr {} must be > 0", self.phase1_lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!("lr_factor {} must be in (0, 1)", self.lr_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be >= 1".into());
        }
        if self.iterations_per_epoch == 0 || self.batch_size == 0 {
            return bad("iterations_per_epoch and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)".into());
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be > 0".into());
        }
        self.loss.focal_config().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self::with_hyper(n, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape {
            context: "adam gradient",
            expected: params.len(),
            found: grads.len(),
        });
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape {
            context: "adam moments",
            expected: params.len(),
            found: state.m.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub current_lr: f64,
    /// Stale epochs since the last improvement or rate decay.
    pub plateau_wait: usize,
    /// Stale epochs since the last improvement.
    pub epochs_since_improvement: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

impl ScheduleState {
    pub fn new(initial_lr: f64) -> Self {
        Self {
            current_lr: initial_lr,
            plateau_wait: 0,
            epochs_since_improvement: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
        }
    }
}

/// Records the validation loss of `epoch`. Improvement is a strict decrease.
pub fn plateau_step(s: ScheduleState, val_loss: f64, epoch: usize, cfg: &TrainingConfig) -> ScheduleState {
    let mut s = s;
    if val_loss < s.best_val_loss {
        s.best_val_loss = val_loss;
        s.best_epoch = epoch;
        s.plateau_wait = 0;
        s.epochs_since_improvement = 0;
        return s;
    }
    s.plateau_wait += 1;
    s.epochs_since_improvement += 1;
    if s.plateau_wait >= cfg.plateau_patience {
        let next = s.current_lr * cfg.lr_factor;
        // snap to the floor when a decay lands on it up to rounding
        s.current_lr = if next <= cfg.lr_floor * (1.0 + 1e-9) {
            cfg.lr_floor
        } else {
            next
        };
        s.plateau_wait = 0;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

pub fn early_stop_check(s: &ScheduleState, epoch: usize, cfg: &TrainingConfig) -> StopDecision {
    if epoch >= cfg.early_stop_active_after && s.epochs_since_improvement >= cfg.early_stop_patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Bias only, fixed rate.
    Transfer,
    /// All parameters, plateau schedule and early stopping.
    FineTune,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::Transfer => 1,
            Phase::FineTune => 2,
        }
    }
}

/// Epoch-by-epoch driver of the whole two-phase schedule, independent of
/// what is being trained.
#[derive(Debug, Clone)]
pub struct ScheduleDriver {
    cfg: TrainingConfig,
    completed: usize,
    state: ScheduleState,
    stopped: bool,
    best_val_loss: f64,
    best_epoch: usize,
}

/// What the driver concluded after an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    /// The epoch beat every earlier epoch of either phase.
    pub new_best: bool,
    pub decision: StopDecision,
}

impl ScheduleDriver {
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: *cfg,
            completed: 0,
            state: ScheduleState::new(cfg.phase2_lr_start),
            stopped: false,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
        })
    }

    pub fn total_epochs(&self) -> usize {
        self.cfg.phase1_epochs + self.cfg.max_phase2_epochs
    }

    /// Epoch number, phase and learning rate of the next epoch, or `None` when
    /// training is over.
    pub fn next_epoch(&self) -> Option<(usize, Phase, f64)> {
        if self.stopped || self.completed >= self.total_epochs() {
            return None;
        }
        let epoch = self.completed + 1;
        if epoch <= self.cfg.phase1_epochs {
            Some((epoch, Phase::Transfer, self.cfg.phase1_lr))
        } else {
            Some((epoch, Phase::FineTune, self.state.current_lr))
        }
    }

    /// Feeds the validation loss of the epoch returned by [`Self::next_epoch`].
    pub fn record(&mut self, val_loss: f64) -> EpochOutcome {
        let (epoch, phase, _) = self.next_epoch().expect("record after the schedule ended");
        self.completed = epoch;
        let new_best = val_loss < self.best_val_loss;
        if new_best {
            self.best_val_loss = val_loss;
            self.best_epoch = epoch;
        }
        let decision = match phase {
            Phase::Transfer => StopDecision::Continue,
            Phase::FineTune => {
                self.state = plateau_step(self.state, val_loss, epoch, &self.cfg);
                early_stop_check(&self.state, epoch, &self.cfg)
            }
        };
        if decision == StopDecision::Stop {
            self.stopped = true;
        }
        EpochOutcome { new_best, decision }
    }

    pub fn state(&self) -> &ScheduleState {
        &self.state
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best_val_loss)
    }
}

/// How an input becomes the reference model's flat feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// The preprocessed image resized to `size × size` and flattened in
    /// row, column, channel order.
    Downscaled { size: usize },
    /// An externally computed embedding of length `len`.
    Embedding { len: usize },
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::Downscaled { size: 16 }
    }
}

impl FeatureSpec {
    pub fn len(&self) -> usize {
        match *self {
            FeatureSpec::Downscaled { size } => size * size * 3,
            FeatureSpec::Embedding { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Features of a preprocessed image. Embeddings cannot be computed here.
    pub fn extract(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        match *self {
            FeatureSpec::Downscaled { size } => Ok(resize_bilinear(img, size)?.into_data()),
            FeatureSpec::Embedding { .. } => Err(Error::InvalidArgument(
                "embedding features must be supplied as a feature file".into(),
            )),
        }
    }
}

/// Feature vectors keyed by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    sample_ids: Vec<String>,
    values: Array2<f64>,
    index: HashMap<String, usize>,
}

impl FeatureSet {
    pub fn new(sample_ids: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.nrows() != sample_ids.len() {
            return Err(Error::Shape {
                context: "feature rows",
                expected: sample_ids.len(),
                found: values.nrows(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        let mut index = HashMap::with_capacity(sample_ids.len());
        for (i, id) in sample_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateSample(id.clone()));
            }
        }
        Ok(Self {
            sample_ids,
            values,
            index,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn select(&self, sample_ids: &[String]) -> Result<FeatureSet> {
        let rows = sample_ids
            .iter()
            .map(|id| {
                self.index.get(id).copied().ok_or_else(|| Error::MissingSample {
                    model: "features".into(),
                    sample: id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(sample_ids.to_vec(), self.values.select(Axis(0), &rows))
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        csv_bytes(Path::new("features"), |w| {
            let mut header = vec!["sample_id".to_string()];
            header.extend((0..self.dim()).map(|j| format!("f{j}")));
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

    pub fn read_csv(path: &Path) -> Result<FeatureSet> {
        let mut rows = csv_reader(path)?.into_records();
        let width = match rows.next() {
            Some(h) => h.map_err(|e| Error::csv(path, e))?.len(),
            None => return Err(Error::Schema(format!("{}: empty feature file", path.display()))),
        };
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for row in rows {
            let row = row.map_err(|e| Error::csv(path, e))?;
            if row.len() != width {
                return Err(Error::Schema(format!(
                    "{}: row {:?} has {} cells, header has {width}",
                    path.display(),
                    row.get(0).unwrap_or(""),
                    row.len()
                )));
            }
            ids.push(row[0].to_string());
            for cell in row.iter().skip(1) {
                data.push(parse_real(path, cell)?);
            }
        }
        let values = Array2::from_shape_vec((ids.len(), width - 1), data)
            .map_err(|e| Error::Schema(e.to_string()))?;
        FeatureSet::new(ids, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub feature_spec: FeatureSpec,
    pub classes: Vec<String>,
    /// `features × classes`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub training_config: TrainingConfig,
    pub best_epoch: usize,
    pub val_loss: f64,
}

impl ReferenceModel {
    pub fn zeros(feature_spec: FeatureSpec, classes: Vec<String>, cfg: TrainingConfig) -> Self {
        Self {
            weights: vec![0.0; feature_spec.len() * classes.len()],
            bias: vec![0.0; classes.len()],
            feature_spec,
            classes,
            training_config: cfg,
            best_epoch: 0,
            val_loss: f64::NAN,
        }
    }

    pub fn n_features(&self) -> usize {
        self.feature_spec.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = (self.n_features(), self.classes.len());
        if self.weights.len() != d * k {
            return Err(Error::Shape {
                context: "reference model weights",
                expected: d * k,
                found: self.weights.len(),
            });
        }
        if self.bias.len() != k {
            return Err(Error::Shape {
                context: "reference model bias",
                expected: k,
                found: self.bias.len(),
            });
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("reference model has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    /// Per-class logits of one feature row, written into `z`.
    fn logits_into(&self, x: &[f64], z: &mut [f64]) {
        let k = self.classes.len();
        z.copy_from_slice(&self.bias);
        for (f, &xf) in x.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            let row = &self.weights[f * k..(f + 1) * k];
            for (zc, wc) in z.iter_mut().zip(row) {
                *zc += xf * wc;
            }
        }
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::Shape {
                context: "reference model features",
                expected: self.n_features(),
                found: x.ncols(),
            });
        }
        let k = self.classes.len();
        let mut out = Array2::zeros((x.nrows(), k));
        let mut z = vec![0.0; k];
        let mut buf = Vec::with_capacity(x.ncols());
        for (i, row) in x.outer_iter().enumerate() {
            buf.clear();
            buf.extend(row.iter().copied());
            self.logits_into(&buf, &mut z);
            for c in 0..k {
                out[[i, c]] = sigmoid(z[c]);
            }
        }
        Ok(out)
    }
}

/// Member predictions of a reference model over `features`.
pub fn predict(model: &ReferenceModel, model_id: &str, features: &FeatureSet) -> Result<PredictionMatrix> {
    let p = model.predict_proba(features.values())?;
    PredictionMatrix::new(
        model_id,
        features.sample_ids().to_vec(),
        model.classes.clone(),
        p,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn min_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).reduce(f64::min)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        csv_bytes(Path::new("history"), |w| {
            w.write_record(["epoch", "phase", "lr", "train_loss", "val_loss"])?;
            for e in &self.epochs {
                w.write_record([
                    e.epoch.to_string(),
                    e.phase.to_string(),
                    fmt_real(e.lr),
                    fmt_real(e.train_loss),
                    fmt_real(e.val_loss),
                ])?;
            }
            Ok(())
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Parameters restored from the best checkpoint.
    pub model: ReferenceModel,
    pub checkpoint: Checkpoint,
    pub history: History,
}

/// Training or validation split: feature rows with aligned binary targets.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView2<'a, u8>,
}

struct Workspace {
    z: Vec<f64>,
    dz: Vec<f64>,
}

/// Mean over `rows` of the per-sample loss summed over classes, optionally
/// accumulating `∂/∂(weights, bias)` of that mean into `grad`.
fn batch_loss(
    model: &ReferenceModel,
    data: &Split<'_>,
    rows: &[usize],
    weights: &[BinaryWeight],
    focal: &FocalConfig,
    mut grad: Option<(&mut [f64], &mut [f64])>,
    ws: &mut Workspace,
) -> f64 {
    let k = model.classes.len();
    if let Some((gw, gb)) = grad.as_mut() {
        gw.iter_mut().for_each(|v| *v = 0.0);
        gb.iter_mut().for_each(|v| *v = 0.0);
    }
    let scale = 1.0 / rows.len() as f64;
    let mut total = 0.0;
    for &i in rows {
        let x = data.x.row(i);
        let x = x.as_slice().expect("standard layout features");
        model.logits_into(x, &mut ws.z);
        for c in 0..k {
            let y = data.y[[i, c]];
            let p = sigmoid(ws.z[c]);
            total += focal_term(p, y, weights[c], focal);
            ws.dz[c] = scale * logit_grad(ws.z[c], y, weights[c], focal);
        }
        if let Some((gw, gb)) = grad.as_mut() {
            for (gbc, dzc) in gb.iter_mut().zip(&ws.dz) {
                *gbc += dzc;
            }
            for (f, &xf) in x.iter().enumerate() {
                if xf == 0.0 {
                    continue;
                }
                let row = &mut gw[f * k..(f + 1) * k];
                for (g, dzc) in row.iter_mut().zip(&ws.dz) {
                    *g += xf * dzc;
                }
            }
        }
    }
    total * scale
}

/// `∂/∂z` of the focal term at `p = σ(z)`:
/// `s·α·q^γ·(γ·p_t·ln p_t − q)` with `q = 1 − p_t` and `s = +1` for a
/// positive label, `−1` otherwise.
fn logit_grad(z: f64, y: u8, w: BinaryWeight, focal: &FocalConfig) -> f64 {
    let (p_t, alpha, sign) = if y > 0 {
        (sigmoid(z), w.pos, 1.0)
    } else {
        (sigmoid(-z), w.neg, -1.0)
    };
    let p_t = p_t.max(focal.epsilon);
    let q = 1.0 - p_t;
    let mut g = -q;
    if focal.gamma != 0.0 {
        g += focal.gamma * p_t * p_t.ln();
    }
    sign * alpha * q.powf(focal.gamma) * g
}

fn check_split(name: &'static str, s: &Split<'_>, d: usize, k: usize) -> Result<()> {
    if s.x.ncols() != d {
        return Err(Error::Shape {
            context: name,
            expected: d,
            found: s.x.ncols(),
        });
    }
    if s.y.ncols() != k || s.y.nrows() != s.x.nrows() {
        return Err(Error::Shape {
            context: name,
            expected: s.x.nrows(),
            found: s.y.nrows(),
        });
    }
    if s.x.nrows() == 0 {
        return Err(Error::InvalidArgument(format!("{name}: no samples")));
    }
    if s.y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument(format!("{name}: targets must be 0 or 1")));
    }
    Ok(())
}

/// Runs both training phases and returns the checkpointed model with the full
/// per-epoch history. Non-finite losses abort with [`Error::Numerical`].
pub fn fit_reference_model(
    train: Split<'_>,
    val: Split<'_>,
    classes: &[String],
    weights: &ClassWeights,
    feature_spec: FeatureSpec,
    cfg: &TrainingConfig,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let d = feature_spec.len();
    let k = classes.len();
    if k == 0 {
        return Err(Error::InvalidArgument("no classes to train".into()));
    }
    if weights.len() != k {
        return Err(Error::Shape {
            context: "class weights",
            expected: k,
            found: weights.len(),
        });
    }
    check_split("training split", &train, d, k)?;
    check_split("validation split", &val, d, k)?;
    let train_x = train.x.as_standard_layout().into_owned();
    let val_x = val.x.as_standard_layout().into_owned();
    let train = Split {
        x: train_x.view(),
        y: train.y,
    };
    let val = Split {
        x: val_x.view(),
        y: val.y,
    };

    let focal = cfg.loss.focal_config();
    let pairs: Vec<BinaryWeight> = (0..k).map(|c| weights.pair(c)).collect();
    let mut model = ReferenceModel::zeros(feature_spec, classes.to_vec(), *cfg);
    let mut ws = Workspace {
        z: vec![0.0; k],
        dz: vec![0.0; k],
    };
    let mut gw = vec![0.0; d * k];
    let mut gb = vec![0.0; k];
    let mut adam_w = AdamState::with_hyper(d * k, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
    let mut adam_b = AdamState::with_hyper(k, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, stream::TRAIN, 0));
    let val_rows: Vec<usize> = (0..val.x.nrows()).collect();
    let n_train = train.x.nrows();
    let mut batch = vec![0usize; cfg.batch_size];

    let mut driver = ScheduleDriver::new(cfg)?;
    let mut history = History::default();
    let mut checkpoint: Option<Checkpoint> = None;
    let mut current_phase = Phase::Transfer;

    while let Some((epoch, phase, lr)) = driver.next_epoch() {
        if phase != current_phase {
            // the fine-tune phase starts with a fresh optimizer
            adam_w = AdamState::with_hyper(d * k, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
            adam_b = AdamState::with_hyper(k, cfg.beta1, cfg.beta2, cfg.adam_epsilon);
            current_phase = phase;
        }
        let mut train_loss = 0.0;
        for it in 0..cfg.iterations_per_epoch {
            for b in batch.iter_mut() {
                *b = rng.gen_range(0..n_train);
            }
            let loss = batch_loss(&model, &train, &batch, &pairs, &focal, Some((&mut gw, &mut gb)), &mut ws);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, iteration {}",
                    it + 1
                )));
            }
            train_loss += loss;
            adam_step(&mut model.bias, &gb, &mut adam_b, lr)?;
            if phase == Phase::FineTune {
                adam_step(&mut model.weights, &gw, &mut adam_w, lr)?;
            }
        }
        train_loss /= cfg.iterations_per_epoch as f64;
        let val_loss = batch_loss(&model, &val, &val_rows, &pairs, &focal, None, &mut ws);
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.epochs.push(EpochRecord {
            epoch,
            phase: phase.number(),
            lr,
            train_loss,
            val_loss,
        });
        log::debug!("epoch {epoch} phase {} lr {lr:e} train {train_loss:.6} val {val_loss:.6}", phase.number());
        let outcome = driver.record(val_loss);
        if outcome.new_best {
            checkpoint = Some(Checkpoint {
                weights: model.weights.clone(),
                bias: model.bias.clone(),
                epoch,
                val_loss,
            });
        }
        if outcome.decision == StopDecision::Stop {
            log::info!("early stop after epoch {epoch}");
        }
    }

    let checkpoint = checkpoint.ok_or_else(|| Error::InvalidArgument("schedule ran no epochs".into()))?;
    model.weights = checkpoint.weights.clone();
    model.bias = checkpoint.bias.clone();
    model.best_epoch = checkpoint.epoch;
    model.val_loss = checkpoint.val_loss;
    Ok(TrainingOutcome {
        model,
        checkpoint,
        history,
    })
}

/// Mean summed-over-classes loss of `model` on `data`.
pub fn evaluate_loss(
    model: &ReferenceModel,
    data: Split<'_>,
    weights: &ClassWeights,
    loss: LossKind,
) -> Result<f64> {
    let k = model.classes.len();
    check_split("evaluation split", &data, model.n_features(), k)?;
    let x = data.x.as_standard_layout().into_owned();
    let data = Split {
        x: x.view(),
        y: data.y,
    };
    let pairs: Vec<BinaryWeight> = (0..k).map(|c| weights.pair(c)).collect();
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let mut ws = Workspace {
        z: vec![0.0; k],
        dz: vec![0.0; k],
    };
    Ok(batch_loss(model, &data, &rows, &pairs, &loss.focal_config(), None, &mut ws))
}
