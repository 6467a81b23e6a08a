//! Limited-memory BFGS and the L2-regularized binary logistic regression
//! fitted with it.
//!
//! The minimizer is unconstrained: directions come from the standard two-loop
//! recursion over the last `m` correction pairs, step lengths from a
//! bracketing line search enforcing the strong Wolfe conditions
//!
//! ```text
//! f(x + αd) ≤ f(x) + c1·α·∇f(x)ᵀd
//! |∇f(x + αd)ᵀd| ≤ c2·|∇f(x)ᵀd|
//! ```
//!
//! Near the optimum the sufficient-decrease test is dominated by rounding in
//! `f`, so a step is also accepted when `f` did not rise by more than
//! `1e-10·|f|` and the slope satisfies `∇f(x + αd)ᵀd ≤ (2c1 − 1)·∇f(x)ᵀd`
//! (the approximate Wolfe condition of Hager and Zhang). For the same reason
//! the bracketing phase follows their update rule, which moves the bracket
//! ends by the sign of the slope.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::io::{read_json, write_json};
use crate::{logit, sigmoid, Error, Result, PROB_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            grad_tolerance: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "line search constants must satisfy 0 < c1 < c2 < 1 (got {}, {})",
                self.c1, self.c2
            )));
        }
        if self.memory == 0 {
            return Err(Error::InvalidArgument("L-BFGS memory must be >= 1".into()));
        }
        if !(self.grad_tolerance >= 0.0) {
            return Err(Error::InvalidArgument("gradient tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// `‖∇f‖∞ ≤ grad_tolerance`.
    Converged,
    MaxIterations,
    /// No step satisfying the Wolfe conditions was found, even along −∇f.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
}

impl LbfgsReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// `−H·g` via the two-loop recursion, with `H₀ = (sᵀy / yᵀy)·I` from the
/// newest pair.
fn two_loop(g: &[f64], pairs: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(p) = pairs.back() {
        let gamma = dot(&p.s, &p.y) / dot(&p.y, &p.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (p, a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Point {
    alpha: f64,
    f: f64,
    slope: f64,
    g: Vec<f64>,
}

struct LineSearch<'a, F> {
    objective: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    slope0: f64,
    cfg: &'a LbfgsConfig,
    evals: usize,
    trial: Vec<f64>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LineSearch<'_, F> {
    fn eval(&mut self, alpha: f64) -> Point {
        self.evals += 1;
        for ((t, xi), di) in self.trial.iter_mut().zip(self.x).zip(self.d) {
            *t = xi + alpha * di;
        }
        let mut g = vec![0.0; self.x.len()];
        let f = (self.objective)(&self.trial, &mut g);
        let slope = dot(&g, self.d);
        Point { alpha, f, slope, g }
    }

    /// Rise in `f` that cannot be told apart from rounding.
    fn noise(&self) -> f64 {
        1e-10 * self.f0.abs()
    }

    fn sufficient(&self, p: &Point) -> bool {
        p.f <= self.f0 + self.cfg.c1 * p.alpha * self.slope0
            || (p.f <= self.f0 + self.noise() && p.slope <= (2.0 * self.cfg.c1 - 1.0) * self.slope0)
    }

    fn acceptable(&self, p: &Point) -> bool {
        self.sufficient(p) && p.slope.abs() <= -self.cfg.c2 * self.slope0
    }

    /// A point left of a line minimizer: still descending and not above `f0`
    /// beyond rounding.
    fn is_low(&self, p: &Point) -> bool {
        p.slope < 0.0 && p.f <= self.f0 + self.noise()
    }

    fn run(&mut self, alpha0: f64) -> Option<Point> {
        let mut prev = Point {
            alpha: 0.0,
            f: self.f0,
            slope: self.slope0,
            g: Vec::new(),
        };
        let mut alpha = alpha0;
        for _ in 0..self.cfg.max_line_search {
            let p = self.eval(alpha);
            if !p.f.is_finite() || p.g.iter().any(|v| !v.is_finite()) {
                // overshoot into a non-finite region: back off toward the last good step
                alpha = 0.5 * (prev.alpha + alpha);
                continue;
            }
            if self.acceptable(&p) {
                return Some(p);
            }
            if !self.is_low(&p) {
                return self.zoom(prev, p);
            }
            alpha = p.alpha * 2.0;
            prev = p;
        }
        None
    }

    /// Shrinks `[lo, hi]` where `lo` is low and `hi` is not. The bracket is
    /// updated from slope signs rather than by comparing values, which stay
    /// meaningful when `f` has stopped changing in its last digits.
    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Option<Point> {
        for _ in 0..self.cfg.max_line_search {
            let width = (hi.alpha - lo.alpha).abs();
            if width <= 1e-16 * lo.alpha.abs().max(hi.alpha.abs()) {
                break;
            }
            let p = self.eval(interpolate(&lo, &hi));
            if p.f.is_finite() && p.g.iter().all(|v| v.is_finite()) && self.acceptable(&p) {
                return Some(p);
            }
            if p.f.is_finite() && self.is_low(&p) {
                lo = p;
            } else {
                hi = p;
            }
        }
        // Accept the best step found if it is not an ascent.
        (lo.alpha > 0.0 && lo.f <= self.f0 + self.noise()).then_some(lo)
    }
}

/// Trial step inside the bracket: the zero of the secant through the two
/// slopes when they change sign (exact on quadratics), otherwise the cubic
/// fit, safeguarded away from the ends and falling back to bisection.
fn interpolate(a: &Point, b: &Point) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a.alpha, b.alpha) } else { (b.alpha, a.alpha) };
    let mid = 0.5 * (lo + hi);
    if !b.f.is_finite() || !b.slope.is_finite() {
        return mid;
    }
    let margin = 0.1 * (hi - lo);
    let inside = |c: f64| c.is_finite() && c >= lo + margin && c <= hi - margin;
    if a.slope * b.slope < 0.0 {
        let c = (a.alpha * b.slope - b.alpha * a.slope) / (b.slope - a.slope);
        return if inside(c) { c } else { mid };
    }
    let d1 = a.slope + b.slope - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let c = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    if inside(c) {
        c
    } else {
        mid
    }
}

/// Minimizes `objective`, which writes the gradient into its second argument
/// and returns the value.
///
/// Errors when the objective is non-finite at `x0`. A line-search breakdown is
/// not an error: the best iterate is returned with
/// [`Termination::LineSearchFailed`].
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<LbfgsReport>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("objective is not finite at the start point".into()));
    }
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let report = |x: Vec<f64>, f: f64, g: &[f64], iterations, termination| LbfgsReport {
        x,
        value: f,
        grad_norm: inf_norm(g),
        iterations,
        termination,
    };

    for iter in 0..cfg.max_iterations {
        if inf_norm(&g) <= cfg.grad_tolerance {
            return Ok(report(x, f, &g, iter, Termination::Converged));
        }
        let mut d = two_loop(&g, &pairs);
        let mut slope = dot(&d, &g);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&d, &g);
        }
        let mut alpha0 = if pairs.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let found = loop {
            let mut ls = LineSearch {
                objective: &mut objective,
                x: &x,
                d: &d,
                f0: f,
                slope0: slope,
                cfg,
                evals: 0,
                trial: vec![0.0; n],
            };
            match ls.run(alpha0) {
                Some(p) => break Some(p),
                None if !pairs.is_empty() => {
                    // retry once along steepest descent with a fresh memory
                    pairs.clear();
                    d = g.iter().map(|v| -v).collect();
                    slope = dot(&d, &g);
                    alpha0 = (1.0 / dot(&g, &g).sqrt()).min(1.0);
                }
                None => break None,
            }
        };
        let Some(p) = found else {
            let termination = if inf_norm(&g) <= cfg.grad_tolerance {
                Termination::Converged
            } else {
                Termination::LineSearchFailed
            };
            return Ok(report(x, f, &g, iter, termination));
        };

        let s: Vec<f64> = d.iter().map(|di| p.alpha * di).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s: s.clone(), y, rho: 1.0 / sy });
        }
        for (xi, si) in x.iter_mut().zip(&s) {
            *xi += si;
        }
        f = p.f;
        g = p.g;
    }
    let termination = if inf_norm(&g) <= cfg.grad_tolerance {
        Termination::Converged
    } else {
        Termination::MaxIterations
    };
    Ok(report(x, f, &g, cfg.max_iterations, termination))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub lambda: f64,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    #[serde(default)]
    pub feature_names: Vec<String>,
}

impl LogisticModel {
    pub fn zeros(n_features: usize, lambda: f64) -> Self {
        Self {
            lambda,
            intercept: 0.0,
            coefficients: vec![0.0; n_features],
            feature_names: Vec::new(),
        }
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Self {
        self.feature_names = names;
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn decision(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.intercept
            + row
                .iter()
                .zip(&self.coefficients)
                .map(|(x, w)| x * w)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: LogisticModel,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Set when `y` held a single class and a constant model was returned.
    pub degenerate: bool,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean log-loss plus `(λ/2)·‖w‖²` at `theta = [w…, b]`, writing its gradient.
pub fn logistic_objective(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    lambda: f64,
    theta: &[f64],
    grad: &mut [f64],
) -> f64 {
    let (n, d) = x.dim();
    let (w, b) = theta.split_at(d);
    let b = b[0];
    grad.iter_mut().for_each(|v| *v = 0.0);
    let mut loss = 0.0;
    for (row, &yi) in x.outer_iter().zip(y) {
        let z = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let yf = f64::from(yi);
        loss += softplus(z) - yf * z;
        let r = sigmoid(z) - yf;
        for (gj, xj) in grad[..d].iter_mut().zip(row.iter()) {
            *gj += r * xj;
        }
        grad[d] += r;
    }
    let inv_n = 1.0 / n as f64;
    grad.iter_mut().for_each(|v| *v *= inv_n);
    let mut penalty = 0.0;
    for (gj, wj) in grad[..d].iter_mut().zip(w) {
        *gj += lambda * wj;
        penalty += wj * wj;
    }
    loss * inv_n + 0.5 * lambda * penalty
}

/// Fits `P(y = 1 | x) = σ(wᵀx + b)` from a zero start.
pub fn fit_logistic(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    lambda: f64,
    cfg: &LbfgsConfig,
) -> Result<LogisticFit> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::Shape {
            context: "logistic targets",
            expected: n,
            found: y.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot fit logistic regression on zero rows".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let positives = y.iter().filter(|&&v| v > 0).count();
    if positives == 0 || positives == n {
        let rate = (positives as f64 / n as f64).clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
        return Ok(LogisticFit {
            model: LogisticModel {
                lambda,
                intercept: logit(rate),
                coefficients: vec![0.0; d],
                feature_names: Vec::new(),
            },
            iterations: 0,
            grad_norm: 0.0,
            converged: true,
            degenerate: true,
        });
    }
    let report = lbfgs_minimize(
        |theta, grad| logistic_objective(x, y, lambda, theta, grad),
        &vec![0.0; d + 1],
        cfg,
    )?;
    let converged = report.converged();
    let mut theta = report.x;
    let intercept = theta.pop().expect("intercept");
    Ok(LogisticFit {
        model: LogisticModel {
            lambda,
            intercept,
            coefficients: theta,
            feature_names: Vec::new(),
        },
        iterations: report.iterations,
        grad_norm: report.grad_norm,
        converged,
        degenerate: false,
    })
}

pub fn predict_logistic(model: &LogisticModel, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if x.ncols() != model.coefficients.len() {
        return Err(Error::Shape {
            context: "logistic features",
            expected: model.coefficients.len(),
            found: x.ncols(),
        });
    }
    Ok(x.outer_iter().map(|row| sigmoid(model.decision(row))).collect())
}
