//! Linear downstream predictors on extracted features: one-vs-rest linear SVC
//! (dual coordinate descent), linear epsilon-SVR (averaged subgradient
//! descent) and LASSO (cyclic coordinate descent, IRLS for the logistic family).

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Features whose training standard deviation is below this are treated as constant.
const CONSTANT_STD: f64 = 1e-12;

/// Dense row-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("rows have differing lengths"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("design matrix contains NaN or Inf"));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-feature centering and scaling learned on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero training variance; their std is 1 and their weight is pinned to 0.
    pub constant: Vec<bool>,
}

impl Standardizer {
    /// Population (1/N) moments of each column.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0.0; x.cols];
        for i in 0..x.rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.cols];
        for i in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut std = Vec::with_capacity(x.cols);
        let mut constant = Vec::with_capacity(x.cols);
        for (v, m) in var.into_iter().zip(&mean) {
            let s = (v / n).sqrt();
            // relative to the column magnitude so rounding noise on large constants counts as constant
            let c = s <= CONSTANT_STD * m.abs().max(1.0);
            constant.push(c);
            std.push(if c { 1.0 } else { s });
        }
        Self { mean, std, constant }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.constant)
            .map(|(((v, m), s), &c)| if c { 0.0 } else { (v - m) / s })
            .collect()
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut data = Vec::with_capacity(x.data.len());
        for i in 0..x.rows {
            data.extend(self.transform_row(x.row(i)));
        }
        Matrix { rows: x.rows, cols: x.cols, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SvcBinary,
    Svr,
    LassoLinear,
    LassoLogistic,
}

/// Affine map from standardized to original target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

/// Linear model acting on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: ModelKind,
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub bias: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target: Option<TargetScale>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda: Option<f64>,
}

impl LinearModel {
    fn check_dim(&self, x: &Matrix) -> Result<()> {
        if x.cols != self.weights.len() {
            return Err(Error::shape(format!(
                "model expects {} features, got {}",
                self.weights.len(),
                x.cols
            )));
        }
        Ok(())
    }

    /// `w . standardize(x) + b` for every row.
    pub fn decision(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok((0..x.rows).map(|i| dot(&self.weights, &self.standardizer.transform_row(x.row(i))) + self.bias).collect())
    }

    /// Predictions in target units: de-standardized for SVR, probabilities for logistic LASSO.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        let d = self.decision(x)?;
        Ok(match (self.kind, self.target) {
            (ModelKind::LassoLogistic, _) => d.into_iter().map(sigmoid).collect(),
            (_, Some(t)) => d.into_iter().map(|v| t.mean + t.std * v).collect(),
            _ => d,
        })
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Linear SVC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvcParams {
    pub c: f64,
    /// Stop when the duality gap falls below `tol * max(1, primal objective)`.
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for SvcParams {
    fn default() -> Self {
        Self { c: 1.0, tol: 1e-4, max_passes: 1000 }
    }
}

/// Passes between duality-gap evaluations; each costs about one pass.
const GAP_CHECK_EVERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub passes: usize,
    pub gap: f64,
    pub converged: bool,
}

/// L2-regularized hinge-loss SVM solved in the dual by coordinate descent.
///
/// Minimizes `0.5 * (|w|^2 + b^2) + c * sum max(0, 1 - y_i (w.x_i + b))`; the
/// bias is handled as the weight of a constant feature equal to 1.
/// `y` holds +1/-1 labels. Returns `(w, b, stats)`.
pub fn fit_hinge_dual(x: &Matrix, y: &[f64], params: &SvcParams, seed: u64) -> Result<(Vec<f64>, f64, SolveStats)> {
    if x.rows != y.len() {
        return Err(Error::shape(format!("{} rows but {} labels", x.rows, y.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidTarget("hinge labels must be +1 or -1".into()));
    }
    if !(params.c > 0.0) {
        return Err(Error::ConfigError("SVC penalty must be positive".into()));
    }
    let (n, d) = (x.rows, x.cols);
    let c = params.c;
    let qii: Vec<f64> = (0..n).map(|i| dot(x.row(i), x.row(i)) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = SolveStats { passes: 0, gap: f64::INFINITY, converged: false };
    for pass in 0..params.max_passes {
        order.shuffle(&mut seed::rng_from(seed, &[pass as u64]));
        let mut max_violation: f64 = 0.0;
        for &i in &order {
            let xi = x.row(i);
            let g = y[i] * (dot(&w, xi) + b) - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg.abs() > 1e-15 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * y[i];
                if delta != 0.0 {
                    for (wj, xj) in w.iter_mut().zip(xi) {
                        *wj += delta * xj;
                    }
                    b += delta;
                }
            }
        }
        stats.passes = pass + 1;
        let last = pass + 1 == params.max_passes;
        if max_violation <= 1e-15 || (pass + 1) % GAP_CHECK_EVERY == 0 || last {
            let primal = 0.5 * (dot(&w, &w) + b * b)
                + c * (0..n).map(|i| (1.0 - y[i] * (dot(&w, x.row(i)) + b)).max(0.0)).sum::<f64>();
            let dual = alpha.iter().sum::<f64>() - 0.5 * (dot(&w, &w) + b * b);
            stats.gap = primal - dual;
            if stats.gap <= params.tol * primal.max(1.0) {
                stats.converged = true;
                break;
            }
        }
    }
    if !stats.converged {
        log::debug!("hinge solver stopped after {} passes (gap {:.3e})", stats.passes, stats.gap);
    }
    Ok((w, b, stats))
}

/// One-vs-rest multiclass linear SVC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassSvc {
    pub class_names: Vec<String>,
    /// One binary model per class; `None` when the class had no training rows.
    pub members: Vec<Option<LinearModel>>,
}

pub fn train_svc(x: &[Vec<f64>], y: &[usize], n_classes: usize, params: &SvcParams, seed: u64) -> Result<MulticlassSvc> {
    let x = Matrix::from_rows(x)?;
    if x.rows != y.len() {
        return Err(Error::shape(format!("{} rows but {} labels", x.rows, y.len())));
    }
    if x.rows < 2 {
        return Err(Error::invalid("SVC needs at least 2 training rows"));
    }
    if let Some(bad) = y.iter().find(|&&k| k >= n_classes) {
        return Err(Error::InvalidTarget(format!("class {bad} out of range for {n_classes} classes")));
    }
    let mut present = vec![false; n_classes];
    y.iter().for_each(|&k| present[k] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidTarget("SVC needs at least 2 classes in the training rows".into()));
    }
    let standardizer = Standardizer::fit(&x);
    let xs = standardizer.transform(&x);
    let members = (0..n_classes)
        .map(|k| {
            if !present[k] {
                return Ok(None);
            }
            let yk: Vec<f64> = y.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
            let (weights, bias, _) = fit_hinge_dual(&xs, &yk, params, seed::derive_seed(seed, &[k as u64]))?;
            Ok(Some(LinearModel {
                kind: ModelKind::SvcBinary,
                standardizer: standardizer.clone(),
                weights,
                bias,
                target: None,
                lambda: None,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MulticlassSvc { class_names: (0..n_classes).map(|k| k.to_string()).collect(), members })
}

impl MulticlassSvc {
    /// Per-class decision values; absent classes score negative infinity.
    pub fn decision(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = Matrix::from_rows(x)?;
        let per_class = self
            .members
            .iter()
            .map(|m| match m {
                Some(m) => m.decision(&x),
                None => Ok(vec![f64::NEG_INFINITY; x.rows]),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((0..x.rows).map(|i| per_class.iter().map(|c| c[i]).collect()).collect())
    }
}

/// Arg-max class per row, ties resolved toward the lowest class index.
pub fn predict_svc(model: &MulticlassSvc, x: &[Vec<f64>]) -> Result<Vec<usize>> {
    Ok(model
        .decision(x)?
        .iter()
        .map(|scores| {
            let mut best = 0;
            for (k, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Linear epsilon-SVR
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    /// Loss weight as in libsvm: the objective is `|w|^2 / 2 + c * sum epsilon-loss`.
    pub c: f64,
    pub epsilon: f64,
    pub passes: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self { c: 1.0, epsilon: 0.1, passes: 5000 }
    }
}

/// Linear SVR on standardized features and targets, fitted by full-batch
/// subgradient descent with `1/sqrt(t)` steps; the returned model is the
/// average of the iterates over the second half of the budget.
pub fn train_svr(x: &[Vec<f64>], y: &[f64], params: &SvrParams) -> Result<LinearModel> {
    let x = Matrix::from_rows(x)?;
    if x.rows != y.len() {
        return Err(Error::shape(format!("{} rows but {} targets", x.rows, y.len())));
    }
    if x.rows < 2 {
        return Err(Error::invalid("SVR needs at least 2 training rows"));
    }
    if !(params.c > 0.0 && params.epsilon >= 0.0) {
        return Err(Error::ConfigError("SVR needs c > 0 and epsilon >= 0".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidTarget("non-finite regression target".into()));
    }
    let standardizer = Standardizer::fit(&x);
    let xs = standardizer.transform(&x);
    let n = x.rows as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let y_std = (y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    let y_std = if y_std > CONSTANT_STD { y_std } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

    // same minimizer as |w|^2 / 2 + c * sum loss, rescaled to a mean loss
    let lambda = 1.0 / (params.c * n);
    let d = x.cols;
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (mut w_avg, mut b_avg, mut n_avg) = (vec![0.0; d], 0.0, 0.0);
    let mut gw = vec![0.0; d];
    let start_avg = params.passes / 2;
    for t in 0..params.passes {
        gw.iter_mut().zip(&w).for_each(|(g, wj)| *g = lambda * wj);
        let mut gb = 0.0;
        for i in 0..x.rows {
            let xi = xs.row(i);
            let r = ys[i] - dot(&w, xi) - b;
            if r.abs() > params.epsilon {
                let s = r.signum() / n;
                for (g, xj) in gw.iter_mut().zip(xi) {
                    *g -= s * xj;
                }
                gb -= s;
            }
        }
        let step = 1.0 / ((t + 1) as f64).sqrt();
        for ((wj, g), &c) in w.iter_mut().zip(&gw).zip(&standardizer.constant) {
            *wj = if c { 0.0 } else { *wj - step * g };
        }
        b -= step * gb;
        if t >= start_avg {
            n_avg += 1.0;
            for (a, wj) in w_avg.iter_mut().zip(&w) {
                *a += (wj - *a) / n_avg;
            }
            b_avg += (b - b_avg) / n_avg;
        }
    }
    if params.passes == 0 {
        w_avg = w;
        b_avg = b;
    }
    Ok(LinearModel {
        kind: ModelKind::Svr,
        standardizer,
        weights: w_avg,
        bias: b_avg,
        target: Some(TargetScale { mean: y_mean, std: y_std }),
        lambda: Some(lambda),
    })
}

// ---------------------------------------------------------------------------
// LASSO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LassoFamily {
    Linear,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoParams {
    pub n_lambda: usize,
    /// Smallest grid value as a fraction of lambda_max.
    pub lambda_min_ratio: f64,
    pub inner_folds: usize,
    pub tol: f64,
    pub max_passes: usize,
    /// Explicit grid overriding the log-spaced default.
    pub lambda_grid: Option<Vec<f64>>,
}

impl Default for LassoParams {
    fn default() -> Self {
        Self { n_lambda: 50, lambda_min_ratio: 1e-2, inner_folds: 5, tol: 1e-10, max_passes: 100_000, lambda_grid: None }
    }
}

/// Coordinate-descent state on a standardized design.
struct LassoProblem<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    constant: &'a [bool],
    family: LassoFamily,
    tol: f64,
    max_passes: usize,
}

impl LassoProblem<'_> {
    /// `max_j |x_j . (y - mean(y))| / n`.
    fn lambda_max(&self) -> f64 {
        let n = self.x.rows as f64;
        let y_mean = self.y.iter().sum::<f64>() / n;
        (0..self.x.cols)
            .filter(|&j| !self.constant[j])
            .map(|j| (0..self.x.rows).map(|i| self.x.row(i)[j] * (self.y[i] - y_mean)).sum::<f64>().abs() / n)
            .fold(0.0, f64::max)
    }

    /// Weighted least squares `1/(2n) sum v_i (z_i - b - x_i.w)^2 + lambda |w|_1`
    /// by cyclic coordinate descent, warm-started from `(w, b)`.
    fn weighted_cd(&self, z: &[f64], v: &[f64], lambda: f64, w: &mut [f64], b: &mut f64) {
        let (n, d) = (self.x.rows, self.x.cols);
        let nf = n as f64;
        let sum_v: f64 = v.iter().sum();
        let col_scale: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| v[i] * self.x.row(i)[j].powi(2)).sum::<f64>() / nf)
            .collect();
        let mut r: Vec<f64> = (0..n).map(|i| z[i] - *b - dot(w, self.x.row(i))).collect();
        let all: Vec<usize> = (0..d).collect();
        // Full passes alternate with passes over the nonzero weights only; the
        // loop ends when a full pass moves nothing by more than `tol`.
        let mut full = true;
        for _ in 0..self.max_passes {
            let active: Vec<usize>;
            let coords = if full {
                &all
            } else {
                active = (0..d).filter(|&j| w[j] != 0.0).collect();
                &active
            };
            let mut max_change: f64 = 0.0;
            let new_b = *b + (0..n).map(|i| v[i] * r[i]).sum::<f64>() / sum_v;
            let db = new_b - *b;
            if db != 0.0 {
                r.iter_mut().for_each(|ri| *ri -= db);
                *b = new_b;
                max_change = max_change.max(db.abs());
            }
            for &j in coords {
                if self.constant[j] || col_scale[j] <= 0.0 {
                    w[j] = 0.0;
                    continue;
                }
                let rho = (0..n).map(|i| v[i] * self.x.row(i)[j] * r[i]).sum::<f64>() / nf + col_scale[j] * w[j];
                let new = soft_threshold(rho, lambda) / col_scale[j];
                let delta = new - w[j];
                if delta != 0.0 {
                    for (i, ri) in r.iter_mut().enumerate() {
                        *ri -= delta * self.x.row(i)[j];
                    }
                    w[j] = new;
                    max_change = max_change.max(delta.abs() * col_scale[j].sqrt());
                }
            }
            if max_change < self.tol {
                if full {
                    break;
                }
                full = true;
            } else {
                full = false;
            }
        }
    }

    fn fit(&self, lambda: f64, w: &mut [f64], b: &mut f64) -> Result<()> {
        let n = self.x.rows;
        match self.family {
            LassoFamily::Linear => {
                let ones = vec![1.0; n];
                self.weighted_cd(self.y, &ones, lambda, w, b);
            }
            LassoFamily::Logistic => {
                // Proximal Newton: each quadratic model is solved by weighted CD,
                // then the step is halved until the penalized objective decreases.
                let objective = |w: &[f64], b: f64| {
                    0.5 * binomial_deviance(self.x, self.y, w, b) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
                };
                let mut obj = objective(w, *b);
                for _ in 0..100 {
                    let eta: Vec<f64> = (0..n).map(|i| *b + dot(w, self.x.row(i))).collect();
                    let p: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
                    let v: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(1e-5)).collect();
                    let z: Vec<f64> = (0..n).map(|i| eta[i] + (self.y[i] - p[i]) / v[i]).collect();
                    let (mut w_new, mut b_new) = (w.to_vec(), *b);
                    self.weighted_cd(&z, &v, lambda, &mut w_new, &mut b_new);
                    let mut t = 1.0;
                    let mut cand = (w_new.clone(), b_new);
                    let mut cand_obj = objective(&cand.0, cand.1);
                    while !(cand_obj <= obj) && t > 1e-3 {
                        t *= 0.5;
                        cand.0 = w.iter().zip(&w_new).map(|(a, c)| a + t * (c - a)).collect();
                        cand.1 = *b + t * (b_new - *b);
                        cand_obj = objective(&cand.0, cand.1);
                    }
                    if !cand_obj.is_finite() {
                        return Err(Error::NumericalError("logistic LASSO deviance diverged".into()));
                    }
                    if !(cand_obj <= obj) {
                        break;
                    }
                    let step = w.iter().zip(&cand.0).map(|(a, c)| (a - c).abs()).fold((*b - cand.1).abs(), f64::max);
                    w.copy_from_slice(&cand.0);
                    *b = cand.1;
                    let done = step < self.tol || obj - cand_obj < 1e-3 * self.tol * (1.0 + cand_obj.abs());
                    obj = cand_obj;
                    if done {
                        break;
                    }
                }
            }
        }
        Ok(())
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn binomial_deviance(x: &Matrix, y: &[f64], w: &[f64], b: f64) -> f64 {
    let mut dev = 0.0;
    for i in 0..x.rows {
        let eta = b + dot(w, x.row(i));
        // log(1 + e^eta) - y * eta, computed stably
        let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        dev += softplus - y[i] * eta;
    }
    2.0 * dev / x.rows as f64
}

fn check_lasso_target(y: &[f64], family: LassoFamily) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidTarget("non-finite LASSO target".into()));
    }
    if family == LassoFamily::Logistic {
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidTarget("logistic targets must be 0 or 1".into()));
        }
        let pos = y.iter().filter(|&&v| v == 1.0).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::InvalidTarget("logistic LASSO needs both classes".into()));
        }
    }
    Ok(())
}

/// `lambda_max` of the standardized problem: the smallest penalty that zeroes every weight.
pub fn lasso_lambda_max(x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let x = Matrix::from_rows(x)?;
    let st = Standardizer::fit(&x);
    let xs = st.transform(&x);
    let p = LassoProblem { x: &xs, y, constant: &st.constant, family: LassoFamily::Linear, tol: 0.0, max_passes: 0 };
    Ok(p.lambda_max())
}

/// LASSO at one fixed penalty on standardized features; the intercept is unpenalized.
pub fn fit_lasso_fixed(x: &[Vec<f64>], y: &[f64], family: LassoFamily, lambda: f64, params: &LassoParams) -> Result<LinearModel> {
    let path = fit_lasso_path(x, y, family, &[lambda], params)?;
    Ok(path.into_iter().next().expect("one lambda"))
}

const SATURATED_DEVIANCE: f64 = 1e-3;

/// Warm-started fits along a decreasing penalty path.
pub fn fit_lasso_path(x: &[Vec<f64>], y: &[f64], family: LassoFamily, lambdas: &[f64], params: &LassoParams) -> Result<Vec<LinearModel>> {
    let x = Matrix::from_rows(x)?;
    if x.rows != y.len() {
        return Err(Error::shape(format!("{} rows but {} targets", x.rows, y.len())));
    }
    if x.rows < 2 {
        return Err(Error::invalid("LASSO needs at least 2 training rows"));
    }
    check_lasso_target(y, family)?;
    if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::ConfigError("LASSO penalties must be finite and non-negative".into()));
    }
    let st = Standardizer::fit(&x);
    let xs = st.transform(&x);
    let problem = LassoProblem { x: &xs, y, constant: &st.constant, family, tol: params.tol, max_passes: params.max_passes };
    let n = x.rows as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut w = vec![0.0; x.cols];
    let mut b = match family {
        LassoFamily::Linear => y_mean,
        LassoFamily::Logistic => (y_mean / (1.0 - y_mean)).ln(),
    };
    let kind = match family {
        LassoFamily::Linear => ModelKind::LassoLinear,
        LassoFamily::Logistic => ModelKind::LassoLogistic,
    };
    let null_dev = binomial_deviance(&xs, y, &w, b);
    let mut out = Vec::with_capacity(lambdas.len());
    let mut saturated = false;
    for &lambda in lambdas {
        // Past a near-perfect fit the logistic path only inflates the weights,
        // so later penalties reuse the last model.
        if !saturated {
            problem.fit(lambda, &mut w, &mut b)?;
            saturated = family == LassoFamily::Logistic && binomial_deviance(&xs, y, &w, b) < SATURATED_DEVIANCE * null_dev;
        }
        out.push(LinearModel {
            kind,
            standardizer: st.clone(),
            weights: w.clone(),
            bias: b,
            target: None,
            lambda: Some(lambda),
        });
    }
    Ok(out)
}

/// Log-spaced grid from `lambda_max` down by `1 / lambda_min_ratio`.
pub fn lambda_grid(lambda_max: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![lambda_max];
    }
    let lmax = lambda_max.max(1e-12);
    (0..n).map(|i| lmax * min_ratio.powf(i as f64 / (n - 1) as f64)).collect()
}

/// LASSO with the penalty chosen by inner k-fold cross-validation over the grid
/// (mean squared error for the linear family, deviance for the logistic one).
/// Returns the model refitted on all rows and the chosen penalty.
pub fn train_lasso(x: &[Vec<f64>], y: &[f64], family: LassoFamily, params: &LassoParams, seed: u64) -> Result<(LinearModel, f64)> {
    check_lasso_target(y, family)?;
    let mut grid = match &params.lambda_grid {
        Some(g) if !g.is_empty() => g.clone(),
        _ => lambda_grid(lasso_lambda_max(x, y)?, params.n_lambda, params.lambda_min_ratio),
    };
    grid.sort_by(|a, b| b.total_cmp(a));

    let n = y.len();
    let strata: Option<Vec<usize>> = (family == LassoFamily::Logistic).then(|| y.iter().map(|&v| v as usize).collect());
    let min_class = match &strata {
        Some(s) => {
            let pos = s.iter().filter(|&&v| v == 1).count();
            pos.min(n - pos)
        }
        None => n,
    };
    let k = params.inner_folds.min(min_class).min(n);
    let chosen = if k < 2 || grid.len() == 1 {
        if grid.len() > 1 {
            warn!("too few rows for inner cross-validation; using the middle of the penalty grid");
        }
        grid[grid.len() / 2]
    } else {
        let plan = crate::eval::make_fold_plan(n, strata.as_deref(), k, 1, seed)?;
        let mut cv_loss = vec![0.0; grid.len()];
        for fold in &plan[0].folds {
            let train_idx: Vec<usize> = (0..n).filter(|i| fold.binary_search(i).is_err()).collect();
            let xt: Vec<Vec<f64>> = train_idx.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();
            let xv: Vec<Vec<f64>> = fold.iter().map(|&i| x[i].clone()).collect();
            let xv = Matrix::from_rows(&xv)?;
            let path = fit_lasso_path(&xt, &yt, family, &grid, params)?;
            for (loss, model) in cv_loss.iter_mut().zip(&path) {
                let pred = model.predict(&xv)?;
                for (p, &i) in pred.iter().zip(fold) {
                    *loss += match family {
                        LassoFamily::Linear => (p - y[i]).powi(2),
                        LassoFamily::Logistic => {
                            let p: f64 = p.clamp(1e-12, 1.0 - 1e-12);
                            -2.0 * (y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())
                        }
                    };
                }
            }
        }
        let mut best = 0;
        for (i, &l) in cv_loss.iter().enumerate() {
            if l < cv_loss[best] {
                best = i;
            }
        }
        grid[best]
    };
    let upto: Vec<f64> = grid.iter().copied().filter(|&l| l >= chosen).collect();
    let model = fit_lasso_path(x, y, family, &upto, params)?.pop().expect("nonempty path");
    Ok((model, chosen))
}

/// Linear scores `Xw + b`, or `sigmoid(Xw + b)` for the logistic family.
pub fn predict_lasso(model: &LinearModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    model.predict(&Matrix::from_rows(x)?)
}

/// `ln(x + 1)` elementwise; negative inputs are rejected.
pub fn log_transform_expression(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.is_finite() {
                Ok(v.ln_1p())
            } else {
                Err(Error::InvalidTarget(format!("expression value {v} is negative or non-finite")))
            }
        })
        .collect()
}
