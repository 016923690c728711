//! Lasso by cyclic coordinate descent, K-fold cross-validation, the
//! theoretical penalty level and the four-step active-set estimate.
//!
//! The objective is (1/2n)‖y − Xβ‖² + λ‖β‖₁ with no intercept: callers pass
//! standardized X and centered y.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{center, standardize, DesignMatrix, Standardization};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    /// Convergence threshold on the largest coefficient change in a sweep.
    pub tol: f64,
    /// Cap on full sweeps.
    pub max_iter: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig { tol: 1e-10, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub objective: f64,
    /// Indices j with β_j exactly nonzero.
    pub support: Vec<usize>,
    pub iterations: usize,
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn column(x: &DMatrix<f64>, j: usize) -> &[f64] {
    let n = x.nrows();
    &x.as_slice()[j * n..(j + 1) * n]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// (1/2n)‖y − Xβ‖² + λ‖β‖₁
pub fn lasso_objective(x: &DMatrix<f64>, y: &[f64], beta: &[f64], lambda: f64) -> f64 {
    let n = x.nrows() as f64;
    let r = residual(x, y, beta);
    dot(&r, &r) / (2.0 * n) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// y − Xβ
pub fn residual(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut r = y.to_vec();
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (ri, xi) in r.iter_mut().zip(column(x, j)) {
                *ri -= xi * b;
            }
        }
    }
    r
}

/// max_j |x_jᵀy|/n, the smallest λ with an all-zero solution.
pub fn lambda_max(x: &DMatrix<f64>, y: &[f64]) -> f64 {
    let n = x.nrows() as f64;
    (0..x.ncols()).map(|j| dot(column(x, j), y).abs() / n).fold(0.0, f64::max)
}

/// Coordinate descent on raw matrices; column norms need not equal n.
fn coordinate_descent(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    warm: Option<&[f64]>,
    cfg: &LassoConfig,
) -> Result<LassoFit> {
    let (n, p) = (x.nrows(), x.ncols());
    let nf = n as f64;
    let norms: Vec<f64> = (0..p).map(|j| dot(column(x, j), column(x, j)) / nf).collect();
    let mut beta = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; p]);
    for (b, &c) in beta.iter_mut().zip(&norms) {
        if c == 0.0 {
            *b = 0.0;
        }
    }
    let mut r = residual(x, y, &beta);

    let update = |j: usize, beta: &mut [f64], r: &mut [f64]| -> f64 {
        let c = norms[j];
        if c == 0.0 {
            return 0.0;
        }
        let col = column(x, j);
        let old = beta[j];
        let new = soft_threshold(dot(col, r) / nf + c * old, lambda) / c;
        let delta = new - old;
        if delta != 0.0 {
            for (ri, xi) in r.iter_mut().zip(col) {
                *ri -= xi * delta;
            }
            beta[j] = new;
        }
        delta.abs()
    };

    let mut sweeps = 0;
    let mut last_change = f64::INFINITY;
    while sweeps < cfg.max_iter {
        // full sweep, then cycle on the current support until it settles
        sweeps += 1;
        let mut change = 0.0_f64;
        for j in 0..p {
            change = change.max(update(j, &mut beta, &mut r));
        }
        last_change = change;
        if change < cfg.tol {
            let objective = lasso_objective(x, y, &beta, lambda);
            let support = (0..p).filter(|&j| beta[j] != 0.0).collect();
            return Ok(LassoFit { beta, lambda, objective, support, iterations: sweeps });
        }
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        while sweeps < cfg.max_iter {
            sweeps += 1;
            let mut change = 0.0_f64;
            for &j in &active {
                change = change.max(update(j, &mut beta, &mut r));
            }
            if change < cfg.tol {
                break;
            }
        }
    }
    Err(Error::NoConvergence { iterations: sweeps, max_change: last_change })
}

/// Lasso fit at a single λ.
pub fn fit_lasso(x: &DesignMatrix, y: &[f64], lambda: f64, cfg: &LassoConfig) -> Result<LassoFit> {
    fit_lasso_warm(x, y, lambda, None, cfg)
}

pub fn fit_lasso_warm(
    x: &DesignMatrix,
    y: &[f64],
    lambda: f64,
    warm: Option<&[f64]>,
    cfg: &LassoConfig,
) -> Result<LassoFit> {
    if y.len() != x.n() {
        return Err(Error::DimensionMismatch(format!("y has length {}, X has {} rows", y.len(), x.n())));
    }
    if let Some(w) = warm {
        if w.len() != x.p() {
            return Err(Error::DimensionMismatch(format!("warm start has length {}, X has {} columns", w.len(), x.p())));
        }
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    coordinate_descent(x.values(), y, lambda, warm, cfg)
}

/// Penalty level 2σ√((2/n)(1 + log(p/δ))).
pub fn lambda_bound(sigma: f64, n: usize, p: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("sigma must be finite and nonnegative, got {sigma}")));
    }
    if n == 0 || p == 0 {
        return Err(Error::InvalidConfig("n and p must be positive".into()));
    }
    Ok(2.0 * sigma * ((2.0 / n as f64) * (1.0 + (p as f64 / delta).ln())).sqrt())
}

/// 100 log-spaced values from λ_max down to 10⁻⁴·λ_max.
pub fn default_lambda_grid(lambda_max: f64) -> Vec<f64> {
    let len = 100;
    let ratio: f64 = 1e-4;
    (0..len).map(|i| lambda_max * ratio.powf(i as f64 / (len - 1) as f64)).collect()
}

/// Fold label of each observation: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut label = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        label[i] = pos % folds;
    }
    label
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_mse: f64,
    pub fold_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_cv: f64,
    pub beta_cv: Vec<f64>,
    pub cv_errors: Vec<CvPoint>,
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Validation MSE of every λ in `grid` for one train/validation split.
/// The training block is restandardized and its response recentered; the
/// validation block is mapped with the training factors.
pub fn fold_errors(
    x: &DMatrix<f64>,
    y: &[f64],
    train: &[usize],
    valid: &[usize],
    grid: &[f64],
    cfg: &LassoConfig,
) -> Result<Vec<f64>> {
    let xt_raw = select_rows(x, train);
    let factors = Standardization::fit_lenient(&xt_raw);
    let xt = factors.apply(&xt_raw);
    let xv = factors.apply(&select_rows(x, valid));
    let yt_raw: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let (yt, ymean) = center(&yt_raw);
    let yv: Vec<f64> = valid.iter().map(|&i| y[i]).collect();

    let mut warm: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let fit = coordinate_descent(&xt, &yt, lambda, warm.as_deref(), cfg)?;
        let r = residual(&xv, &yv.iter().map(|v| v - ymean).collect::<Vec<_>>(), &fit.beta);
        out.push(dot(&r, &r) / valid.len() as f64);
        warm = Some(fit.beta);
    }
    Ok(out)
}

/// K-fold cross-validation over a λ grid (descending order is used as given;
/// `None` selects the default grid). Picks the minimum mean validation MSE,
/// breaking ties toward the larger λ, then refits on all observations.
pub fn cross_validate(
    x: &DesignMatrix,
    y: &[f64],
    folds: usize,
    grid: Option<&[f64]>,
    seed: u64,
    cfg: &LassoConfig,
) -> Result<CvResult> {
    let n = x.n();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("y has length {}, X has {n} rows", y.len())));
    }
    if folds < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {folds}")));
    }
    let default_grid;
    let grid = match grid {
        Some(g) if !g.is_empty() => g,
        Some(_) => return Err(Error::InvalidConfig("lambda grid is empty".into())),
        None => {
            let lmax = lambda_max(x.values(), y);
            if lmax == 0.0 {
                return Err(Error::EmptySignal);
            }
            default_grid = default_lambda_grid(lmax);
            &default_grid
        }
    };

    let labels = fold_assignment(n, folds, seed);
    let mut per_fold: Vec<Vec<f64>> = Vec::with_capacity(folds);
    for f in 0..folds {
        let valid: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
        if valid.len() < 2 || train.len() < 2 {
            return Err(Error::DegenerateFold { fold: f, size: valid.len().min(train.len()) });
        }
        per_fold.push(fold_errors(x.values(), y, &train, &valid, grid, cfg)?);
    }

    let cv_errors: Vec<CvPoint> = grid
        .iter()
        .enumerate()
        .map(|(g, &lambda)| {
            let fold_mse: Vec<f64> = per_fold.iter().map(|e| e[g]).collect();
            CvPoint { lambda, mean_mse: fold_mse.iter().sum::<f64>() / folds as f64, fold_mse }
        })
        .collect();
    let mut best = 0;
    for (g, pt) in cv_errors.iter().enumerate() {
        let cur = &cv_errors[best];
        if pt.mean_mse < cur.mean_mse || (pt.mean_mse == cur.mean_mse && pt.lambda > cur.lambda) {
            best = g;
        }
    }
    let lambda_cv = cv_errors[best].lambda;

    // refit along the grid down to λ_cv so the warm starts match the folds
    let mut warm: Option<Vec<f64>> = None;
    let mut beta_cv = vec![0.0; x.p()];
    let mut path: Vec<f64> = grid.iter().copied().filter(|&l| l >= lambda_cv).collect();
    if path.is_empty() || *path.last().unwrap() != lambda_cv {
        path.push(lambda_cv);
    }
    for lambda in path {
        let fit = coordinate_descent(x.values(), y, lambda, warm.as_deref(), cfg)?;
        beta_cv = fit.beta.clone();
        warm = Some(fit.beta);
    }
    Ok(CvResult { lambda_cv, beta_cv, cv_errors })
}

/// ‖y − Xβ‖² / (n − s_cv − 1).
pub fn sigma_sq_unbiased(x: &DesignMatrix, y: &[f64], beta: &[f64], s_cv: usize) -> Result<f64> {
    let n = x.n();
    if n < s_cv + 2 {
        return Err(Error::DegreesOfFreedomExhausted { n, s_cv });
    }
    let r = residual(x.values(), y, beta);
    Ok(dot(&r, &r) / (n - s_cv - 1) as f64)
}

/// Everything produced by [`estimate_active_set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSetEstimate {
    /// 0-based indices of the refit's nonzero coefficients.
    pub s_hat: Vec<usize>,
    pub sigma_sq_hat: f64,
    pub lambda_cv: f64,
    pub lambda_train: f64,
    pub s_cv: usize,
    pub beta_cv: Vec<f64>,
    pub beta_train: Vec<f64>,
}

/// Cross-validated λ, unbiased σ̂², the penalty level from σ̂, and the support
/// of the refit at that level. X is standardized and y centered first.
pub fn estimate_active_set(
    x: &DesignMatrix,
    y: &[f64],
    delta: f64,
    folds: usize,
    seed: u64,
    cfg: &LassoConfig,
) -> Result<ActiveSetEstimate> {
    if y.len() != x.n() {
        return Err(Error::DimensionMismatch(format!("y has length {}, X has {} rows", y.len(), x.n())));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    let (xs, _) = standardize(x)?;
    let (yc, _) = center(y);
    if lambda_max(xs.values(), &yc) == 0.0 {
        return Err(Error::EmptySignal);
    }

    let cv = cross_validate(&xs, &yc, folds, None, seed, cfg)?;
    let s_cv = cv.beta_cv.iter().filter(|&&b| b != 0.0).count();
    let sigma_sq_hat = sigma_sq_unbiased(&xs, &yc, &cv.beta_cv, s_cv)?;
    if sigma_sq_hat == 0.0 {
        return Err(Error::ZeroNoiseEstimate);
    }
    let lambda_train = lambda_bound(sigma_sq_hat.sqrt(), xs.n(), xs.p(), delta)?;
    let fit = fit_lasso(&xs, &yc, lambda_train, cfg)?;
    Ok(ActiveSetEstimate {
        s_hat: fit.support,
        sigma_sq_hat,
        lambda_cv: cv.lambda_cv,
        lambda_train,
        s_cv,
        beta_cv: cv.beta_cv,
        beta_train: fit.beta,
    })
}

/// (1/n)‖X(β̂ − β)‖²
pub fn prediction_mse(x: &DesignMatrix, beta_hat: &[f64], beta: &[f64]) -> f64 {
    let diff: Vec<f64> = beta_hat.iter().zip(beta).map(|(a, b)| a - b).collect();
    let zero = vec![0.0; x.n()];
    let r = residual(x.values(), &zero, &diff);
    dot(&r, &r) / x.n() as f64
}
