//! Dense convex QP solver for
//!
//! ```text
//! minimize    ½ xᵀPx + qᵀx
//! subject to  l ≤ Ax ≤ u
//! ```
//!
//! The iteration is operator splitting with over-relaxation (the OSQP
//! scheme): one factorization of `P + σI + Aᵀdiag(ρ)A` is reused until the
//! penalty is rescaled. Because the callers take minima over many QPs, each
//! solve is pushed to tight tolerances; that is done by a polish step which
//! guesses the active set from the dual iterate and solves the resulting
//! equality-constrained problem directly (see [`polish`]).

mod csr;
mod polish;

pub use csr::CsrMatrix;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds at or beyond this magnitude are treated as infinite.
pub const INFINITY_BOUND: f64 = 1e30;

const RHO_EQ_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;

/// minimize ½xᵀPx + qᵀx subject to l ≤ Ax ≤ u.
#[derive(Debug, Clone)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: Vec<f64>,
    a: CsrMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
}

impl QpProblem {
    /// Infinite bounds may be passed as `f64::INFINITY`; they are stored as
    /// the ±1e30 sentinel.
    pub fn new(p: DMatrix<f64>, q: Vec<f64>, a: CsrMatrix, l: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        let m = q.len();
        if p.nrows() != m || p.ncols() != m {
            return Err(Error::DimensionMismatch(format!("P is {}x{}, q has {m}", p.nrows(), p.ncols())));
        }
        if a.ncols() != m {
            return Err(Error::DimensionMismatch(format!("A has {} columns, expected {m}", a.ncols())));
        }
        let k = a.nrows();
        if l.len() != k || u.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "bounds have lengths {} and {}, expected {k}",
                l.len(),
                u.len()
            )));
        }
        if p.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let scale = p.amax().max(1.0);
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let clamp = |v: f64| v.clamp(-INFINITY_BOUND, INFINITY_BOUND);
        let l: Vec<f64> = l.into_iter().map(clamp).collect();
        let u: Vec<f64> = u.into_iter().map(clamp).collect();
        if l.iter().chain(u.iter()).any(|v| v.is_nan()) {
            return Err(Error::NonFiniteInput);
        }
        if let Some(i) = (0..k).find(|&i| l[i] > u[i]) {
            return Err(Error::DimensionMismatch(format!("row {i} has l > u")));
        }
        Ok(QpProblem { p, q, a, l, u })
    }

    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.a.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn a(&self) -> &CsrMatrix {
        &self.a
    }

    pub fn l(&self) -> &[f64] {
        &self.l
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        0.5 * crate::model::quad_form(&self.p, x) + dot(&self.q, x)
    }

    fn is_lower_finite(&self, i: usize) -> bool {
        self.l[i] > -INFINITY_BOUND
    }

    fn is_upper_finite(&self, i: usize) -> bool {
        self.u[i] < INFINITY_BOUND
    }

    fn is_equality(&self, i: usize) -> bool {
        self.l[i] == self.u[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Constraint multipliers; negative at active lower bounds, positive at
    /// active upper bounds.
    pub y: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
}

/// Solver settings. Defaults follow the needs of the compatibility solvers:
/// tight tolerances, a generous iteration cap and polishing on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho_interval: usize,
    pub check_interval: usize,
    pub polish: bool,
    /// Relative residual level at which the first polish is attempted;
    /// divided by ten after every failed attempt.
    pub polish_trigger: f64,
    /// Log per-check residuals at debug level.
    pub debug: bool,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            eps_abs: 1e-9,
            eps_rel: 1e-9,
            eps_prim_inf: 1e-8,
            max_iter: 200_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho_interval: 50,
            check_interval: 10,
            polish: true,
            polish_trigger: 1e-3,
            debug: false,
        }
    }
}

/// Residuals of the KKT conditions at (x, y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// ‖Ax − Π[l,u](Ax)‖∞
    pub primal: f64,
    /// ‖Px + q + Aᵀy‖∞
    pub dual: f64,
    /// Largest distance to the bound on rows whose multiplier is nonzero
    /// (y > 0 needs the upper bound active, y < 0 the lower).
    pub complementarity: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
}

impl KktResiduals {
    pub fn within_tolerance(&self) -> bool {
        self.primal <= self.eps_primal
            && self.dual <= self.eps_dual
            && self.complementarity <= self.eps_primal
    }
}

pub fn kkt_residuals(prob: &QpProblem, x: &[f64], y: &[f64], tol: &ToleranceConfig) -> KktResiduals {
    let (m, k) = (prob.n_vars(), prob.n_constraints());
    let mut ax = vec![0.0; k];
    prob.a.mul_vec(x, &mut ax);
    let mut aty = vec![0.0; m];
    prob.a.tr_mul_vec(y, &mut aty);
    let px = mat_vec(&prob.p, x);

    let mut primal = 0.0_f64;
    let mut compl = 0.0_f64;
    // multipliers below this are numerically zero
    let y_floor = tol.eps_abs.max(1e-12);
    for i in 0..k {
        let proj = ax[i].clamp(prob.l[i], prob.u[i]);
        primal = primal.max((ax[i] - proj).abs());
        if y[i] > y_floor {
            compl = compl.max((prob.u[i] - ax[i]).max(0.0));
        } else if y[i] < -y_floor {
            compl = compl.max((ax[i] - prob.l[i]).max(0.0));
        }
    }
    let dual = (0..m).map(|j| (px[j] + prob.q[j] + aty[j]).abs()).fold(0.0, f64::max);
    let eps_primal = tol.eps_abs + tol.eps_rel * inf_norm(&ax);
    let eps_dual = tol.eps_abs + tol.eps_rel * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q));
    KktResiduals { primal, dual, complementarity: compl, eps_primal, eps_dual }
}

struct Factorization {
    chol: Cholesky<f64, Dyn>,
    rho: Vec<f64>,
}

fn rho_vector(prob: &QpProblem, rho: f64) -> Vec<f64> {
    (0..prob.n_constraints())
        .map(|i| {
            if prob.is_equality(i) {
                RHO_EQ_SCALE * rho
            } else if !prob.is_lower_finite(i) && !prob.is_upper_finite(i) {
                RHO_MIN
            } else {
                rho
            }
        })
        .collect()
}

fn factorize(prob: &QpProblem, sigma: f64, rho: f64) -> Result<Factorization> {
    let m = prob.n_vars();
    let rho_vec = rho_vector(prob, rho);
    let mut kkt = prob.p.clone();
    for j in 0..m {
        kkt[(j, j)] += sigma;
    }
    for (i, &r) in rho_vec.iter().enumerate() {
        let entries: Vec<(usize, f64)> = prob.a.row(i).collect();
        for &(a, va) in &entries {
            for &(b, vb) in &entries {
                kkt[(a, b)] += r * va * vb;
            }
        }
    }
    let chol = Cholesky::new(kkt)
        .ok_or_else(|| Error::NumericalBreakdown("KKT matrix is not positive definite; is P PSD?".into()))?;
    Ok(Factorization { chol, rho: rho_vec })
}

/// Solves the QP from an optional primal warm start.
pub fn solve_qp(prob: &QpProblem, warm: Option<&[f64]>, tol: &ToleranceConfig) -> Result<QpSolution> {
    let (m, k) = (prob.n_vars(), prob.n_constraints());
    if let Some(w) = warm {
        if w.len() != m {
            return Err(Error::DimensionMismatch(format!("warm start has length {}, expected {m}", w.len())));
        }
    }
    if !(tol.alpha > 0.0 && tol.alpha < 2.0) || tol.rho <= 0.0 || tol.sigma <= 0.0 || tol.check_interval == 0 {
        return Err(Error::InvalidConfig("alpha must lie in (0, 2); rho, sigma and check_interval must be positive".into()));
    }

    let mut rho = tol.rho;
    let mut fac = factorize(prob, tol.sigma, rho)?;

    let mut x: Vec<f64> = warm.map(|w| w.to_vec()).unwrap_or_else(|| vec![0.0; m]);
    let mut z = vec![0.0; k];
    prob.a.mul_vec(&x, &mut z);
    for i in 0..k {
        z[i] = z[i].clamp(prob.l[i], prob.u[i]);
    }
    let mut y = vec![0.0; k];
    let mut dy = vec![0.0; k];

    let mut w = vec![0.0; k];
    let mut atw = vec![0.0; m];
    let mut rhs = DVector::<f64>::zeros(m);
    let mut zt = vec![0.0; k];
    let mut ax = vec![0.0; k];
    let mut aty = vec![0.0; m];

    let mut polish_level = tol.polish_trigger;
    let mut last = None;

    for it in 1..=tol.max_iter {
        for i in 0..k {
            w[i] = fac.rho[i] * z[i] - y[i];
        }
        prob.a.tr_mul_vec(&w, &mut atw);
        for j in 0..m {
            rhs[j] = tol.sigma * x[j] - prob.q[j] + atw[j];
        }
        fac.chol.solve_mut(&mut rhs);
        prob.a.mul_vec(rhs.as_slice(), &mut zt);
        for j in 0..m {
            x[j] = tol.alpha * rhs[j] + (1.0 - tol.alpha) * x[j];
        }
        for i in 0..k {
            let zhat = tol.alpha * zt[i] + (1.0 - tol.alpha) * z[i];
            let znew = (zhat + y[i] / fac.rho[i]).clamp(prob.l[i], prob.u[i]);
            dy[i] = fac.rho[i] * (zhat - znew);
            y[i] += dy[i];
            z[i] = znew;
        }

        if it % tol.check_interval != 0 && it != tol.max_iter {
            continue;
        }

        prob.a.mul_vec(&x, &mut ax);
        prob.a.tr_mul_vec(&y, &mut aty);
        let px = mat_vec(&prob.p, &x);
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalBreakdown(format!("non-finite iterate at iteration {it}")));
        }
        let r_prim = (0..k).map(|i| (ax[i] - z[i]).abs()).fold(0.0, f64::max);
        let r_dual = (0..m).map(|j| (px[j] + prob.q[j] + aty[j]).abs()).fold(0.0, f64::max);
        let scale_p = inf_norm(&ax).max(inf_norm(&z));
        let scale_d = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.q));
        let eps_p = tol.eps_abs + tol.eps_rel * scale_p;
        let eps_d = tol.eps_abs + tol.eps_rel * scale_d;
        if tol.debug {
            log::debug!("qp iter {it}: r_prim {r_prim:.3e} r_dual {r_dual:.3e} rho {rho:.3e}");
        }

        if r_prim <= eps_p && r_dual <= eps_d {
            let admm = finish(prob, &x, &y, QpStatus::Solved, it, false, tol);
            if tol.polish {
                if let Some(pol) = try_polish(prob, &z, &y, it, tol) {
                    if pol.objective <= admm.objective + eps_d.max(1e-12) {
                        return Ok(pol);
                    }
                }
            }
            return Ok(admm);
        }

        if tol.polish && r_prim <= polish_level * (1.0 + scale_p) && r_dual <= polish_level * (1.0 + scale_d) {
            if let Some(pol) = try_polish(prob, &z, &y, it, tol) {
                return Ok(pol);
            }
            polish_level = (polish_level * 0.1).max(tol.eps_abs.min(tol.eps_rel));
        }

        if primal_infeasible(prob, &dy, tol.eps_prim_inf) {
            let sol = finish(prob, &x, &y, QpStatus::PrimalInfeasible, it, false, tol);
            return Ok(QpSolution { y: dy.clone(), ..sol });
        }

        if tol.adaptive_rho_interval > 0 && it % tol.adaptive_rho_interval == 0 {
            // residuals measured against their own tolerances, so that a problem
            // whose optimal value and multipliers vanish does not starve rho
            let num = r_prim / eps_p;
            let den = (r_dual / eps_d).max(1e-12);
            let new_rho = (rho * (num / den).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if new_rho.is_finite() && (new_rho > 5.0 * rho || new_rho < rho / 5.0) {
                rho = new_rho;
                fac = factorize(prob, tol.sigma, rho)?;
            }
        }
        last = Some(it);
    }

    let iterations = last.unwrap_or(tol.max_iter);
    if tol.polish {
        if let Some(pol) = try_polish(prob, &z, &y, iterations, tol) {
            return Ok(pol);
        }
    }
    Ok(finish(prob, &x, &y, QpStatus::MaxIterations, iterations, false, tol))
}

fn try_polish(
    prob: &QpProblem,
    z: &[f64],
    y: &[f64],
    iterations: usize,
    tol: &ToleranceConfig,
) -> Option<QpSolution> {
    let (xp, yp) = polish::polish(prob, z, y)?;
    let res = kkt_residuals(prob, &xp, &yp, tol);
    if tol.debug {
        log::debug!(
            "polish at iter {iterations}: prim {:.3e} dual {:.3e} compl {:.3e}",
            res.primal,
            res.dual,
            res.complementarity
        );
    }
    if !res.within_tolerance() {
        return None;
    }
    Some(finish(prob, &xp, &yp, QpStatus::Solved, iterations, true, tol))
}

fn finish(
    prob: &QpProblem,
    x: &[f64],
    y: &[f64],
    status: QpStatus,
    iterations: usize,
    polished: bool,
    tol: &ToleranceConfig,
) -> QpSolution {
    let res = kkt_residuals(prob, x, y, tol);
    if status == QpStatus::Solved {
        debug_assert!(
            res.primal <= res.eps_primal && res.dual <= res.eps_dual,
            "KKT check failed on a solved QP: {res:?}"
        );
    }
    QpSolution {
        x: x.to_vec(),
        y: y.to_vec(),
        objective: prob.objective(x),
        primal_residual: res.primal,
        dual_residual: res.dual,
        status,
        iterations,
        polished,
    }
}

/// Certificate test on the dual increment: Aᵀδy ≈ 0 while the support
/// function of [l, u] at δy is negative.
fn primal_infeasible(prob: &QpProblem, dy: &[f64], eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm <= 1e-30 {
        return false;
    }
    let mut atdy = vec![0.0; prob.n_vars()];
    prob.a.tr_mul_vec(dy, &mut atdy);
    if inf_norm(&atdy) > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for (i, &d) in dy.iter().enumerate() {
        if d > 0.0 {
            if !prob.is_upper_finite(i) {
                return false;
            }
            support += prob.u[i] * d;
        } else if d < 0.0 {
            if !prob.is_lower_finite(i) {
                return false;
            }
            support += prob.l[i] * d;
        }
    }
    support < -eps * norm
}

pub(crate) fn mat_vec(p: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut out = vec![0.0; m];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = p.column(j);
        for i in 0..m {
            out[i] += col[i] * xj;
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
