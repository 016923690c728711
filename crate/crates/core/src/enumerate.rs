//! Exact φ² by enumerating sign patterns on the support.
//!
//! With the signs z of v_S fixed, ‖v_S‖₁ = 1 becomes the linear constraint
//! Σ z_j v_j = 1 together with z_j v_j ≥ 0, and the problem is a convex QP.
//! φ² is the minimum over all patterns; since z and −z give the same value
//! only the 2^(s−1) patterns with z₀ = +1 are solved.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    feasibility_violation, ActiveSet, CompatResult, CompatStatus, GramMatrix, SignPattern, CONE_RADIUS,
    ZERO_THRESHOLD,
};
use crate::qp::{solve_qp, CsrMatrix, QpProblem, QpStatus, ToleranceConfig};

/// Largest support size the enumeration accepts.
pub const S_MAX: usize = 20;

/// One fixed-sign subproblem.
#[derive(Debug, Clone, Copy)]
pub struct FixedSignSubproblem<'a> {
    pub gram: &'a GramMatrix,
    pub active: &'a ActiveSet,
    pub signs: &'a SignPattern,
}

impl FixedSignSubproblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.signs.len() != self.active.s() {
            return Err(Error::InvalidSignPattern(format!(
                "pattern has length {}, active set has size {}",
                self.signs.len(),
                self.active.s()
            )));
        }
        if self.gram.p() != self.active.p() {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrix is {0}x{0}, active set is over p = {1}",
                self.gram.p(),
                self.active.p()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnumConfig {
    pub threads: usize,
    /// Stop as soon as some pattern gives φ² below the zero threshold.
    pub early_stop: bool,
    pub s_max: usize,
    pub tol: ToleranceConfig,
}

impl Default for EnumConfig {
    fn default() -> Self {
        EnumConfig { threads: 1, early_stop: false, s_max: S_MAX, tol: ToleranceConfig::default() }
    }
}

/// Builds the QP over x = (v, u) with u ∈ ℝ^(p−s) bounding |v| off the support.
///
/// Rows, in order: Σ z_j v_j = 1; z_j v_j ≥ 0 for j ∈ S; then for each
/// j ∈ S^c the pair v_j + u_j ≥ 0 and u_j − v_j ≥ 0; u ≥ 0; Σ u ≤ 3. The last
/// two groups are absent when S^c is empty.
pub fn build_fixed_sign_qp(sub: &FixedSignSubproblem<'_>) -> Result<QpProblem> {
    sub.validate()?;
    let p = sub.gram.p();
    let s = sub.active.s();
    let comp = sub.active.complement();
    let r = comp.len();
    let m = p + r;

    let mut pmat = DMatrix::<f64>::zeros(m, m);
    pmat.view_mut((0, 0), (p, p)).copy_from(&(sub.gram.values() * (2.0 * s as f64)));

    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(2 + s + 3 * r);
    let mut l = Vec::new();
    let mut u = Vec::new();
    let z = sub.signs.signs();

    rows.push(sub.active.indices().iter().zip(z).map(|(&j, &zj)| (j, zj as f64)).collect());
    l.push(1.0);
    u.push(1.0);
    for (&j, &zj) in sub.active.indices().iter().zip(z) {
        rows.push(vec![(j, zj as f64)]);
        l.push(0.0);
        u.push(f64::INFINITY);
    }
    for (t, &j) in comp.iter().enumerate() {
        rows.push(vec![(j, 1.0), (p + t, 1.0)]);
        rows.push(vec![(j, -1.0), (p + t, 1.0)]);
        l.extend([0.0, 0.0]);
        u.extend([f64::INFINITY, f64::INFINITY]);
    }
    if r > 0 {
        for t in 0..r {
            rows.push(vec![(p + t, 1.0)]);
            l.push(0.0);
            u.push(f64::INFINITY);
        }
        rows.push((0..r).map(|t| (p + t, 1.0)).collect());
        l.push(f64::NEG_INFINITY);
        u.push(CONE_RADIUS);
    }

    QpProblem::new(pmat, vec![0.0; m], CsrMatrix::from_rows(m, rows), l, u)
}

/// φ²_z and its minimizer v ∈ ℝ^p for one sign pattern.
pub fn phi_for_pattern(sub: &FixedSignSubproblem<'_>, tol: &ToleranceConfig) -> Result<(f64, Vec<f64>)> {
    phi_for_pattern_warm(sub, None, tol)
}

pub(crate) fn phi_for_pattern_warm(
    sub: &FixedSignSubproblem<'_>,
    warm: Option<&[f64]>,
    tol: &ToleranceConfig,
) -> Result<(f64, Vec<f64>)> {
    let prob = build_fixed_sign_qp(sub)?;
    let sol = solve_qp(&prob, warm, tol)?;
    if sol.status != QpStatus::Solved {
        return Err(Error::SolverFailure(format!(
            "fixed-sign QP ended with status {:?} after {} iterations (primal residual {:.2e}, dual residual {:.2e})",
            sol.status, sol.iterations, sol.primal_residual, sol.dual_residual
        )));
    }
    let p = sub.gram.p();
    let v = sol.x[..p].to_vec();
    debug_assert!(
        feasibility_violation(&v, sub.active) <= 1e-6,
        "fixed-sign minimizer infeasible by {}",
        feasibility_violation(&v, sub.active)
    );
    let phi_sq = (sub.active.s() as f64 * sub.gram.quad_form(&v)).max(0.0);
    Ok((phi_sq, v))
}

/// Exact φ² as the minimum over all canonical sign patterns.
pub fn phi_enumerate(gram: &GramMatrix, active: &ActiveSet, cfg: &EnumConfig) -> Result<CompatResult> {
    let start = Instant::now();
    let s = active.s();
    if s > cfg.s_max || s > 63 {
        return Err(Error::ActiveSetTooLarge { s, max: cfg.s_max.min(63) });
    }
    if cfg.threads == 0 {
        return Err(Error::InvalidConfig("threads must be at least 1".into()));
    }
    if gram.p() != active.p() {
        return Err(Error::DimensionMismatch(format!(
            "Gram matrix is {0}x{0}, active set is over p = {1}",
            gram.p(),
            active.p()
        )));
    }

    let count = SignPattern::canonical_count(s);
    let stop = std::sync::atomic::AtomicBool::new(false);
    let solve = |k: u64| -> Option<Result<(f64, Vec<f64>)>> {
        if cfg.early_stop && stop.load(std::sync::atomic::Ordering::Relaxed) {
            return None;
        }
        let signs = SignPattern::canonical(s, k);
        let out = phi_for_pattern(&FixedSignSubproblem { gram, active, signs: &signs }, &cfg.tol);
        if let Ok((v, _)) = &out {
            if *v < ZERO_THRESHOLD {
                stop.store(true, std::sync::atomic::Ordering::Relaxed);
            }
        }
        Some(out)
    };

    let results: Vec<Option<Result<(f64, Vec<f64>)>>> = if cfg.threads == 1 {
        let mut out = Vec::with_capacity(count as usize);
        for k in 0..count {
            out.push(solve(k));
        }
        out
    } else {
        // contiguous blocks, one per worker
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let chunk = count.div_ceil(cfg.threads as u64).max(1);
        let blocks: Vec<Vec<Option<Result<(f64, Vec<f64>)>>>> = pool.install(|| {
            (0..cfg.threads as u64)
                .into_par_iter()
                .map(|w| (w * chunk..((w + 1) * chunk).min(count)).map(solve).collect())
                .collect()
        });
        blocks.into_iter().flatten().collect()
    };

    let mut best: Option<(f64, Vec<f64>, u64)> = None;
    let mut solved = 0;
    for (k, r) in results.into_iter().enumerate() {
        let Some(r) = r else { continue };
        let (val, v) = r?;
        solved += 1;
        // strict comparison keeps the lexicographically smallest pattern on ties
        if best.as_ref().map_or(true, |b| val < b.0) {
            best = Some((val, v, k as u64));
        }
    }
    let (phi_sq, minimizer, k) = best.ok_or_else(|| Error::SolverFailure("no pattern was solved".into()))?;
    let zero = phi_sq < ZERO_THRESHOLD;
    let status = if zero { CompatStatus::ZeroDetected } else { CompatStatus::Optimal };
    Ok(CompatResult {
        phi_sq,
        phi: if zero { 0.0 } else { phi_sq.sqrt() },
        minimizer,
        status,
        lower_bound: if zero && cfg.early_stop && solved < count as usize { 0.0 } else { phi_sq },
        wall_time: start.elapsed().as_secs_f64(),
        subproblems_solved: solved,
        pattern: Some(SignPattern::canonical(s, k)),
    })
}
