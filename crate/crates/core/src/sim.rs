//! Monte Carlo harness: compound-symmetry data, per-cell evaluation of φ,
//! MSE and the error bound, grids of cells, and the growing-prefix φ_n curve.
//!
//! Seeds: every (n, p, ρ, replication) cell draws from its own ChaCha8 stream
//! seeded by [`cell_seed`], so any subset of a grid can be re-run alone and
//! the result set does not depend on scheduling.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnb::{phi_bnb, BnbConfig};
use crate::enumerate::{phi_enumerate, EnumConfig};
use crate::error::{Error, Result};
use crate::lasso::{fit_lasso, lambda_bound, prediction_mse, LassoConfig};
use crate::model::{center, standardize, ActiveSet, CompatResult, CompatStatus, DesignMatrix, GramMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverChoice {
    Enum,
    Bnb(BnbConfig),
}

impl SolverChoice {
    pub fn solve(&self, gram: &GramMatrix, active: &ActiveSet) -> Result<CompatResult> {
        match self {
            SolverChoice::Enum => phi_enumerate(gram, active, &EnumConfig::default()),
            SolverChoice::Bnb(cfg) => Ok(phi_bnb(gram, active, cfg)?.result),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_grid: Vec<usize>,
    pub p_grid: Vec<usize>,
    pub rho_grid: Vec<f64>,
    pub s: usize,
    pub coef_low: f64,
    pub coef_high: f64,
    pub snr: f64,
    pub delta: f64,
    pub replications: usize,
    pub seed: u64,
    pub solver: SolverChoice,
    pub threads: usize,
    /// When false the wall_time column is written as 0 so that repeated runs
    /// produce byte-identical output.
    pub record_wall_time: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::desk_grid()
    }
}

impl SimConfig {
    /// Desk-scale grid: p ≤ 200 and n ≤ 1000.
    pub fn desk_grid() -> Self {
        SimConfig {
            n_grid: vec![100, 200, 500, 1000],
            p_grid: vec![20, 50, 200],
            rho_grid: vec![0.0, 0.4, 0.8],
            s: 5,
            coef_low: 1.0,
            coef_high: 2.0,
            snr: 1.0,
            delta: 0.1,
            replications: 10,
            seed: 0,
            solver: SolverChoice::Enum,
            threads: 1,
            record_wall_time: true,
        }
    }

    /// The full published grid. The largest cells take hours with dense
    /// linear algebra.
    pub fn paper_grid() -> Self {
        SimConfig {
            n_grid: vec![100, 200, 300, 400, 500, 750, 1000, 1500, 2000],
            p_grid: vec![20, 50, 100, 200, 500, 1000, 2000, 5000],
            ..Self::desk_grid()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_grid.is_empty() || self.p_grid.is_empty() || self.rho_grid.is_empty() {
            return bad("grids must be nonempty".into());
        }
        if !(self.coef_low <= self.coef_high) {
            return bad(format!("coef_low {} exceeds coef_high {}", self.coef_low, self.coef_high));
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidDelta(self.delta));
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if let Some(rho) = self.rho_grid.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("rho must lie in [0, 1), got {rho}"));
        }
        if let Some(p) = self.p_grid.iter().find(|&&p| p < self.s || self.s == 0) {
            return bad(format!("s = {} does not fit p = {p}", self.s));
        }
        if self.n_grid.iter().any(|&n| n < 2) {
            return bad("every n must be at least 2".into());
        }
        if self.solver == SolverChoice::Enum && self.s > crate::enumerate::S_MAX {
            return Err(Error::ActiveSetTooLarge { s: self.s, max: crate::enumerate::S_MAX });
        }
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.n_grid.len() * self.p_grid.len() * self.rho_grid.len() * self.replications
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one cell: SplitMix64 folded over (master, n, p, bits of ρ,
/// replication), h ← splitmix64(h ⊕ splitmix64(k)) for each key k.
pub fn cell_seed(master: u64, n: usize, p: usize, rho: f64, replication: usize) -> u64 {
    [n as u64, p as u64, rho.to_bits(), replication as u64]
        .into_iter()
        .fold(splitmix64(master), |h, k| splitmix64(h ^ splitmix64(k)))
}

/// One simulated data set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    /// Standardized design.
    pub x: DesignMatrix,
    /// Centered response.
    pub y: Vec<f64>,
    pub beta: Vec<f64>,
    pub support: ActiveSet,
    pub sigma_sq: f64,
}

/// Rows x = √(1−ρ)ξ + √ρ·η·1 with ξ ~ N(0, I), η ~ N(0, 1) have covariance
/// Σ_ρ. The design is standardized, S is drawn uniformly, β_S ~ Unif(low,
/// high), σ² = βᵀΣ_ρβ/snr, and y = Xβ + ε is centered.
pub fn gen_compound_data(
    n: usize,
    p: usize,
    rho: f64,
    s: usize,
    coef_range: (f64, f64),
    snr: f64,
    seed: u64,
) -> Result<SimData> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidConfig(format!("rho must lie in [0, 1), got {rho}")));
    }
    if s == 0 || s > p {
        return Err(Error::InvalidS { s, p, reason: "need 1 <= s <= p".into() });
    }
    if !(snr > 0.0) || !(coef_range.0 <= coef_range.1) {
        return Err(Error::InvalidConfig("need snr > 0 and coef_low <= coef_high".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = ((1.0 - rho).sqrt(), rho.sqrt());
    let mut raw = DMatrix::<f64>::zeros(n, p);
    for i in 0..n {
        let eta: f64 = rng.sample(StandardNormal);
        for j in 0..p {
            let xi: f64 = rng.sample(StandardNormal);
            raw[(i, j)] = a * xi + b * eta;
        }
    }
    let (x, _) = standardize(&DesignMatrix::new(raw)?)?;

    let support = ActiveSet::new(index::sample(&mut rng, p, s).into_vec(), p)?;
    let mut beta = vec![0.0; p];
    for &j in support.indices() {
        beta[j] = if coef_range.0 == coef_range.1 { coef_range.0 } else { rng.gen_range(coef_range.0..coef_range.1) };
    }
    let sigma_sq = population_signal(&beta, rho) / snr;
    let sigma = sigma_sq.sqrt();
    let xb = x.values() * nalgebra::DVector::from_column_slice(&beta);
    let y_raw: Vec<f64> = xb
        .iter()
        .map(|v| {
            let e: f64 = rng.sample(StandardNormal);
            v + sigma * e
        })
        .collect();
    let (y, _) = center(&y_raw);
    Ok(SimData { x, y, beta, support, sigma_sq })
}

/// βᵀΣ_ρβ = (1−ρ)‖β‖² + ρ(1ᵀβ)²
pub fn population_signal(beta: &[f64], rho: f64) -> f64 {
    let sq: f64 = beta.iter().map(|b| b * b).sum();
    let sum: f64 = beta.iter().sum();
    (1.0 - rho) * sq + rho * sum * sum
}

/// 9sλ²/φ², infinite when the condition fails.
pub fn error_bound(s: usize, lambda: f64, phi_sq: f64, condition_holds: bool) -> f64 {
    if condition_holds && phi_sq > 0.0 {
        9.0 * s as f64 * lambda * lambda / phi_sq
    } else {
        f64::INFINITY
    }
}

/// 72σ²s(1 + log(p/δ))/(nφ²), the bound at the threshold penalty level.
pub fn error_bound_at_threshold(sigma_sq: f64, s: usize, n: usize, p: usize, delta: f64, phi_sq: f64) -> f64 {
    72.0 * sigma_sq * s as f64 * (1.0 + (p as f64 / delta).ln()) / (n as f64 * phi_sq)
}

/// n / log p
pub fn scale_factor(n: usize, p: usize) -> f64 {
    n as f64 / (p as f64).ln()
}

/// (bound/MSE, MSE/bound) with x/0 = +∞ and x/+∞ = 0.
pub fn ratios(mse: f64, bound: f64) -> (f64, f64) {
    let div = |a: f64, b: f64| {
        if b == 0.0 || (a.is_infinite() && b.is_finite()) {
            f64::INFINITY
        } else if b.is_infinite() {
            0.0
        } else {
            a / b
        }
    };
    (div(bound, mse), div(mse, bound))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub s: usize,
    pub seed: u64,
    pub replication: usize,
    pub phi: f64,
    pub phi_sq: f64,
    pub status: Option<CompatStatus>,
    pub mse: f64,
    pub bound: f64,
    pub mse_scaled: f64,
    pub bound_scaled: f64,
    pub ratio_bound_over_mse: f64,
    pub ratio_mse_over_bound: f64,
    pub lambda: f64,
    pub sigma_sq: f64,
    pub wall_time: f64,
    pub condition_fails: bool,
    pub error: Option<String>,
}

impl ExperimentRecord {
    fn failed(n: usize, p: usize, rho: f64, s: usize, seed: u64, replication: usize, err: &Error) -> Self {
        let nan = f64::NAN;
        ExperimentRecord {
            n,
            p,
            rho,
            s,
            seed,
            replication,
            phi: nan,
            phi_sq: nan,
            status: None,
            mse: nan,
            bound: nan,
            mse_scaled: nan,
            bound_scaled: nan,
            ratio_bound_over_mse: nan,
            ratio_mse_over_bound: nan,
            lambda: nan,
            sigma_sq: nan,
            wall_time: 0.0,
            condition_fails: false,
            error: Some(err.to_string()),
        }
    }

    /// Key for stable ordering of record sets.
    pub fn sort_key(&self) -> (usize, usize, u64, usize) {
        (self.n, self.p, self.rho.to_bits(), self.replication)
    }
}

/// Fits the lasso at the threshold λ for the true σ, computes φ on the true
/// support and fills a record (keys n, p, ρ, seed and replication are left
/// for the caller).
pub fn evaluate_cell(data: &SimData, delta: f64, solver: &SolverChoice) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let (n, p) = (data.x.n(), data.x.p());
    let s = data.support.s();
    let lambda = lambda_bound(data.sigma_sq.sqrt(), n, p, delta)?;
    let fit = fit_lasso(&data.x, &data.y, lambda, &LassoConfig::default())?;
    let mse = prediction_mse(&data.x, &fit.beta, &data.beta);
    let gram = GramMatrix::from_design(&data.x);
    let compat = solver.solve(&gram, &data.support)?;
    Ok(assemble(n, p, s, lambda, data.sigma_sq, mse, &compat, start.elapsed().as_secs_f64()))
}

/// Record from already computed pieces; `phi_sq` is taken from `compat`.
pub fn assemble(
    n: usize,
    p: usize,
    s: usize,
    lambda: f64,
    sigma_sq: f64,
    mse: f64,
    compat: &CompatResult,
    wall_time: f64,
) -> ExperimentRecord {
    let holds = compat.condition_holds();
    let bound = error_bound(s, lambda, compat.phi_sq, holds);
    let scale = scale_factor(n, p);
    let (rb, rm) = ratios(mse, bound);
    ExperimentRecord {
        n,
        p,
        rho: f64::NAN,
        s,
        seed: 0,
        replication: 0,
        phi: compat.phi,
        phi_sq: compat.phi_sq,
        status: Some(compat.status),
        mse,
        bound,
        mse_scaled: scale * mse,
        bound_scaled: scale * bound,
        ratio_bound_over_mse: rb,
        ratio_mse_over_bound: rm,
        lambda,
        sigma_sq,
        wall_time,
        condition_fails: !holds,
        error: None,
    }
}

#[derive(Debug, Clone, Copy)]
struct Task {
    n: usize,
    p: usize,
    rho: f64,
    replication: usize,
}

fn run_task(cfg: &SimConfig, t: Task) -> ExperimentRecord {
    let seed = cell_seed(cfg.seed, t.n, t.p, t.rho, t.replication);
    let out = gen_compound_data(t.n, t.p, t.rho, cfg.s, (cfg.coef_low, cfg.coef_high), cfg.snr, seed)
        .and_then(|data| evaluate_cell(&data, cfg.delta, &cfg.solver));
    match out {
        Ok(mut rec) => {
            rec.rho = t.rho;
            rec.seed = seed;
            rec.replication = t.replication;
            if !cfg.record_wall_time {
                rec.wall_time = 0.0;
            }
            rec
        }
        Err(e) => {
            log::warn!("cell n={} p={} rho={} rep={} failed: {e}", t.n, t.p, t.rho, t.replication);
            ExperimentRecord::failed(t.n, t.p, t.rho, cfg.s, seed, t.replication, &e)
        }
    }
}

/// Runs every (n, p, ρ, replication) cell and hands records to `sink` in grid
/// order. Cells are computed in parallel batches; emission order does not
/// depend on the thread count. Failed cells become records with `error` set.
pub fn run_grid<F>(cfg: &SimConfig, mut sink: F) -> Result<()>
where
    F: FnMut(&ExperimentRecord) -> Result<()>,
{
    cfg.validate()?;
    let mut tasks = Vec::with_capacity(cfg.n_records());
    for &n in &cfg.n_grid {
        for &p in &cfg.p_grid {
            for &rho in &cfg.rho_grid {
                for replication in 0..cfg.replications {
                    tasks.push(Task { n, p, rho, replication });
                }
            }
        }
    }
    if cfg.threads == 1 {
        for t in tasks {
            sink(&run_task(cfg, t))?;
        }
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for batch in tasks.chunks(4 * cfg.threads) {
        let records: Vec<ExperimentRecord> = pool.install(|| batch.par_iter().map(|&t| run_task(cfg, t)).collect());
        for r in &records {
            sink(r)?;
        }
    }
    Ok(())
}

/// Collects the whole grid in memory.
pub fn run_grid_collect(cfg: &SimConfig) -> Result<Vec<ExperimentRecord>> {
    let mut out = Vec::with_capacity(cfg.n_records());
    run_grid(cfg, |r| {
        out.push(r.clone());
        Ok(())
    })?;
    Ok(out)
}

/// CSV writer with a header row; infinite values are written as `inf`.
pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(w: W) -> Self {
        RecordWriter { inner: csv::Writer::from_writer(w) }
    }

    pub fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        self.inner.serialize(rec)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// One step of the φ_n curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub phi: f64,
    pub phi_sq: f64,
    pub status: CompatStatus,
    pub lambda: f64,
    pub mse: f64,
    pub bound: f64,
    pub ratio_bound_over_mse: f64,
    pub ratio_mse_over_bound: f64,
    pub condition_fails: bool,
}

/// Inputs of [`phi_curve`] that stay fixed across prefix sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSpec<'a> {
    pub active: &'a ActiveSet,
    pub n_steps: &'a [usize],
    pub sigma_sq: f64,
    pub beta_ref: &'a [f64],
    pub delta: f64,
    pub solver: &'a SolverChoice,
}

/// For each prefix size n: restandardize the first n rows, compute φ_n on
/// the fixed active set, fit the lasso at the threshold λ for σ̂ and compare
/// against the reference coefficients.
pub fn phi_curve(x_full: &DesignMatrix, y_full: &[f64], spec: &CurveSpec<'_>) -> Result<Vec<CurvePoint>> {
    let p = x_full.p();
    if y_full.len() != x_full.n() {
        return Err(Error::DimensionMismatch(format!("y has length {}, X has {} rows", y_full.len(), x_full.n())));
    }
    if spec.beta_ref.len() != p || spec.active.p() != p {
        return Err(Error::DimensionMismatch(format!("reference coefficients and active set must be over p = {p}")));
    }
    if !(spec.sigma_sq >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma_sq must be nonnegative, got {}", spec.sigma_sq)));
    }
    let s = spec.active.s();
    let mut out = Vec::with_capacity(spec.n_steps.len());
    for &n in spec.n_steps {
        let min = (s + 1).max(2);
        if n < min {
            return Err(Error::PrefixTooSmall { n, min });
        }
        if n > x_full.n() {
            return Err(Error::DimensionMismatch(format!("prefix of {n} rows requested from {} rows", x_full.n())));
        }
        let (xn, _) = standardize(&x_full.prefix(n)?)?;
        let (yn, _) = center(&y_full[..n]);
        let gram = GramMatrix::from_design(&xn);
        let compat = spec.solver.solve(&gram, spec.active)?;
        let lambda = lambda_bound(spec.sigma_sq.sqrt(), n, p, spec.delta)?;
        let fit = fit_lasso(&xn, &yn, lambda, &LassoConfig::default())?;
        let mse = prediction_mse(&xn, &fit.beta, spec.beta_ref);
        let rec = assemble(n, p, s, lambda, spec.sigma_sq, mse, &compat, 0.0);
        out.push(CurvePoint {
            n,
            phi: rec.phi,
            phi_sq: rec.phi_sq,
            status: compat.status,
            lambda,
            mse,
            bound: rec.bound,
            ratio_bound_over_mse: rec.ratio_bound_over_mse,
            ratio_mse_over_bound: rec.ratio_mse_over_bound,
            condition_fails: rec.condition_fails,
        });
    }
    Ok(out)
}
