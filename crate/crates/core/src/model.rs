//! Shared domain types: design and Gram matrices, active sets, sign
//! patterns and solver results.
//!
//! Indices are 0-based everywhere in the library. Conversion from the
//! 1-based convention used at the command line happens in [`ActiveSet::from_one_based`].

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this value of φ² the compatibility condition is declared to fail.
pub const ZERO_THRESHOLD: f64 = 1e-6;

/// Absolute symmetry tolerance accepted for Gram matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Smallest eigenvalue accepted for a Gram matrix (numerical PSD).
pub const PSD_TOL: f64 = -1e-10;

/// Radius of the off-support ℓ1 cone once the support block is normalised.
pub const CONE_RADIUS: f64 = 3.0;

/// An n×p design matrix, observations in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::TooFewObservations { needed: 2, got: values.nrows() });
        }
        if values.ncols() < 1 {
            return Err(Error::DimensionMismatch("design matrix has no columns".into()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(DesignMatrix { values })
    }

    pub fn from_row_slice(n: usize, p: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::DimensionMismatch(format!(
                "{} values cannot fill a {n}x{p} matrix",
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, p, data))
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    /// Contiguous view of column `j` (storage is column-major).
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    /// The first `rows` observations as a new design matrix.
    pub fn prefix(&self, rows: usize) -> Result<Self> {
        if rows > self.n() {
            return Err(Error::DimensionMismatch(format!(
                "prefix of {rows} rows requested from {} rows",
                self.n()
            )));
        }
        Self::new(self.values.rows(0, rows).into_owned())
    }

    /// Mean and column squared norm check used by tests and invariants.
    pub fn is_standardized(&self, tol: f64) -> bool {
        let n = self.n() as f64;
        (0..self.p()).all(|j| {
            let col = self.column(j);
            let mean = col.iter().sum::<f64>() / n;
            let ss: f64 = col.iter().map(|x| x * x).sum();
            mean.abs() <= tol * n.sqrt() && (ss - n).abs() <= tol * n
        })
    }
}

/// Per-column centering and scaling factors produced by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// Computes factors without rejecting constant columns; those get scale 0
    /// and are mapped to an all-zero column by [`Standardization::apply`].
    pub fn fit_lenient(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mean = col.iter().sum::<f64>() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let max_abs = col.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let sd = (ss / n).sqrt();
            let degenerate = sd <= f64::EPSILON * max_abs.max(f64::MIN_POSITIVE) * 4.0;
            means.push(mean);
            scales.push(if degenerate { 0.0 } else { sd });
        }
        Standardization { means, scales }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            for v in col.iter_mut() {
                *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
            }
        }
        out
    }

    /// Maps standardized values back to the original scale.
    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = z.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            for v in col.iter_mut() {
                *v = *v * s + m;
            }
        }
        out
    }
}

/// Centers each column and scales it to squared norm n.
pub fn standardize(x: &DesignMatrix) -> Result<(DesignMatrix, Standardization)> {
    let factors = Standardization::fit_lenient(x.values());
    if let Some(j) = factors.scales.iter().position(|&s| s == 0.0) {
        return Err(Error::ZeroVarianceColumn(j));
    }
    let z = factors.apply(x.values());
    Ok((DesignMatrix::new(z)?, factors))
}

/// Centers a response vector, returning the centered copy and its mean.
pub fn center(y: &[f64]) -> (Vec<f64>, f64) {
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    (y.iter().map(|v| v - mean).collect(), mean)
}

/// A symmetric positive semidefinite p×p matrix over which the quadratic
/// forms of the compatibility problem are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: DMatrix<f64>,
}

impl GramMatrix {
    /// Validates symmetry and numerical PSD, then stores the symmetrized matrix.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrix must be square and non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let asym = (&values - values.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = (&values + values.transpose()) * 0.5;
        let lmin = min_eigenvalue(&sym);
        if lmin < PSD_TOL {
            return Err(Error::NotPsd(lmin));
        }
        Ok(GramMatrix { values: sym })
    }

    /// Σ̂ = XᵀX / n. PSD by construction, so no eigenvalue check is run.
    pub fn from_design(x: &DesignMatrix) -> Self {
        let n = x.n() as f64;
        let mut g = x.values().tr_mul(x.values()) / n;
        // tr_mul is not guaranteed to be bitwise symmetric
        let p = g.nrows();
        for i in 0..p {
            for j in 0..i {
                let avg = 0.5 * (g[(i, j)] + g[(j, i)]);
                g[(i, j)] = avg;
                g[(j, i)] = avg;
            }
        }
        GramMatrix { values: g }
    }

    pub fn identity(p: usize) -> Self {
        GramMatrix { values: DMatrix::identity(p, p) }
    }

    /// Population compound-symmetry matrix (1-ρ)I + ρ11ᵀ.
    pub fn compound_symmetry(p: usize, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1), got {rho}")));
        }
        if p == 0 {
            return Err(Error::DimensionMismatch("p must be positive".into()));
        }
        let mut m = DMatrix::from_element(p, p, rho);
        for i in 0..p {
            m[(i, i)] = 1.0;
        }
        Ok(GramMatrix { values: m })
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn quad_form(&self, v: &[f64]) -> f64 {
        quad_form(&self.values, v)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.values)
    }
}

pub fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let p = v.len();
    debug_assert_eq!(m.nrows(), p);
    let mut total = 0.0;
    for j in 0..p {
        if v[j] == 0.0 {
            continue;
        }
        let col = m.column(j);
        let mut acc = 0.0;
        for i in 0..p {
            acc += col[i] * v[i];
        }
        total += v[j] * acc;
    }
    total
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// The support S of the assumed-nonzero coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActiveSet {
    indices: Vec<usize>,
    p: usize,
}

impl ActiveSet {
    /// Builds an active set from 0-based indices; input order is irrelevant.
    pub fn new(mut indices: Vec<usize>, p: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() {
            return Err(Error::InvalidActiveSet("active set is empty".into()));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidActiveSet("duplicate indices".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= p {
                return Err(Error::InvalidActiveSet(format!("index {last} out of range for p = {p}")));
            }
        }
        Ok(ActiveSet { indices, p })
    }

    pub fn from_one_based(indices: &[usize], p: usize) -> Result<Self> {
        if indices.contains(&0) {
            return Err(Error::InvalidActiveSet("1-based indices must be >= 1".into()));
        }
        Self::new(indices.iter().map(|i| i - 1).collect(), p)
    }

    /// S = {0, …, s-1}.
    pub fn leading(s: usize, p: usize) -> Result<Self> {
        Self::new((0..s).collect(), p)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.indices.iter().map(|i| i + 1).collect()
    }

    pub fn s(&self) -> usize {
        self.indices.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// r = p - s.
    pub fn r(&self) -> usize {
        self.p - self.indices.len()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    /// Indices of S^c in increasing order.
    pub fn complement(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.r());
        let mut it = self.indices.iter().peekable();
        for j in 0..self.p {
            if it.peek() == Some(&&j) {
                it.next();
            } else {
                out.push(j);
            }
        }
        out
    }
}

/// Fixed signs z ∈ {±1}^s for the support coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignPattern {
    signs: Vec<i8>,
}

impl SignPattern {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.is_empty() {
            return Err(Error::InvalidSignPattern("empty pattern".into()));
        }
        if signs.iter().any(|&z| z != 1 && z != -1) {
            return Err(Error::InvalidSignPattern("entries must be +1 or -1".into()));
        }
        Ok(SignPattern { signs })
    }

    /// The `k`-th canonical pattern of length `s`: first sign +1, the rest read
    /// off the bits of `k` with the most significant bit at position 1 and a
    /// set bit meaning -1. Increasing `k` is lexicographic order with + < -.
    pub fn canonical(s: usize, k: u64) -> Self {
        assert!(s >= 1 && s <= 64);
        let mut signs = vec![1i8; s];
        for (i, z) in signs.iter_mut().enumerate().skip(1) {
            if (k >> (s - 1 - i)) & 1 == 1 {
                *z = -1;
            }
        }
        SignPattern { signs }
    }

    /// Number of canonical patterns, 2^(s-1).
    pub fn canonical_count(s: usize) -> u64 {
        1u64 << (s - 1)
    }

    /// Index of this pattern in the canonical enumeration, after a global
    /// flip if needed.
    pub fn canonical_index(&self) -> u64 {
        let c = self.to_canonical();
        let s = c.len();
        c.signs
            .iter()
            .enumerate()
            .skip(1)
            .fold(0u64, |k, (i, &z)| if z < 0 { k | (1 << (s - 1 - i)) } else { k })
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn negated(&self) -> Self {
        SignPattern { signs: self.signs.iter().map(|z| -z).collect() }
    }

    pub fn is_canonical(&self) -> bool {
        self.signs[0] == 1
    }

    pub fn to_canonical(&self) -> Self {
        if self.is_canonical() {
            self.clone()
        } else {
            self.negated()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompatStatus {
    Optimal,
    TimeLimitFeasible,
    ZeroDetected,
    Infeasible,
}

impl std::fmt::Display for CompatStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CompatStatus::Optimal => "optimal",
            CompatStatus::TimeLimitFeasible => "time_limit_feasible",
            CompatStatus::ZeroDetected => "zero_detected",
            CompatStatus::Infeasible => "infeasible",
        };
        f.write_str(s)
    }
}

/// Outcome of a compatibility-constant computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatResult {
    /// s·vᵀΣ̂v at the best feasible point found.
    pub phi_sq: f64,
    /// √φ², reported as exactly 0 when `status` is `ZeroDetected`.
    pub phi: f64,
    pub minimizer: Vec<f64>,
    pub status: CompatStatus,
    /// Proven lower bound on φ².
    pub lower_bound: f64,
    pub wall_time: f64,
    pub subproblems_solved: usize,
    /// Sign pattern on S of the reported minimizer.
    pub pattern: Option<SignPattern>,
}

impl CompatResult {
    pub fn condition_holds(&self) -> bool {
        self.status != CompatStatus::ZeroDetected
    }
}

/// Largest violation of the normalised feasible set
/// {‖v_S‖₁ = 1, ‖v_{S^c}‖₁ ≤ 3}.
pub fn feasibility_violation(v: &[f64], active: &ActiveSet) -> f64 {
    let l1_s: f64 = active.indices().iter().map(|&j| v[j].abs()).sum();
    let l1_c: f64 = active.complement().iter().map(|&j| v[j].abs()).sum();
    (l1_s - 1.0).abs().max((l1_c - CONE_RADIUS).max(0.0))
}

/// s·vᵀΣ̂v / ‖v_S‖₁², the scale-invariant objective.
pub fn compat_ratio(gram: &GramMatrix, active: &ActiveSet, v: &[f64]) -> f64 {
    let l1_s: f64 = active.indices().iter().map(|&j| v[j].abs()).sum();
    active.s() as f64 * gram.quad_form(v) / (l1_s * l1_s)
}

/// Whether v lies in the cone ‖v_{S^c}‖₁ ≤ 3‖v_S‖₁.
pub fn in_cone(active: &ActiveSet, v: &[f64]) -> bool {
    let l1_s: f64 = active.indices().iter().map(|&j| v[j].abs()).sum();
    let l1_c: f64 = active.complement().iter().map(|&j| v[j].abs()).sum();
    l1_c <= CONE_RADIUS * l1_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standardize_symmetric_three_point_column() {
        let x = DesignMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]).unwrap();
        let (z, f) = standardize(&x).unwrap();
        let expected = 1.5_f64.sqrt();
        assert!((z.values()[(0, 0)] + expected).abs() < 1e-12);
        assert!(z.values()[(1, 0)].abs() < 1e-12);
        assert!((z.values()[(2, 0)] - expected).abs() < 1e-12);
        assert!((f.means[0] - 2.0).abs() < 1e-15);
        let back = f.invert(z.values());
        assert!((back - x.values()).amax() < 1e-12);
    }

    #[test]
    fn standardize_is_idempotent() {
        let x = DesignMatrix::from_row_slice(4, 2, &[1.0, 0.5, 2.0, -1.0, 4.0, 3.0, 0.0, 2.0]).unwrap();
        let (z, _) = standardize(&x).unwrap();
        let (zz, _) = standardize(&z).unwrap();
        assert!((zz.values() - z.values()).amax() < 1e-12);
        assert!(z.is_standardized(1e-10));
    }

    #[test]
    fn constant_column_is_rejected() {
        let x = DesignMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        assert_eq!(standardize(&x).unwrap_err(), Error::ZeroVarianceColumn(1));
    }

    #[test]
    fn non_finite_and_tiny_inputs_are_rejected() {
        assert_eq!(
            DesignMatrix::from_row_slice(2, 1, &[1.0, f64::NAN]).unwrap_err(),
            Error::NonFiniteInput
        );
        assert!(matches!(
            DesignMatrix::from_row_slice(1, 2, &[1.0, 2.0]).unwrap_err(),
            Error::TooFewObservations { .. }
        ));
    }

    #[test]
    fn gram_of_orthogonal_design_is_identity() {
        // columns orthogonal with squared norm n = 4
        let x = DesignMatrix::from_row_slice(
            4,
            2,
            &[1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0],
        )
        .unwrap();
        let g = GramMatrix::from_design(&x);
        assert!((g.values() - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn gram_of_duplicated_column_has_unit_correlation() {
        let x = DesignMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let (z, _) = standardize(&x).unwrap();
        let g = GramMatrix::from_design(&z);
        assert!((g.values()[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_matches_direct_product_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..500).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = DesignMatrix::from_row_slice(50, 10, &data).unwrap();
        let (z, _) = standardize(&x).unwrap();
        let g = GramMatrix::from_design(&z);
        // naive triple loop
        for a in 0..10 {
            for b in 0..10 {
                let mut acc = 0.0;
                for i in 0..50 {
                    acc += z.values()[(i, a)] * z.values()[(i, b)];
                }
                assert!((g.values()[(a, b)] - acc / 50.0).abs() < 1e-12);
            }
            assert!((g.values()[(a, a)] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn gram_validation() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(GramMatrix::new(asym), Err(Error::NotSymmetric(_))));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(GramMatrix::new(indefinite), Err(Error::NotPsd(_))));
        assert!(GramMatrix::compound_symmetry(4, -0.1).is_err());
        assert!(GramMatrix::compound_symmetry(4, 0.3).is_ok());
    }

    #[test]
    fn active_set_construction() {
        let a = ActiveSet::new(vec![4, 1, 7], 10).unwrap();
        assert_eq!(a.indices(), &[1, 4, 7]);
        assert_eq!(a.complement(), vec![0, 2, 3, 5, 6, 8, 9]);
        assert_eq!(a.one_based(), vec![2, 5, 8]);
        assert!(ActiveSet::new(vec![1, 1], 3).is_err());
        assert!(ActiveSet::new(vec![3], 3).is_err());
        assert!(ActiveSet::new(vec![], 3).is_err());
        assert_eq!(ActiveSet::from_one_based(&[1, 3], 3).unwrap().indices(), &[0, 2]);
        assert!(ActiveSet::from_one_based(&[0], 3).is_err());
    }

    #[test]
    fn canonical_patterns_enumerate_in_lexicographic_order() {
        let pats: Vec<_> = (0..SignPattern::canonical_count(3)).map(|k| SignPattern::canonical(3, k)).collect();
        let signs: Vec<_> = pats.iter().map(|p| p.signs().to_vec()).collect();
        assert_eq!(signs, vec![vec![1, 1, 1], vec![1, 1, -1], vec![1, -1, 1], vec![1, -1, -1]]);
        for (k, p) in pats.iter().enumerate() {
            assert_eq!(p.canonical_index(), k as u64);
            assert_eq!(p.negated().canonical_index(), k as u64);
        }
    }

    proptest! {
        #[test]
        fn ratio_is_scale_invariant(
            v in proptest::collection::vec(-3.0f64..3.0, 6),
            a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        ) {
            let g = GramMatrix::compound_symmetry(6, 0.3).unwrap();
            let s = ActiveSet::new(vec![0, 2], 6).unwrap();
            prop_assume!(v[0].abs() + v[2].abs() > 1e-3);
            let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
            let r1 = compat_ratio(&g, &s, &v);
            let r2 = compat_ratio(&g, &s, &scaled);
            prop_assert!((r1 - r2).abs() <= 1e-10 * r1.abs().max(1.0));
        }

        #[test]
        fn feasibility_is_closed_under_sign_flip(v in proptest::collection::vec(-1.0f64..1.0, 5)) {
            let g = GramMatrix::compound_symmetry(5, 0.5).unwrap();
            let s = ActiveSet::new(vec![1, 3], 5).unwrap();
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            prop_assert_eq!(feasibility_violation(&v, &s), feasibility_violation(&neg, &s));
            prop_assert_eq!(in_cone(&s, &v), in_cone(&s, &neg));
            prop_assert!((g.quad_form(&v) - g.quad_form(&neg)).abs() < 1e-14);
        }

        #[test]
        fn standardized_gram_has_unit_diagonal(data in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let x = DesignMatrix::from_row_slice(8, 3, &data).unwrap();
            if let Ok((z, _)) = standardize(&x) {
                let g = GramMatrix::from_design(&z);
                for j in 0..3 {
                    prop_assert!((g.values()[(j, j)] - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
