//! Closed-form values for the compound-symmetry matrix Σ_ρ = (1−ρ)I + ρ11ᵀ.
//!
//! For even s the population constant is exactly 1−ρ. For odd s only the
//! bracket 1−ρ ≤ φ² ≤ (1−ρ)(1 + 1/(s(p−s))) is known; the upper end is
//! attained by an explicit witness vector and is never reported as exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GramMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompoundSymmetry {
    rho: f64,
    p: usize,
}

impl CompoundSymmetry {
    pub fn new(rho: f64, p: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidConfig(format!("rho must lie in [0, 1), got {rho}")));
        }
        if p == 0 {
            return Err(Error::InvalidConfig("p must be positive".into()));
        }
        Ok(CompoundSymmetry { rho, p })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn gram(&self) -> GramMatrix {
        GramMatrix::compound_symmetry(self.p, self.rho).expect("validated on construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationValue {
    Exact(f64),
    UpperBound(f64),
}

/// Population φ² for a given s, with the lower bound that holds for every s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationPhiSq {
    pub value: PopulationValue,
    pub lower: f64,
}

impl PopulationPhiSq {
    pub fn upper(&self) -> f64 {
        match self.value {
            PopulationValue::Exact(v) | PopulationValue::UpperBound(v) => v,
        }
    }

    pub fn exact(&self) -> Option<f64> {
        match self.value {
            PopulationValue::Exact(v) => Some(v),
            PopulationValue::UpperBound(_) => None,
        }
    }
}

fn check_s(cs: &CompoundSymmetry, s: usize) -> Result<()> {
    let p = cs.p;
    let invalid = |reason: &str| Err(Error::InvalidS { s, p, reason: reason.into() });
    if s == 0 || s > p {
        return invalid("need 1 <= s <= p");
    }
    if s % 2 == 1 && s == p {
        return invalid("odd s needs at least one off-support coordinate");
    }
    Ok(())
}

pub fn population_phi_sq(cs: &CompoundSymmetry, s: usize) -> Result<PopulationPhiSq> {
    check_s(cs, s)?;
    let base = 1.0 - cs.rho;
    let value = if s % 2 == 0 {
        PopulationValue::Exact(base)
    } else {
        let r = (cs.p - s) as f64;
        PopulationValue::UpperBound(base * (1.0 + 1.0 / (s as f64 * r)))
    };
    Ok(PopulationPhiSq { value, lower: base })
}

/// The feasible vector attaining the value of [`population_phi_sq`], with
/// support S = {0, …, s−1}. Its entries sum to zero, which removes the ρ term
/// of the quadratic form.
pub fn witness_vector(cs: &CompoundSymmetry, s: usize) -> Result<Vec<f64>> {
    check_s(cs, s)?;
    let p = cs.p;
    let sf = s as f64;
    let mut v = vec![0.0; p];
    if s % 2 == 0 {
        for (j, vj) in v.iter_mut().enumerate().take(s) {
            *vj = if j < s / 2 { 1.0 / sf } else { -1.0 / sf };
        }
    } else {
        let r = p - s;
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = if j < (s - 1) / 2 {
                1.0 / sf
            } else if j < s {
                -1.0 / sf
            } else {
                1.0 / (sf * r as f64)
            };
        }
    }
    Ok(v)
}

/// vᵀΣ_ρv split as ((1−ρ)‖v‖², ρ(1ᵀv)²).
pub fn quad_form_decomposition(cs: &CompoundSymmetry, v: &[f64]) -> Result<(f64, f64)> {
    if v.len() != cs.p {
        return Err(Error::DimensionMismatch(format!("vector has length {}, expected {}", v.len(), cs.p)));
    }
    let sq: f64 = v.iter().map(|x| x * x).sum();
    let sum: f64 = v.iter().sum();
    Ok(((1.0 - cs.rho) * sq, cs.rho * sum * sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{feasibility_violation, ActiveSet};

    #[test]
    fn even_value_is_exact() {
        let cs = CompoundSymmetry::new(0.4, 100).unwrap();
        let b = population_phi_sq(&cs, 4).unwrap();
        assert_eq!(b.exact(), Some(0.6));
        assert_eq!(b.lower, 0.6);
        let id = CompoundSymmetry::new(0.0, 2).unwrap();
        assert_eq!(population_phi_sq(&id, 2).unwrap().exact(), Some(1.0));
    }

    #[test]
    fn odd_value_is_an_upper_bound() {
        let cs = CompoundSymmetry::new(0.0, 10).unwrap();
        let b = population_phi_sq(&cs, 3).unwrap();
        assert_eq!(b.exact(), None);
        assert!((b.upper() - (1.0 + 1.0 / 21.0)).abs() < 1e-15);
        assert!((b.upper() - 1.047619).abs() < 1e-6);
        assert_eq!(b.lower, 1.0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(CompoundSymmetry::new(-0.1, 5).is_err());
        assert!(CompoundSymmetry::new(1.0, 5).is_err());
        let cs = CompoundSymmetry::new(0.3, 5).unwrap();
        assert!(matches!(population_phi_sq(&cs, 0), Err(Error::InvalidS { .. })));
        assert!(matches!(population_phi_sq(&cs, 5), Err(Error::InvalidS { .. })));
        assert!(matches!(witness_vector(&cs, 6), Err(Error::InvalidS { .. })));
        assert!(quad_form_decomposition(&cs, &[1.0]).is_err());
    }

    #[test]
    fn witness_constructions() {
        let cs = CompoundSymmetry::new(0.5, 4).unwrap();
        assert_eq!(witness_vector(&cs, 2).unwrap(), vec![0.5, -0.5, 0.0, 0.0]);

        let cs = CompoundSymmetry::new(0.5, 5).unwrap();
        let v = witness_vector(&cs, 3).unwrap();
        let t = 1.0 / 3.0;
        let expected = [t, -t, -t, 1.0 / 6.0, 1.0 / 6.0];
        assert!(v.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(v.iter().sum::<f64>().abs() < 1e-15);

        // s = 1: the +1/s block is empty
        for rho in [0.0, 0.3, 0.7] {
            let cs = CompoundSymmetry::new(rho, 2).unwrap();
            let v = witness_vector(&cs, 1).unwrap();
            assert_eq!(v, vec![-1.0, 1.0]);
            let dense = cs.gram().quad_form(&v);
            assert!((dense - (1.0 - rho) * 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn witness_is_feasible_and_attains_the_value() {
        for rho in [0.0, 0.2, 0.5, 0.9] {
            for p in [4, 7, 20] {
                let cs = CompoundSymmetry::new(rho, p).unwrap();
                let gram = cs.gram();
                for s in 1..p {
                    let v = witness_vector(&cs, s).unwrap();
                    let active = ActiveSet::leading(s, p).unwrap();
                    assert!(feasibility_violation(&v, &active) < 1e-12);
                    let obj = s as f64 * gram.quad_form(&v);
                    let want = population_phi_sq(&cs, s).unwrap().upper();
                    assert!((obj - want).abs() < 1e-12, "rho {rho} p {p} s {s}: {obj} vs {want}");
                }
            }
        }
    }

    #[test]
    fn decomposition_matches_dense_form() {
        let cs = CompoundSymmetry::new(0.5, 4).unwrap();
        assert_eq!(quad_form_decomposition(&cs, &[1.0; 4]).unwrap(), (2.0, 8.0));
        let (_, sum_part) = quad_form_decomposition(&cs, &[1.0, -2.0, 0.5, 0.5]).unwrap();
        assert_eq!(sum_part, 0.0);

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cs = CompoundSymmetry::new(0.3, 7).unwrap();
        let dense = cs.gram();
        for _ in 0..20 {
            let v: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (a, b) = quad_form_decomposition(&cs, &v).unwrap();
            let q = dense.quad_form(&v);
            assert!((a + b - q).abs() <= 1e-10 * q.abs().max(1.0));
        }
    }

    #[test]
    fn lower_bound_holds_on_random_feasible_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for &(rho, p, s) in &[(0.2, 10, 3), (0.6, 12, 4), (0.9, 8, 1)] {
            let cs = CompoundSymmetry::new(rho, p).unwrap();
            let gram = cs.gram();
            for _ in 0..200 {
                let mut v: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let l1s: f64 = v[..s].iter().map(|x: &f64| x.abs()).sum();
                let l1c: f64 = v[s..].iter().map(|x: &f64| x.abs()).sum();
                let budget = rng.gen_range(0.0..3.0);
                for (j, x) in v.iter_mut().enumerate() {
                    *x = if j < s { *x / l1s } else { *x * budget / l1c };
                }
                assert!(s as f64 * gram.quad_form(&v) >= (1.0 - rho) - 1e-12);
            }
        }
    }
}
