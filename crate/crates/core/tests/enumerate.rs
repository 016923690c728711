mod common;

use compatkit::enumerate::{build_fixed_sign_qp, phi_enumerate, phi_for_pattern, EnumConfig, FixedSignSubproblem};
use compatkit::model::{compat_ratio, feasibility_violation, ActiveSet, CompatStatus, GramMatrix, SignPattern};
use compatkit::qp::{kkt_residuals, solve_qp, ToleranceConfig};

fn assert_valid_minimizer(gram: &GramMatrix, active: &ActiveSet, phi_sq: f64, v: &[f64]) {
    assert!(feasibility_violation(v, active) <= 1e-6, "minimizer infeasible: {}", feasibility_violation(v, active));
    let value = active.s() as f64 * gram.quad_form(v);
    assert!((value - phi_sq).abs() <= 1e-6 * (1.0 + phi_sq), "objective {value} vs phi_sq {phi_sq}");
}

#[test]
fn identity_gram_spreads_mass_evenly_on_the_support() {
    let gram = GramMatrix::identity(8);
    let active = ActiveSet::new(vec![0, 3, 5], 8).unwrap();
    let r = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
    assert!((r.phi_sq - 1.0).abs() < 1e-7);
    assert_eq!(r.status, CompatStatus::Optimal);
    for (j, &x) in r.minimizer.iter().enumerate() {
        let expected = if active.contains(j) { 1.0 / 3.0 } else { 0.0 };
        assert!((x.abs() - expected).abs() < 1e-6, "coordinate {j}: {x}");
    }
    assert_valid_minimizer(&gram, &active, r.phi_sq, &r.minimizer);
}

#[test]
fn compound_symmetry_pattern_values() {
    // ρ = 0.5, p = 10, S = {0, 1}. Opposite signs cancel the ρ term: 1 − ρ.
    // Equal signs: by symmetry v_S = (½, ½) and the off-support mass −t is
    // spread evenly, so φ²(t) = 2[(1−ρ)(½ + t²/8) + ρ(1−t)²], minimised at
    // t = 8/9 with value ½ + 1/9.
    let gram = GramMatrix::compound_symmetry(10, 0.5).unwrap();
    let active = ActiveSet::leading(2, 10).unwrap();
    let tol = ToleranceConfig::default();
    let opposite = SignPattern::new(vec![1, -1]).unwrap();
    let same = SignPattern::new(vec![1, 1]).unwrap();
    let (a, _) = phi_for_pattern(&FixedSignSubproblem { gram: &gram, active: &active, signs: &opposite }, &tol).unwrap();
    let (b, vb) = phi_for_pattern(&FixedSignSubproblem { gram: &gram, active: &active, signs: &same }, &tol).unwrap();
    assert!((a - 0.5).abs() < 1e-7, "{a}");
    assert!((b - (0.5 + 1.0 / 9.0)).abs() < 1e-7, "{b}");
    for &w in &vb[2..] {
        assert!((w + 1.0 / 9.0).abs() < 1e-6, "{w}");
    }
    let r = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
    assert!((r.phi_sq - 0.5).abs() < 1e-7);
}

#[test]
fn negated_patterns_have_equal_value() {
    let gram = common::gaussian_gram(40, 9, 11);
    let active = ActiveSet::new(vec![1, 4, 6, 8], 9).unwrap();
    let tol = ToleranceConfig::default();
    for k in 0..SignPattern::canonical_count(4) {
        let z = SignPattern::canonical(4, k);
        let nz = z.negated();
        let (a, _) = phi_for_pattern(&FixedSignSubproblem { gram: &gram, active: &active, signs: &z }, &tol).unwrap();
        let (b, _) = phi_for_pattern(&FixedSignSubproblem { gram: &gram, active: &active, signs: &nz }, &tol).unwrap();
        assert!((a - b).abs() < 1e-7, "pattern {k}: {a} vs {b}");
    }
}

#[test]
fn bounded_below_by_smallest_eigenvalue() {
    // ‖v‖² ≥ ‖v_S‖² ≥ 1/s on the feasible set, so φ² ≥ λ_min.
    for seed in 0..6 {
        let gram = common::gaussian_gram(60, 8, seed);
        let active = ActiveSet::leading(1 + seed as usize % 4, 8).unwrap();
        let r = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
        assert!(r.phi_sq >= gram.min_eigenvalue() - 1e-8, "{} < {}", r.phi_sq, gram.min_eigenvalue());
        assert_valid_minimizer(&gram, &active, r.phi_sq, &r.minimizer);
    }
}

#[test]
fn never_above_any_feasible_point() {
    let mut rng = common::rng(5);
    let gram = common::gaussian_gram(30, 6, 2);
    let active = ActiveSet::new(vec![0, 2, 5], 6).unwrap();
    let r = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
    for _ in 0..20_000 {
        let v = common::feasible_point(&active, &mut rng);
        assert!(compat_ratio(&gram, &active, &v) >= r.phi_sq - 1e-9);
    }
    assert_valid_minimizer(&gram, &active, r.phi_sq, &r.minimizer);
}

#[test]
fn support_vertices_bound_from_above() {
    // Points with zero off-support budget are feasible, so φ² is at most the
    // value at each vertex e_j, j ∈ S.
    let gram = common::gaussian_gram(50, 7, 8);
    let active = ActiveSet::new(vec![1, 3, 4], 7).unwrap();
    let r = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
    for &j in active.indices() {
        let mut v = vec![0.0; 7];
        v[j] = 1.0;
        assert!(r.phi_sq <= compat_ratio(&gram, &active, &v) + 1e-9);
    }
}

fn grid_min(gram: &GramMatrix, active: &ActiveSet, steps: usize) -> f64 {
    // p = 3, s = 1 or 2: parametrise the feasible set and scan it.
    let s = active.s();
    let comp = active.complement();
    let mut best = f64::INFINITY;
    let h = 1.0 / steps as f64;
    let mut v = [0.0; 3];
    match s {
        1 => {
            let j = active.indices()[0];
            v[j] = 1.0;
            for a in 0..=6 * steps {
                for b in 0..=6 * steps {
                    let (x, y) = (-3.0 + a as f64 * h, -3.0 + b as f64 * h);
                    if x.abs() + y.abs() > 3.0 {
                        continue;
                    }
                    v[comp[0]] = x;
                    v[comp[1]] = y;
                    best = best.min(gram.quad_form(&v));
                }
            }
        }
        2 => {
            let (j, k) = (active.indices()[0], active.indices()[1]);
            for sign in [1.0, -1.0] {
                for a in 0..=steps {
                    let t = a as f64 * h;
                    v[j] = t;
                    v[k] = sign * (1.0 - t);
                    for b in 0..=6 * steps {
                        v[comp[0]] = -3.0 + b as f64 * h;
                        best = best.min(2.0 * gram.quad_form(&v));
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    best
}

#[test]
fn small_instances_match_a_grid_scan() {
    for (seed, support) in [(1u64, vec![0]), (2, vec![2]), (3, vec![0, 1]), (4, vec![1, 2])] {
        let gram = common::gaussian_gram(8, 3, seed);
        let active = ActiveSet::new(support, 3).unwrap();
        let r = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
        let scan = grid_min(&gram, &active, 1500);
        assert!(r.phi_sq <= scan + 1e-9, "seed {seed}: {} > scan {scan}", r.phi_sq);
        assert!(scan - r.phi_sq < 1e-4, "seed {seed}: {} vs scan {scan}", r.phi_sq);
    }
}

#[test]
fn fixed_sign_solves_satisfy_kkt() {
    let gram = common::gaussian_gram(25, 10, 21);
    let active = ActiveSet::new(vec![0, 5, 9], 10).unwrap();
    let tol = ToleranceConfig::default();
    for k in 0..SignPattern::canonical_count(3) {
        let z = SignPattern::canonical(3, k);
        let prob = build_fixed_sign_qp(&FixedSignSubproblem { gram: &gram, active: &active, signs: &z }).unwrap();
        let sol = solve_qp(&prob, None, &tol).unwrap();
        let kkt = kkt_residuals(&prob, &sol.x, &sol.y, &tol);
        assert!(kkt.within_tolerance(), "pattern {k}: {kkt:?}");
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    let gram = common::gaussian_gram(40, 15, 4);
    let active = ActiveSet::leading(6, 15).unwrap();
    let one = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
    let three = phi_enumerate(&gram, &active, &EnumConfig { threads: 3, ..EnumConfig::default() }).unwrap();
    assert_eq!(one.phi_sq.to_bits(), three.phi_sq.to_bits());
    assert_eq!(one.minimizer, three.minimizer);
    assert_eq!(one.pattern, three.pattern);
}

#[test]
fn rank_deficient_gram_is_detected_as_zero() {
    // n < s: some direction inside the support has zero curvature.
    let gram = common::gaussian_gram(3, 10, 6);
    let active = ActiveSet::leading(5, 10).unwrap();
    let r = phi_enumerate(&gram, &active, &EnumConfig::default()).unwrap();
    assert_eq!(r.status, CompatStatus::ZeroDetected);
    assert_eq!(r.phi, 0.0);
    assert!(!r.condition_holds());
    let early = phi_enumerate(&gram, &active, &EnumConfig { early_stop: true, ..EnumConfig::default() }).unwrap();
    assert_eq!(early.status, CompatStatus::ZeroDetected);
    assert!(early.subproblems_solved <= r.subproblems_solved);
}
