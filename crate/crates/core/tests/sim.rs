mod common;

use compatkit::error::Error;
use compatkit::lasso::lambda_bound;
use compatkit::model::{ActiveSet, CompatResult, CompatStatus, DesignMatrix};
use compatkit::sim::{
    assemble, error_bound, error_bound_at_threshold, gen_compound_data, phi_curve, run_grid_collect, scale_factor,
    CurveSpec, ExperimentRecord, RecordWriter, SimConfig, SolverChoice,
};
use nalgebra::DMatrix;
use rand::Rng;

fn small_grid() -> SimConfig {
    SimConfig {
        n_grid: vec![30, 40, 60],
        p_grid: vec![8, 12],
        rho_grid: vec![0.0, 0.5],
        s: 3,
        replications: 2,
        seed: 17,
        record_wall_time: false,
        ..SimConfig::desk_grid()
    }
}

fn to_csv(records: &[ExperimentRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut w = RecordWriter::new(&mut buf);
    for r in records {
        w.write(r).unwrap();
    }
    w.finish().unwrap();
    buf
}

#[test]
fn generated_columns_have_the_target_correlation() {
    let data = gen_compound_data(5000, 10, 0.5, 5, (1.0, 2.0), 1.0, 3).unwrap();
    let x = data.x.values();
    let corr = x.transpose() * x / 5000.0;
    let mut sum = 0.0;
    for i in 0..10 {
        assert!((corr[(i, i)] - 1.0).abs() < 1e-12);
        for j in 0..10 {
            if i != j {
                sum += corr[(i, j)];
            }
        }
    }
    let mean = sum / 90.0;
    assert!((mean - 0.5).abs() < 0.03, "mean off-diagonal correlation {mean}");
}

#[test]
fn generated_data_is_consistent() {
    let data = gen_compound_data(50, 12, 0.4, 4, (1.0, 2.0), 2.0, 8).unwrap();
    assert_eq!(data.support.s(), 4);
    for j in 0..12 {
        let b = data.beta[j];
        if data.support.contains(j) {
            assert!((1.0..=2.0).contains(&b));
        } else {
            assert_eq!(b, 0.0);
        }
    }
    assert!(data.x.is_standardized(1e-10));
    assert!(data.y.iter().sum::<f64>().abs() < 1e-9);
    let again = gen_compound_data(50, 12, 0.4, 4, (1.0, 2.0), 2.0, 8).unwrap();
    assert_eq!(data.y, again.y);
    assert_eq!(data.beta, again.beta);
}

#[test]
fn grid_cardinality_and_record_invariants() {
    let cfg = small_grid();
    let records = run_grid_collect(&cfg).unwrap();
    assert_eq!(records.len(), 24);
    let mut keys: Vec<_> = records.iter().map(|r| r.sort_key()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 24);
    for r in &records {
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.mse >= 0.0 && r.mse.is_finite());
        let scale = r.n as f64 / (r.p as f64).ln();
        assert!((r.mse_scaled - scale * r.mse).abs() <= 1e-12 * r.mse_scaled.abs().max(1.0));
        if r.phi > 1e-6 {
            let bound = 9.0 * r.s as f64 * r.lambda * r.lambda / r.phi_sq;
            assert!((r.bound - bound).abs() <= 1e-12 * bound);
            assert!((r.ratio_bound_over_mse * r.ratio_mse_over_bound - 1.0).abs() < 1e-12);
            let threshold = error_bound_at_threshold(r.sigma_sq, r.s, r.n, r.p, cfg.delta, r.phi_sq);
            assert!((r.bound - threshold).abs() <= 1e-10 * threshold);
        } else {
            assert!(r.bound.is_infinite() && r.condition_fails);
        }
    }
}

#[test]
fn grids_are_reproducible_across_thread_counts() {
    let cfg = small_grid();
    let a = run_grid_collect(&cfg).unwrap();
    let b = run_grid_collect(&cfg).unwrap();
    assert_eq!(to_csv(&a), to_csv(&b));
    let mut c = run_grid_collect(&SimConfig { threads: 3, ..cfg }).unwrap();
    let mut a = a;
    a.sort_by_key(|r| r.sort_key());
    c.sort_by_key(|r| r.sort_key());
    assert_eq!(to_csv(&a), to_csv(&c));
}

#[test]
fn branch_and_bound_cells_match_enumeration_cells() {
    let cfg = SimConfig { n_grid: vec![40], p_grid: vec![10], replications: 2, ..small_grid() };
    let bnb = SimConfig {
        solver: SolverChoice::Bnb(compatkit::bnb::BnbConfig { time_limit: None, ..Default::default() }),
        ..cfg.clone()
    };
    for (e, b) in run_grid_collect(&cfg).unwrap().iter().zip(run_grid_collect(&bnb).unwrap().iter()) {
        assert_eq!(e.sort_key(), b.sort_key());
        assert!((e.phi_sq - b.phi_sq).abs() < 1e-5);
        assert_eq!(e.mse, b.mse);
    }
}

#[test]
fn threshold_bound_identity() {
    let mut rng = common::rng(99);
    for _ in 0..100 {
        let sigma: f64 = rng.gen_range(0.01..10.0);
        let s = rng.gen_range(1..20);
        let n = rng.gen_range(10..5000);
        let p = rng.gen_range(s..5000);
        let delta: f64 = rng.gen_range(0.001..1.0);
        let phi_sq: f64 = rng.gen_range(0.01..2.0);
        let lambda = lambda_bound(sigma, n, p, delta).unwrap();
        let direct = error_bound(s, lambda, phi_sq, true);
        let closed = 72.0 * sigma * sigma * s as f64 * (1.0 + (p as f64 / delta).ln()) / (n as f64 * phi_sq);
        assert!((direct - closed).abs() <= 1e-10 * closed);
        assert!((error_bound_at_threshold(sigma * sigma, s, n, p, delta, phi_sq) - closed).abs() <= 1e-10 * closed);
    }
}

#[test]
fn oracle_fit_has_zero_error() {
    let compat = CompatResult {
        phi_sq: 0.25,
        phi: 0.5,
        minimizer: vec![],
        status: CompatStatus::Optimal,
        lower_bound: 0.25,
        wall_time: 0.0,
        subproblems_solved: 1,
        pattern: None,
    };
    let r = assemble(100, 20, 5, 0.1, 1.0, 0.0, &compat, 0.0);
    assert!((r.bound - 1.8).abs() < 1e-12);
    assert_eq!(r.ratio_mse_over_bound, 0.0);
    assert!(r.ratio_bound_over_mse.is_infinite());
    assert!((r.bound_scaled - scale_factor(100, 20) * 1.8).abs() < 1e-12);
    let zero = CompatResult { phi_sq: 1e-9, phi: 0.0, status: CompatStatus::ZeroDetected, ..compat };
    let r = assemble(100, 20, 5, 0.1, 1.0, 0.3, &zero, 0.0);
    assert!(r.bound.is_infinite() && r.condition_fails);
    assert_eq!(r.ratio_mse_over_bound, 0.0);
    let csv = String::from_utf8(to_csv(&[r])).unwrap();
    assert!(csv.contains(",inf,"), "{csv}");
}

#[test]
fn curve_is_constant_on_replicated_rows() {
    let base = common::gaussian_design(12, 6, 4);
    let reps = 5;
    let full = DMatrix::from_fn(12 * reps, 6, |i, j| base.values()[(i % 12, j)]);
    let x = DesignMatrix::new(full).unwrap();
    let y: Vec<f64> = (0..12 * reps).map(|i| base.values()[(i % 12, 0)] + 0.1 * (i % 12) as f64).collect();
    let active = ActiveSet::new(vec![0, 2], 6).unwrap();
    let beta_ref = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let steps = [12, 24, 36, 60];
    let spec = CurveSpec {
        active: &active,
        n_steps: &steps,
        sigma_sq: 0.01,
        beta_ref: &beta_ref,
        delta: 0.1,
        solver: &SolverChoice::Enum,
    };
    let pts = phi_curve(&x, &y, &spec).unwrap();
    assert_eq!(pts.len(), 4);
    for pt in &pts[1..] {
        assert!((pt.phi_sq - pts[0].phi_sq).abs() < 1e-8, "{} vs {}", pt.phi_sq, pts[0].phi_sq);
    }
}

#[test]
fn curve_reports_zero_on_tiny_prefixes() {
    let data = gen_compound_data(200, 30, 0.4, 3, (1.0, 2.0), 1.0, 2).unwrap();
    let beta_ref = data.beta.clone();
    let steps = [5, 200];
    let spec = CurveSpec {
        active: &data.support,
        n_steps: &steps,
        sigma_sq: data.sigma_sq,
        beta_ref: &beta_ref,
        delta: 0.1,
        solver: &SolverChoice::Enum,
    };
    let pts = phi_curve(&data.x, &data.y, &spec).unwrap();
    assert_eq!(pts[0].phi, 0.0);
    assert!(pts[0].bound.is_infinite() && pts[0].condition_fails);
    assert!(pts[1].phi > pts[0].phi && pts[1].bound.is_finite());
}

#[test]
fn prefix_must_exceed_the_support_size() {
    let data = gen_compound_data(50, 10, 0.0, 4, (1.0, 2.0), 1.0, 1).unwrap();
    let steps = [4];
    let spec = CurveSpec {
        active: &data.support,
        n_steps: &steps,
        sigma_sq: 1.0,
        beta_ref: &data.beta,
        delta: 0.1,
        solver: &SolverChoice::Enum,
    };
    assert_eq!(phi_curve(&data.x, &data.y, &spec).unwrap_err(), Error::PrefixTooSmall { n: 4, min: 5 });
}
