//! Fast checks against known values, printed as a pass/fail table.

use compatkit::analytic::{population_phi_sq, CompoundSymmetry};
use compatkit::bnb::{phi_bnb, BnbConfig, Formulation};
use compatkit::enumerate::{phi_enumerate, EnumConfig};
use compatkit::error::Result;
use compatkit::lasso::lambda_bound;
use compatkit::model::{ActiveSet, GramMatrix};
use compatkit::sim::gen_compound_data;

use crate::CliError;

struct Check {
    name: &'static str,
    detail: String,
    pass: bool,
}

fn identity_gram() -> Result<Check> {
    let r = phi_enumerate(&GramMatrix::identity(10), &ActiveSet::from_one_based(&[1, 2, 3], 10)?, &EnumConfig::default())?;
    Ok(Check { name: "identity Gram", detail: format!("phi_sq = {:.9}", r.phi_sq), pass: (r.phi_sq - 1.0).abs() <= 1e-5 })
}

fn compound_even() -> Result<Check> {
    let cs = CompoundSymmetry::new(0.4, 20)?;
    let r = phi_enumerate(&cs.gram(), &ActiveSet::leading(4, 20)?, &EnumConfig::default())?;
    let exact = population_phi_sq(&cs, 4)?.upper();
    Ok(Check {
        name: "compound symmetry, even s",
        detail: format!("phi_sq = {:.9}, expected {exact}", r.phi_sq),
        pass: (r.phi_sq - exact).abs() <= 1e-4,
    })
}

fn compound_odd() -> Result<Check> {
    let cs = CompoundSymmetry::new(0.4, 20)?;
    let r = phi_enumerate(&cs.gram(), &ActiveSet::leading(3, 20)?, &EnumConfig::default())?;
    let v = population_phi_sq(&cs, 3)?;
    Ok(Check {
        name: "compound symmetry, odd s",
        detail: format!("phi_sq = {:.9} in [{:.9}, {:.9}]", r.phi_sq, v.lower, v.upper()),
        pass: r.phi_sq >= v.lower - 1e-6 && r.phi_sq <= v.upper() + 1e-6,
    })
}

fn bnb_matches_enumeration() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for (seed, s) in [(1u64, 3usize), (2, 4), (3, 5)] {
        let data = gen_compound_data(40, 12, 0.4, s, (1.0, 2.0), 1.0, seed)?;
        let gram = GramMatrix::from_design(&data.x);
        let active = ActiveSet::leading(s, 12)?;
        let exact = phi_enumerate(&gram, &active, &EnumConfig::default())?.phi_sq;
        for formulation in [Formulation::BigM, Formulation::Sos1] {
            let cfg = BnbConfig { formulation, time_limit: None, seed, ..BnbConfig::default() };
            let got = phi_bnb(&gram, &active, &cfg)?.result.phi_sq;
            worst = worst.max((got - exact).abs());
        }
    }
    Ok(Check {
        name: "branch and bound vs enumeration",
        detail: format!("max |diff| = {worst:.2e}"),
        pass: worst <= 1e-5,
    })
}

fn lambda_formula() -> Result<Check> {
    let got = lambda_bound(1.268e-4f64.sqrt(), 1009, 475, 0.1)?;
    let rel = (got - 3.085e-3).abs() / 3.085e-3;
    Ok(Check { name: "penalty level formula", detail: format!("lambda = {got:.6e}"), pass: rel <= 1e-3 })
}

pub fn run() -> std::result::Result<(), CliError> {
    let checks: [(&str, fn() -> Result<Check>); 5] = [
        ("identity Gram", identity_gram),
        ("compound symmetry, even s", compound_even),
        ("compound symmetry, odd s", compound_odd),
        ("branch and bound vs enumeration", bnb_matches_enumeration),
        ("penalty level formula", lambda_formula),
    ];
    let mut failed = 0;
    println!("{:<34} {:<6} detail", "check", "result");
    for (name, f) in checks {
        let c = f().unwrap_or_else(|e| Check { name, detail: format!("error: {e}"), pass: false });
        if !c.pass {
            failed += 1;
        }
        println!("{:<34} {:<6} {}", c.name, if c.pass { "PASS" } else { "FAIL" }, c.detail);
    }
    if failed > 0 {
        return Err(CliError::SelftestFailed(failed));
    }
    Ok(())
}
