//! Command-line arguments. Every subcommand also accepts `--config file.json`
//! whose keys are the flag names with underscores; flags given on the command
//! line take precedence over the file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Deserializer, Serialize};

#[derive(Debug, Parser)]
#[command(name = "compatkit", version, about = "Compute the lasso compatibility constant and run its experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact φ² by enumerating sign patterns (s ≤ 20).
    PhiQp(PhiQpArgs),
    /// φ² by branch and bound with warm starts and a time limit.
    PhiMiqp(PhiMiqpArgs),
    /// Population φ² for a compound-symmetry covariance.
    AnalyticBound(AnalyticArgs),
    /// Cross-validated lasso, noise estimate and active-set estimate.
    EstimateActiveSet(EstimateArgs),
    /// Run the Monte Carlo grid and stream records to CSV.
    Simulate(SimulateArgs),
    /// φ_n on growing prefixes of a data set.
    PhiCurve(CurveArgs),
    /// Run the fast built-in checks and print a pass/fail table.
    Selftest,
}

/// Values from a config file are overridden by those given as flags.
pub trait Merge: Sized {
    fn merge(self, over: Self) -> Self;
}

macro_rules! merge_impl {
    ($ty:ty; opt: $($o:ident),*; flag: $($b:ident),*) => {
        impl Merge for $ty {
            fn merge(self, over: Self) -> Self {
                Self {
                    $($o: over.$o.or(self.$o),)*
                    $($b: over.$b || self.$b,)*
                    config: over.config,
                }
            }
        }
    };
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ListSpec {
    Text(String),
    Items(Vec<u64>),
}

/// Accepts either "1,4,7" or [1, 4, 7] in config files.
fn list_spec<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    Ok(Option::<ListSpec>::deserialize(d)?.map(|l| match l {
        ListSpec::Text(t) => t,
        ListSpec::Items(v) => v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
    }))
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhiQpArgs {
    /// Gram matrix as CSV (p rows of p values).
    #[arg(long)]
    pub gram: Option<PathBuf>,
    /// 1-based active set: "1,4,7", a JSON array, or a JSON file.
    #[arg(long)]
    #[serde(deserialize_with = "list_spec")]
    pub active: Option<String>,
    /// Worker threads for the pattern enumeration.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Stop at the first pattern with φ² below the zero threshold.
    #[arg(long)]
    pub early_stop: bool,
    /// Exit with code 4 when φ = 0 is detected.
    #[arg(long)]
    pub fail_on_zero: bool,
    /// Report wall_time as 0 so repeated runs are byte-identical.
    #[arg(long)]
    pub no_wall_time: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

merge_impl!(PhiQpArgs; opt: gram, active, threads, out; flag: early_stop, fail_on_zero, no_wall_time);

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhiMiqpArgs {
    #[arg(long)]
    pub gram: Option<PathBuf>,
    #[arg(long)]
    #[serde(deserialize_with = "list_spec")]
    pub active: Option<String>,
    /// bigm or sos1.
    #[arg(long)]
    pub formulation: Option<String>,
    /// Number of random sign vectors tried before the tree search.
    #[arg(long = "K")]
    #[serde(rename = "K", alias = "k")]
    pub k: Option<usize>,
    /// Wall-clock limit in seconds (default 60).
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Run the tree search to completion.
    #[arg(long, conflicts_with = "time_limit")]
    pub no_time_limit: bool,
    /// Seed for the warm-start sign vectors (required).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gap_tol: Option<f64>,
    #[arg(long)]
    pub node_limit: Option<usize>,
    #[arg(long)]
    pub big_m: Option<f64>,
    #[arg(long)]
    pub fail_on_zero: bool,
    #[arg(long)]
    pub no_wall_time: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

merge_impl!(PhiMiqpArgs;
    opt: gram, active, formulation, k, time_limit, seed, gap_tol, node_limit, big_m, out;
    flag: no_time_limit, fail_on_zero, no_wall_time);

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticArgs {
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

merge_impl!(AnalyticArgs; opt: rho, s, p, out; flag: );

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateArgs {
    /// Design matrix as CSV, one observation per row.
    #[arg(long)]
    pub x: Option<PathBuf>,
    /// Response as a single CSV column.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// Confidence parameter of the penalty level (default 0.1).
    #[arg(long)]
    pub delta: Option<f64>,
    /// Cross-validation folds (default 10).
    #[arg(long)]
    pub folds: Option<usize>,
    /// Seed for the fold assignment (required).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

merge_impl!(EstimateArgs; opt: x, y, delta, folds, seed, out; flag: );

/// Here `--config` is a full simulation config; the flags override its fields.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the full published grid instead of the desk-scale one.
    #[arg(long)]
    pub paper_grid: bool,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Write wall_time as 0 so repeated runs are byte-identical.
    #[arg(long)]
    pub no_wall_time: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveArgs {
    #[arg(long)]
    pub x: Option<PathBuf>,
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// 1-based active set, or the JSON written by estimate-active-set (which
    /// also supplies defaults for --sigma-sq and --beta-ref).
    #[arg(long)]
    #[serde(deserialize_with = "list_spec")]
    pub active: Option<String>,
    /// Prefix sizes, e.g. "100,200,...,1000".
    #[arg(long)]
    #[serde(deserialize_with = "list_spec")]
    pub steps: Option<String>,
    #[arg(long)]
    pub sigma_sq: Option<f64>,
    /// Reference coefficients as a CSV column.
    #[arg(long)]
    pub beta_ref: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// enum (default) or bnb.
    #[arg(long)]
    pub solver: Option<String>,
    /// Seed for the branch-and-bound warm starts.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "K")]
    #[serde(rename = "K", alias = "k")]
    pub k: Option<usize>,
    #[arg(long)]
    pub time_limit: Option<f64>,
    #[arg(long)]
    pub fail_on_zero: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

merge_impl!(CurveArgs;
    opt: x, y, active, steps, sigma_sq, beta_ref, delta, solver, seed, k, time_limit, out;
    flag: fail_on_zero);
