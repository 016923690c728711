use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use compatkit::analytic::{population_phi_sq, CompoundSymmetry};
use compatkit::bnb::{phi_bnb, BnbConfig, Formulation, TracePoint};
use compatkit::enumerate::{phi_enumerate, EnumConfig};
use compatkit::error::Error;
use compatkit::io::{parse_index_list, read_index_list, read_matrix_csv, read_vector_csv};
use compatkit::lasso::{self, LassoConfig};
use compatkit::model::{ActiveSet, CompatResult, DesignMatrix, GramMatrix, ZERO_THRESHOLD};
use compatkit::sim::{phi_curve as curve, run_grid, CurveSpec, RecordWriter, SimConfig, SolverChoice};

use crate::args::{AnalyticArgs, CurveArgs, EstimateArgs, Merge, PhiMiqpArgs, PhiQpArgs, SimulateArgs};
use crate::manifest::Recorder;
use crate::CliError;

type CliResult<T> = std::result::Result<T, CliError>;

fn require<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required argument --{flag}")))
}

/// Reads `--config` (if any) and lays the command-line flags over it.
fn resolve<T: Merge + DeserializeOwned + Default>(flags: T, config: Option<&Path>, rec: &mut Recorder) -> CliResult<T> {
    let Some(path) = config else { return Ok(flags) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let base: T = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    rec.input(path)?;
    Ok(base.merge(flags))
}

fn create(path: &Path) -> CliResult<std::fs::File> {
    Ok(std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?)
}

/// Writes pretty JSON to `out`, or to stdout when no path is given.
fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    match out {
        Some(path) => create(path)?.write_all(text.as_bytes()).map_err(Error::from)?,
        None => std::io::stdout().write_all(text.as_bytes()).map_err(Error::from)?,
    }
    Ok(())
}

fn finish<C: Serialize>(rec: Recorder, config: &C, out: Option<&Path>) -> CliResult<()> {
    if let Some(path) = out {
        rec.finish(config, path)?;
    }
    Ok(())
}

fn load_gram(path: &Path, rec: &mut Recorder) -> CliResult<GramMatrix> {
    rec.input(path)?;
    Ok(GramMatrix::new(read_matrix_csv(path)?)?)
}

fn load_active(arg: &str, p: usize, rec: &mut Recorder) -> CliResult<ActiveSet> {
    if Path::new(arg).is_file() {
        rec.input(Path::new(arg))?;
    }
    Ok(ActiveSet::from_one_based(&read_index_list(arg)?, p)?)
}

fn load_design(path: &Path, rec: &mut Recorder) -> CliResult<DesignMatrix> {
    rec.input(path)?;
    Ok(DesignMatrix::new(read_matrix_csv(path)?)?)
}

fn load_vector(path: &Path, rec: &mut Recorder) -> CliResult<Vec<f64>> {
    rec.input(path)?;
    Ok(read_vector_csv(path)?)
}

#[derive(Serialize)]
struct PhiReport<'a> {
    s: usize,
    p: usize,
    active: Vec<usize>,
    zero_threshold: f64,
    condition_holds: bool,
    #[serde(flatten)]
    result: &'a CompatResult,
}

impl<'a> PhiReport<'a> {
    fn new(active: &ActiveSet, result: &'a CompatResult) -> Self {
        PhiReport {
            s: active.s(),
            p: active.p(),
            active: active.one_based(),
            zero_threshold: ZERO_THRESHOLD,
            condition_holds: result.condition_holds(),
            result,
        }
    }
}

fn check_zero(holds: bool, fail_on_zero: bool) -> CliResult<()> {
    if fail_on_zero && !holds {
        return Err(CliError::ConditionFails("compatibility constant is zero".into()));
    }
    Ok(())
}

pub fn phi_qp(flags: PhiQpArgs) -> CliResult<()> {
    let mut rec = Recorder::start("phi-qp");
    let mut a = resolve(flags.clone(), flags.config.as_deref(), &mut rec)?;
    a.threads = Some(a.threads.unwrap_or(1));
    let gram = load_gram(&require(a.gram.clone(), "gram")?, &mut rec)?;
    let active = load_active(&require(a.active.clone(), "active")?, gram.p(), &mut rec)?;
    let cfg = EnumConfig { threads: a.threads.unwrap_or(1), early_stop: a.early_stop, ..EnumConfig::default() };
    if cfg.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let mut result = phi_enumerate(&gram, &active, &cfg)?;
    if a.no_wall_time {
        result.wall_time = 0.0;
    }
    emit_json(&PhiReport::new(&active, &result), a.out.as_deref())?;
    finish(rec, &a, a.out.as_deref())?;
    check_zero(result.condition_holds(), a.fail_on_zero)
}

#[derive(Serialize)]
struct MiqpReport<'a> {
    #[serde(flatten)]
    phi: PhiReport<'a>,
    formulation: Formulation,
    #[serde(rename = "K")]
    k: usize,
    seed: u64,
    incumbent: f64,
    gap: f64,
    nodes_expanded: usize,
    warm_start_value: f64,
    trace: Vec<TracePoint>,
}

pub fn phi_miqp(flags: PhiMiqpArgs) -> CliResult<()> {
    let mut rec = Recorder::start("phi-miqp");
    let a = resolve(flags.clone(), flags.config.as_deref(), &mut rec)?;
    let seed = require(a.seed, "seed")?;
    let gram = load_gram(&require(a.gram.clone(), "gram")?, &mut rec)?;
    let active = load_active(&require(a.active.clone(), "active")?, gram.p(), &mut rec)?;
    let defaults = BnbConfig::default();
    let formulation = match &a.formulation {
        Some(f) => f.parse::<Formulation>().map_err(|e| CliError::Usage(e.to_string()))?,
        None => defaults.formulation,
    };
    let cfg = BnbConfig {
        formulation,
        big_m: a.big_m.unwrap_or(defaults.big_m),
        warm_starts_k: a.k.unwrap_or(defaults.warm_starts_k),
        time_limit: if a.no_time_limit { None } else { a.time_limit.or(defaults.time_limit) },
        gap_tol: a.gap_tol.unwrap_or(defaults.gap_tol),
        node_limit: a.node_limit.unwrap_or(defaults.node_limit),
        seed,
        ..defaults
    };
    let a = PhiMiqpArgs {
        formulation: Some(format!("{formulation:?}").to_lowercase()),
        k: Some(cfg.warm_starts_k),
        time_limit: cfg.time_limit,
        gap_tol: Some(cfg.gap_tol),
        node_limit: Some(cfg.node_limit),
        big_m: Some(cfg.big_m),
        ..a
    };
    let mut outcome = phi_bnb(&gram, &active, &cfg)?;
    if a.no_wall_time {
        outcome.result.wall_time = 0.0;
        outcome.trace.iter_mut().for_each(|t| t.time = 0.0);
    }
    let report = MiqpReport {
        phi: PhiReport::new(&active, &outcome.result),
        formulation,
        k: cfg.warm_starts_k,
        seed,
        incumbent: outcome.result.phi_sq,
        gap: outcome.gap,
        nodes_expanded: outcome.nodes_expanded,
        warm_start_value: outcome.warm_start_value,
        trace: outcome.trace.clone(),
    };
    emit_json(&report, a.out.as_deref())?;
    finish(rec, &a, a.out.as_deref())?;
    check_zero(outcome.result.condition_holds(), a.fail_on_zero)
}

#[derive(Serialize)]
struct AnalyticReport {
    rho: f64,
    s: usize,
    p: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    exact: Option<f64>,
    lower: f64,
    upper: f64,
    phi_lower: f64,
    phi_upper: f64,
    /// True for odd s, where `upper` is attained by a feasible vector but is
    /// not known to be the minimum.
    upper_is_bound: bool,
}

pub fn analytic_bound(flags: AnalyticArgs) -> CliResult<()> {
    let mut rec = Recorder::start("analytic-bound");
    let a = resolve(flags.clone(), flags.config.as_deref(), &mut rec)?;
    let (rho, s, p) = (require(a.rho, "rho")?, require(a.s, "s")?, require(a.p, "p")?);
    let cs = CompoundSymmetry::new(rho, p)?;
    let v = population_phi_sq(&cs, s)?;
    let report = AnalyticReport {
        rho,
        s,
        p,
        exact: v.exact(),
        lower: v.lower,
        upper: v.upper(),
        phi_lower: v.lower.sqrt(),
        phi_upper: v.upper().sqrt(),
        upper_is_bound: v.exact().is_none(),
    };
    emit_json(&report, a.out.as_deref())?;
    finish(rec, &a, a.out.as_deref())
}

#[derive(Serialize)]
struct EstimateReport {
    n: usize,
    p: usize,
    delta: f64,
    folds: usize,
    seed: u64,
    /// 1-based indices of the estimated active set.
    active: Vec<usize>,
    s_hat: usize,
    sigma_sq_hat: f64,
    lambda_cv: f64,
    lambda_train: f64,
    s_cv: usize,
    beta_train: Vec<f64>,
    beta_cv: Vec<f64>,
}

pub fn estimate_active_set(flags: EstimateArgs) -> CliResult<()> {
    let mut rec = Recorder::start("estimate-active-set");
    let mut a = resolve(flags.clone(), flags.config.as_deref(), &mut rec)?;
    let seed = require(a.seed, "seed")?;
    let x = load_design(&require(a.x.clone(), "x")?, &mut rec)?;
    let y = load_vector(&require(a.y.clone(), "y")?, &mut rec)?;
    let delta = *a.delta.get_or_insert(0.1);
    let folds = *a.folds.get_or_insert(10);
    let est = lasso::estimate_active_set(&x, &y, delta, folds, seed, &LassoConfig::default())?;
    let report = EstimateReport {
        n: x.n(),
        p: x.p(),
        delta,
        folds,
        seed,
        active: est.s_hat.iter().map(|j| j + 1).collect(),
        s_hat: est.s_hat.len(),
        sigma_sq_hat: est.sigma_sq_hat,
        lambda_cv: est.lambda_cv,
        lambda_train: est.lambda_train,
        s_cv: est.s_cv,
        beta_train: est.beta_train,
        beta_cv: est.beta_cv,
    };
    emit_json(&report, a.out.as_deref())?;
    finish(rec, &a, a.out.as_deref())
}

pub fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut rec = Recorder::start("simulate");
    if a.paper_grid && a.config.is_some() {
        return Err(CliError::Usage("--paper-grid and --config are mutually exclusive".into()));
    }
    let mut seed_given = a.seed.is_some();
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            seed_given |= value.get("seed").is_some();
            rec.input(path)?;
            serde_json::from_value::<SimConfig>(value).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        }
        None if a.paper_grid => {
            log::warn!("the full grid includes p = 5000 cells and can take many hours");
            SimConfig::paper_grid()
        }
        None => SimConfig::desk_grid(),
    };
    if !seed_given {
        return Err(CliError::Usage("missing required argument --seed (or \"seed\" in --config)".into()));
    }
    if let Some(t) = a.threads {
        cfg.threads = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    if a.no_wall_time {
        cfg.record_wall_time = false;
    }
    cfg.validate()?;
    log::info!("running {} cells", cfg.n_records());
    match &a.out {
        Some(path) => {
            let mut w = RecordWriter::new(create(path)?);
            run_grid(&cfg, |r| w.write(r))?;
            w.finish()?;
        }
        None => {
            let mut w = RecordWriter::new(std::io::stdout().lock());
            run_grid(&cfg, |r| w.write(r))?;
            w.finish()?;
        }
    }
    finish(rec, &cfg, a.out.as_deref())
}

/// Expands "100,200,...,1000" style lists; "..." continues the step between
/// the two preceding values up to the following one.
pub fn parse_steps(text: &str) -> Result<Vec<usize>, String> {
    let tokens: Vec<&str> = text.split(',').map(str::trim).filter(|t| !t.is_empty()).collect();
    let mut out: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] == "..." {
            let end: usize = tokens
                .get(i + 1)
                .ok_or("'...' must be followed by an end value")?
                .parse()
                .map_err(|e| format!("bad step: {e}"))?;
            let (a, b) = match out.as_slice() {
                [.., a, b] if b > a => (*a, *b),
                _ => return Err("'...' needs two increasing values before it".into()),
            };
            let mut next = b + (b - a);
            while next < end {
                out.push(next);
                next += b - a;
            }
            out.push(end);
            i += 2;
        } else {
            out.push(tokens[i].parse().map_err(|e| format!("bad step '{}': {e}", tokens[i]))?);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("no steps given".into());
    }
    Ok(out)
}

/// Fields of an estimate-active-set output that seed phi-curve defaults.
struct EstimateFile {
    active: Vec<usize>,
    sigma_sq_hat: Option<f64>,
    beta_train: Option<Vec<f64>>,
}

fn read_active_arg(arg: &str, rec: &mut Recorder) -> CliResult<EstimateFile> {
    let path = Path::new(arg);
    if !path.is_file() {
        return Ok(EstimateFile { active: parse_index_list(arg)?, sigma_sq_hat: None, beta_train: None });
    }
    rec.input(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let active = parse_index_list(&text)?;
    let obj = serde_json::from_str::<serde_json::Value>(&text).ok();
    let field = |k: &str| obj.as_ref().and_then(|o| o.get(k)).cloned();
    Ok(EstimateFile {
        active,
        sigma_sq_hat: field("sigma_sq_hat").and_then(|v| v.as_f64()),
        beta_train: field("beta_train").and_then(|v| serde_json::from_value(v).ok()),
    })
}

pub fn phi_curve(flags: CurveArgs) -> CliResult<()> {
    let mut rec = Recorder::start("phi-curve");
    let a = resolve(flags.clone(), flags.config.as_deref(), &mut rec)?;
    let x = load_design(&require(a.x.clone(), "x")?, &mut rec)?;
    let y = load_vector(&require(a.y.clone(), "y")?, &mut rec)?;
    let est = read_active_arg(&require(a.active.clone(), "active")?, &mut rec)?;
    let active = ActiveSet::from_one_based(&est.active, x.p())?;
    let steps = parse_steps(&require(a.steps.clone(), "steps")?).map_err(CliError::Usage)?;
    let sigma_sq = require(a.sigma_sq.or(est.sigma_sq_hat), "sigma-sq")?;
    let beta_ref = match (&a.beta_ref, est.beta_train) {
        (Some(path), _) => load_vector(path, &mut rec)?,
        (None, Some(b)) => b,
        (None, None) => return Err(CliError::Usage("missing required argument --beta-ref".into())),
    };
    let solver = match a.solver.as_deref().unwrap_or("enum") {
        "enum" => SolverChoice::Enum,
        "bnb" => SolverChoice::Bnb(BnbConfig {
            seed: require(a.seed, "seed")?,
            warm_starts_k: a.k.unwrap_or(20),
            time_limit: a.time_limit.or(BnbConfig::default().time_limit),
            ..BnbConfig::default()
        }),
        other => return Err(CliError::Usage(format!("unknown solver '{other}' (expected enum or bnb)"))),
    };
    let spec = CurveSpec {
        active: &active,
        n_steps: &steps,
        sigma_sq,
        beta_ref: &beta_ref,
        delta: a.delta.unwrap_or(0.1),
        solver: &solver,
    };
    let points = curve(&x, &y, &spec)?;
    let out: Option<PathBuf> = a.out.clone();
    match &out {
        Some(path) => {
            let mut w = RecordWriter::new(create(path)?);
            points.iter().try_for_each(|pt| w.write(pt))?;
            w.finish()?;
        }
        None => {
            let mut w = RecordWriter::new(std::io::stdout().lock());
            points.iter().try_for_each(|pt| w.write(pt))?;
            w.finish()?;
        }
    }
    finish(rec, &a, out.as_deref())?;
    check_zero(points.iter().all(|pt| !pt.condition_fails), a.fail_on_zero)
}
