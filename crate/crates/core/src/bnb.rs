//! Branch and bound over the signs of v_S.
//!
//! v_S is split as v⁺ − v⁻ with v± ≥ 0 and Σ(v⁺ + v⁻) = 1. At most one of
//! v⁺_j, v⁻_j may be nonzero; the Sos1 formulation enforces this by branching
//! alone, the BigM formulation through a relaxed indicator b_j with
//! v⁺_j ≤ M·b_j and v⁻_j ≤ M·(1 − b_j). A node fixes some signs; a leaf fixes
//! all of them and is exactly the fixed-sign QP of the enumeration.
//!
//! Note that while any index is free both relaxations reach objective 0 by
//! splitting that index evenly, so bounds only become informative at leaves.
//! The search is then an enumeration that can stop early on a zero incumbent
//! or a limit, which is what the anytime contract asks for.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enumerate::{phi_for_pattern, FixedSignSubproblem};
use crate::error::{Error, Result};
use crate::model::{ActiveSet, CompatResult, CompatStatus, GramMatrix, SignPattern, CONE_RADIUS, ZERO_THRESHOLD};
use crate::qp::{solve_qp, CsrMatrix, QpProblem, QpSolution, QpStatus, ToleranceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    BigM,
    Sos1,
}

impl std::str::FromStr for Formulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bigm" | "big-m" | "big_m" => Ok(Formulation::BigM),
            "sos1" => Ok(Formulation::Sos1),
            other => Err(Error::InvalidConfig(format!("unknown formulation '{other}' (expected bigm or sos1)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BnbConfig {
    pub formulation: Formulation,
    /// M = 1 is exact: v± ≤ 1 follows from Σ(v⁺ + v⁻) = 1.
    pub big_m: f64,
    pub warm_starts_k: usize,
    /// Wall-clock limit in seconds; `None` runs to completion.
    pub time_limit: Option<f64>,
    pub gap_tol: f64,
    pub node_limit: usize,
    pub seed: u64,
    #[serde(skip)]
    pub tol: ToleranceConfig,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            formulation: Formulation::Sos1,
            big_m: 1.0,
            warm_starts_k: 20,
            time_limit: Some(60.0),
            gap_tol: 1e-6,
            node_limit: 1_000_000,
            seed: 0,
            tol: ToleranceConfig::default(),
        }
    }
}

impl BnbConfig {
    fn validate(&self) -> Result<()> {
        if !(self.big_m > 0.0) || !self.big_m.is_finite() {
            return Err(Error::InvalidConfig(format!("big_m must be positive, got {}", self.big_m)));
        }
        if !(self.gap_tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("gap_tol must be nonnegative, got {}", self.gap_tol)));
        }
        if let Some(t) = self.time_limit {
            if !(t >= 0.0) {
                return Err(Error::InvalidConfig(format!("time_limit must be nonnegative, got {t}")));
            }
        }
        if self.node_limit == 0 {
            return Err(Error::InvalidConfig("node_limit must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fix {
    PlusOnly,
    MinusOnly,
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbNode {
    pub fixed: Vec<Fix>,
    /// Lower bound valid for every completion; the parent's relaxation value
    /// until this node's own relaxation is solved.
    pub relax_bound: f64,
    pub depth: usize,
    pub id: usize,
}

impl BnbNode {
    pub fn root(s: usize) -> Self {
        BnbNode { fixed: vec![Fix::Free; s], relax_bound: 0.0, depth: 0, id: 0 }
    }

    pub fn is_leaf(&self) -> bool {
        self.fixed.iter().all(|&f| f != Fix::Free)
    }

    /// The sign pattern of a leaf.
    pub fn pattern(&self) -> Option<SignPattern> {
        let signs = self
            .fixed
            .iter()
            .map(|f| match f {
                Fix::PlusOnly => Some(1),
                Fix::MinusOnly => Some(-1),
                Fix::Free => None,
            })
            .collect::<Option<Vec<i8>>>()?;
        SignPattern::new(signs).ok()
    }
}

struct Queued(BnbNode);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // max-heap: the "greatest" node is popped first
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .relax_bound
            .total_cmp(&self.0.relax_bound)
            .then(self.0.depth.cmp(&other.0.depth))
            .then(other.0.id.cmp(&self.0.id))
    }
}

/// Result of the Bernoulli warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    /// +∞ when no pattern was drawn.
    pub phi_sq: f64,
    pub minimizer: Option<Vec<f64>>,
    pub pattern: Option<SignPattern>,
    /// Distinct canonical patterns solved.
    pub solved: Vec<(SignPattern, f64, Vec<f64>)>,
}

/// k random sign vectors, each sign +1 or −1 with probability ½, read off the
/// bits of a ChaCha8 stream.
pub fn draw_sign_vectors(s: usize, k: usize, seed: u64) -> Vec<SignPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let mut signs = Vec::with_capacity(s);
            while signs.len() < s {
                let word = rng.next_u64();
                for b in 0..64 {
                    if signs.len() == s {
                        break;
                    }
                    signs.push(if (word >> b) & 1 == 1 { -1 } else { 1 });
                }
            }
            SignPattern::new(signs).expect("s >= 1")
        })
        .collect()
}

/// Solves the fixed-sign QP for k random sign vectors and keeps the best.
/// Duplicates, including global flips, are solved once.
pub fn warm_start(
    gram: &GramMatrix,
    active: &ActiveSet,
    k: usize,
    seed: u64,
    tol: &ToleranceConfig,
) -> Result<WarmStart> {
    let mut seen: Vec<SignPattern> = Vec::new();
    for z in draw_sign_vectors(active.s(), k, seed) {
        let c = z.to_canonical();
        if !seen.contains(&c) {
            seen.push(c);
        }
    }
    let mut out = WarmStart { phi_sq: f64::INFINITY, minimizer: None, pattern: None, solved: Vec::new() };
    for z in seen {
        let (val, v) = phi_for_pattern(&FixedSignSubproblem { gram, active, signs: &z }, tol)?;
        if val < out.phi_sq {
            out.phi_sq = val;
            out.minimizer = Some(v.clone());
            out.pattern = Some(z.clone());
        }
        out.solved.push((z, val, v));
    }
    Ok(out)
}

struct Layout {
    s: usize,
    r: usize,
    bigm: bool,
}

impl Layout {
    fn vplus(&self, j: usize) -> usize {
        j
    }
    fn vminus(&self, j: usize) -> usize {
        self.s + j
    }
    fn w(&self, t: usize) -> usize {
        2 * self.s + t
    }
    fn u(&self, t: usize) -> usize {
        2 * self.s + self.r + t
    }
    fn b(&self, j: usize) -> usize {
        2 * self.s + 2 * self.r + j
    }
    fn n_vars(&self) -> usize {
        2 * self.s + 2 * self.r + if self.bigm { self.s } else { 0 }
    }
}

/// The continuous relaxation at a node.
pub fn build_relaxation(
    node: &BnbNode,
    formulation: Formulation,
    big_m: f64,
    gram: &GramMatrix,
    active: &ActiveSet,
) -> Result<QpProblem> {
    let s = active.s();
    if node.fixed.len() != s {
        return Err(Error::InvalidConfig(format!("node fixes {} signs, active set has {s}", node.fixed.len())));
    }
    let comp = active.complement();
    let r = comp.len();
    let lay = Layout { s, r, bigm: formulation == Formulation::BigM };
    let m = lay.n_vars();

    // v = T x with v_S = v⁺ − v⁻ and v_{S^c} = w
    let mut cols: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * s + r);
    for (j, &idx) in active.indices().iter().enumerate() {
        cols.push((lay.vplus(j), idx, 1.0));
        cols.push((lay.vminus(j), idx, -1.0));
    }
    for (t, &idx) in comp.iter().enumerate() {
        cols.push((lay.w(t), idx, 1.0));
    }
    let g = gram.values();
    let scale = 2.0 * s as f64;
    let mut pmat = DMatrix::<f64>::zeros(m, m);
    for &(a, ia, sa) in &cols {
        for &(b, ib, sb) in &cols {
            pmat[(a, b)] = scale * sa * sb * g[(ia, ib)];
        }
    }

    let inf = f64::INFINITY;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let (mut l, mut u) = (Vec::new(), Vec::new());
    let mut push = |row: Vec<(usize, f64)>, lo: f64, hi: f64| {
        rows.push(row);
        l.push(lo);
        u.push(hi);
    };

    push((0..s).flat_map(|j| [(lay.vplus(j), 1.0), (lay.vminus(j), 1.0)]).collect(), 1.0, 1.0);
    for (j, &f) in node.fixed.iter().enumerate() {
        match formulation {
            Formulation::Sos1 => {
                let hi_plus = if f == Fix::MinusOnly { 0.0 } else { inf };
                let hi_minus = if f == Fix::PlusOnly { 0.0 } else { inf };
                push(vec![(lay.vplus(j), 1.0)], 0.0, hi_plus);
                push(vec![(lay.vminus(j), 1.0)], 0.0, hi_minus);
            }
            Formulation::BigM => {
                push(vec![(lay.vplus(j), 1.0)], 0.0, inf);
                push(vec![(lay.vminus(j), 1.0)], 0.0, inf);
                push(vec![(lay.vplus(j), 1.0), (lay.b(j), -big_m)], -inf, 0.0);
                push(vec![(lay.vminus(j), 1.0), (lay.b(j), big_m)], -inf, big_m);
                let (lo, hi) = match f {
                    Fix::PlusOnly => (1.0, 1.0),
                    Fix::MinusOnly => (0.0, 0.0),
                    Fix::Free => (0.0, 1.0),
                };
                push(vec![(lay.b(j), 1.0)], lo, hi);
            }
        }
    }
    for t in 0..r {
        push(vec![(lay.w(t), 1.0), (lay.u(t), 1.0)], 0.0, inf);
        push(vec![(lay.w(t), -1.0), (lay.u(t), 1.0)], 0.0, inf);
    }
    if r > 0 {
        for t in 0..r {
            push(vec![(lay.u(t), 1.0)], 0.0, inf);
        }
        push((0..r).map(|t| (lay.u(t), 1.0)).collect(), -inf, CONE_RADIUS);
    }

    QpProblem::new(pmat, vec![0.0; m], CsrMatrix::from_rows(m, rows), l, u)
}

/// Solves the node relaxation. Its objective lower-bounds every completion.
pub fn relax_node(
    node: &BnbNode,
    formulation: Formulation,
    big_m: f64,
    gram: &GramMatrix,
    active: &ActiveSet,
    tol: &ToleranceConfig,
) -> Result<QpSolution> {
    let prob = build_relaxation(node, formulation, big_m, gram, active)?;
    solve_qp(&prob, None, tol)
}

/// Splits a relaxation solution into (v⁺, v⁻, v) with v ∈ ℝ^p.
fn unpack(x: &[f64], active: &ActiveSet) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = active.s();
    let comp = active.complement();
    let lay = Layout { s, r: comp.len(), bigm: false };
    let plus: Vec<f64> = (0..s).map(|j| x[lay.vplus(j)].max(0.0)).collect();
    let minus: Vec<f64> = (0..s).map(|j| x[lay.vminus(j)].max(0.0)).collect();
    let mut v = vec![0.0; active.p()];
    for (j, &idx) in active.indices().iter().enumerate() {
        v[idx] = plus[j] - minus[j];
    }
    for (t, &idx) in comp.iter().enumerate() {
        v[idx] = x[lay.w(t)];
    }
    (plus, minus, v)
}

/// One point of the anytime trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub time: f64,
    pub incumbent: f64,
    pub lower_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnbOutcome {
    pub result: CompatResult,
    pub nodes_expanded: usize,
    pub warm_start_value: f64,
    pub gap: f64,
    pub trace: Vec<TracePoint>,
}

const COMPLEMENTARITY_TOL: f64 = 1e-9;

fn relative_gap(incumbent: f64, lower: f64) -> f64 {
    if !incumbent.is_finite() {
        return f64::INFINITY;
    }
    ((incumbent - lower) / incumbent.max(ZERO_THRESHOLD)).max(0.0)
}

/// φ² by branch and bound.
pub fn phi_bnb(gram: &GramMatrix, active: &ActiveSet, cfg: &BnbConfig) -> Result<BnbOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    if gram.p() != active.p() {
        return Err(Error::DimensionMismatch(format!(
            "Gram matrix is {0}x{0}, active set is over p = {1}",
            gram.p(),
            active.p()
        )));
    }
    let s = active.s();
    let tol = &cfg.tol;

    let ws = warm_start(gram, active, cfg.warm_starts_k, cfg.seed, tol)?;
    let mut solves = ws.solved.len();
    let mut cache: HashMap<SignPattern, (f64, Vec<f64>)> =
        ws.solved.iter().map(|(z, val, v)| (z.clone(), (*val, v.clone()))).collect();
    let mut incumbent = ws.phi_sq;
    let mut inc_v = ws.minimizer.clone();
    let mut inc_pattern = ws.pattern.clone();

    let mut trace = Vec::new();
    let mut lower = 0.0_f64;
    let elapsed = |start: &Instant| start.elapsed().as_secs_f64();
    trace.push(TracePoint { time: elapsed(&start), incumbent, lower_bound: lower });

    // global flips give equal values, so the first sign is fixed at the root
    let mut root = BnbNode::root(s);
    root.fixed[0] = Fix::PlusOnly;
    root.depth = 1;
    let mut heap = BinaryHeap::new();
    heap.push(Queued(root));
    let mut next_id = 1;
    let mut expanded = 0;
    let mut limited = false;

    while let Some(Queued(node)) = heap.pop() {
        if incumbent < ZERO_THRESHOLD {
            heap.push(Queued(node));
            break;
        }
        // limits bind only once some feasible point exists
        if incumbent.is_finite() {
            let over_time = cfg.time_limit.is_some_and(|t| elapsed(&start) >= t);
            if over_time || expanded >= cfg.node_limit {
                heap.push(Queued(node));
                limited = true;
                break;
            }
        }
        if relative_gap(incumbent, node.relax_bound) <= cfg.gap_tol {
            continue;
        }
        expanded += 1;

        let mut candidate: Option<(f64, Vec<f64>, SignPattern)> = None;
        let mut children = None;
        if node.is_leaf() {
            let z = node.pattern().expect("leaf has all signs fixed");
            let (val, v) = match cache.get(&z) {
                Some(hit) => hit.clone(),
                None => {
                    let out = phi_for_pattern(&FixedSignSubproblem { gram, active, signs: &z }, tol)?;
                    solves += 1;
                    cache.insert(z.clone(), out.clone());
                    out
                }
            };
            candidate = Some((val, v, z));
        } else {
            let sol = relax_node(&node, cfg.formulation, cfg.big_m, gram, active, tol)?;
            solves += 1;
            // an unconverged relaxation proves nothing; keep the inherited bound
            let bound = if sol.status == QpStatus::Solved {
                sol.objective.max(node.relax_bound)
            } else {
                node.relax_bound
            };
            let (plus, minus, v) = unpack(&sol.x, active);
            let free: Vec<usize> = (0..s).filter(|&j| node.fixed[j] == Fix::Free).collect();
            let complementary = free.iter().all(|&j| plus[j].min(minus[j]) <= COMPLEMENTARITY_TOL);
            if sol.status == QpStatus::Solved && complementary {
                // feasible for the original problem: the subtree is solved
                let signs: Vec<i8> = (0..s)
                    .map(|j| match node.fixed[j] {
                        Fix::PlusOnly => 1,
                        Fix::MinusOnly => -1,
                        Fix::Free => if plus[j] >= minus[j] { 1 } else { -1 },
                    })
                    .collect();
                let val = (s as f64 * gram.quad_form(&v)).max(0.0);
                candidate = Some((val, v, SignPattern::new(signs)?.to_canonical()));
            } else if relative_gap(incumbent, bound) > cfg.gap_tol {
                let mut branch = free[0];
                let mut best = plus[branch].min(minus[branch]);
                for &j in &free[1..] {
                    let viol = plus[j].min(minus[j]);
                    if viol > best {
                        best = viol;
                        branch = j;
                    }
                }
                let mut kids = Vec::with_capacity(2);
                for fix in [Fix::PlusOnly, Fix::MinusOnly] {
                    let mut fixed = node.fixed.clone();
                    fixed[branch] = fix;
                    kids.push(BnbNode { fixed, relax_bound: bound, depth: node.depth + 1, id: next_id });
                    next_id += 1;
                }
                children = Some(kids);
            }
        }

        let mut changed = false;
        if let Some((val, v, z)) = candidate {
            if val < incumbent {
                incumbent = val;
                inc_v = Some(v);
                inc_pattern = Some(z);
                changed = true;
            }
        }
        for kid in children.into_iter().flatten() {
            heap.push(Queued(kid));
        }
        let open_min = heap.iter().map(|q| q.0.relax_bound).fold(f64::INFINITY, f64::min);
        let new_lower = incumbent.min(open_min).max(lower);
        if new_lower > lower {
            lower = new_lower;
            changed = true;
        }
        if changed {
            trace.push(TracePoint { time: elapsed(&start), incumbent, lower_bound: lower });
        }
    }

    if heap.is_empty() && incumbent.is_finite() {
        lower = lower.max(incumbent);
    }
    let minimizer = inc_v.ok_or_else(|| Error::SolverFailure("branch and bound found no feasible point".into()))?;
    lower = lower.min(incumbent);
    let gap = relative_gap(incumbent, lower);
    let status = if incumbent < ZERO_THRESHOLD {
        CompatStatus::ZeroDetected
    } else if !limited || gap <= cfg.gap_tol {
        CompatStatus::Optimal
    } else {
        CompatStatus::TimeLimitFeasible
    };
    let wall_time = elapsed(&start);
    trace.push(TracePoint { time: wall_time, incumbent, lower_bound: lower });

    Ok(BnbOutcome {
        result: CompatResult {
            phi_sq: incumbent,
            phi: if status == CompatStatus::ZeroDetected { 0.0 } else { incumbent.sqrt() },
            minimizer,
            status,
            lower_bound: lower,
            wall_time,
            subproblems_solved: solves,
            pattern: inc_pattern,
        },
        nodes_expanded: expanded,
        warm_start_value: ws.phi_sq,
        gap,
        trace,
    })
}
