//! Active-set polish.
//!
//! The splitting iterate only identifies the active constraints; this step
//! solves the equality-constrained problem on that set directly. The
//! compatibility QPs carry many rows with one or two nonzeros (sign and
//! absolute-value rows), so those are eliminated by substitution first and
//! only the remaining coupled rows enter a small dense KKT system. Multipliers
//! of eliminated rows are recovered afterwards by sign-constrained least
//! squares on each connected block of rows.

use nalgebra::{DMatrix, DVector};

use super::{QpProblem, INFINITY_BOUND};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Side {
    Lower,
    Upper,
    Equal,
}

#[derive(Debug, Clone, Copy)]
enum Var {
    Free,
    Fixed(f64),
    /// x = alpha + beta * x[partner]; the partner is never substituted itself.
    Subst { alpha: f64, beta: f64, partner: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Inactive,
    Pending,
    Eliminated,
    Dropped,
    Kept,
}

const COEF_EPS: f64 = 1e-12;
const KKT_REG: f64 = 1e-8;
const REFINE_STEPS: usize = 8;

struct Reducer<'a> {
    rows: &'a [Vec<(usize, f64)>],
    vars: Vec<Var>,
}

impl Reducer<'_> {
    /// Row i rewritten over the free variables: (coefficients, right-hand side).
    fn effective(&self, i: usize, rhs: f64) -> (Vec<(usize, f64)>, f64) {
        let mut coefs: Vec<(usize, f64)> = Vec::new();
        let mut rhs = rhs;
        let add = |coefs: &mut Vec<(usize, f64)>, j: usize, c: f64| match coefs.iter_mut().find(|(k, _)| *k == j) {
            Some(e) => e.1 += c,
            None => coefs.push((j, c)),
        };
        for &(j, c) in &self.rows[i] {
            match self.vars[j] {
                Var::Free => add(&mut coefs, j, c),
                Var::Fixed(v) => rhs -= c * v,
                Var::Subst { alpha, beta, partner } => {
                    rhs -= c * alpha;
                    match self.vars[partner] {
                        Var::Fixed(v) => rhs -= c * beta * v,
                        _ => add(&mut coefs, partner, c * beta),
                    }
                }
            }
        }
        let scale = self.rows[i].iter().fold(0.0_f64, |m, &(_, c)| m.max(c.abs()));
        coefs.retain(|&(_, c)| c.abs() > COEF_EPS * scale);
        coefs.sort_by_key(|&(j, _)| j);
        (coefs, rhs)
    }

    fn value(&self, j: usize, xi: &[f64], free_index: &[usize]) -> f64 {
        match self.vars[j] {
            Var::Free => xi[free_index[j]],
            Var::Fixed(v) => v,
            Var::Subst { alpha, beta, partner } => alpha + beta * self.value(partner, xi, free_index),
        }
    }
}

/// Returns the polished (x, y), or None when the guessed active set gives a
/// singular or inconsistent system. Acceptance is left to the caller's KKT
/// check.
pub(super) fn polish(prob: &QpProblem, z: &[f64], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let m = prob.n_vars();
    let k = prob.n_constraints();
    let rows: Vec<Vec<(usize, f64)>> = (0..k).map(|i| prob.a.row(i).collect()).collect();

    let mut side = vec![None; k];
    let mut bound = vec![0.0; k];
    let mut role = vec![Role::Inactive; k];
    for i in 0..k {
        let (l, u) = (prob.l[i], prob.u[i]);
        let s = if l == u {
            Some(Side::Equal)
        } else if l > -INFINITY_BOUND && z[i] - l < -y[i] {
            Some(Side::Lower)
        } else if u < INFINITY_BOUND && u - z[i] < y[i] {
            Some(Side::Upper)
        } else {
            None
        };
        if let Some(s) = s {
            bound[i] = if s == Side::Upper { u } else { l };
            side[i] = Some(s);
            role[i] = Role::Pending;
        }
    }

    let mut red = Reducer { rows: &rows, vars: vec![Var::Free; m] };
    let mut protected = vec![false; m];
    let small = |i: usize| rows[i].len() <= 2;

    loop {
        let mut changed = false;
        for i in 0..k {
            if role[i] != Role::Pending {
                continue;
            }
            let (coefs, rhs) = red.effective(i, bound[i]);
            if coefs.is_empty() {
                role[i] = Role::Dropped;
                changed = true;
            } else if coefs.len() == 1 && small(i) {
                let (j, c) = coefs[0];
                red.vars[j] = Var::Fixed(rhs / c);
                role[i] = Role::Eliminated;
                changed = true;
            }
        }
        if changed {
            continue;
        }
        for i in 0..k {
            if role[i] != Role::Pending || !small(i) {
                continue;
            }
            let (coefs, rhs) = red.effective(i, bound[i]);
            if coefs.len() != 2 {
                continue;
            }
            let pick = |a: usize, b: usize| -> Option<(usize, usize)> {
                let (ja, jb) = (coefs[a].0, coefs[b].0);
                match (protected[ja], protected[jb]) {
                    (true, true) => None,
                    (false, true) => Some((a, b)),
                    (true, false) => Some((b, a)),
                    (false, false) => {
                        if prob.p[(ja, ja)] == 0.0 || prob.p[(jb, jb)] != 0.0 {
                            Some((a, b))
                        } else {
                            Some((b, a))
                        }
                    }
                }
            };
            if let Some((e, o)) = pick(0, 1) {
                let (je, ce) = coefs[e];
                let (jo, co) = coefs[o];
                red.vars[je] = Var::Subst { alpha: rhs / ce, beta: -co / ce, partner: jo };
                protected[jo] = true;
                role[i] = Role::Eliminated;
                changed = true;
                break;
            }
        }
        if !changed {
            break;
        }
    }

    let kept: Vec<usize> = (0..k).filter(|&i| role[i] == Role::Pending).collect();
    for &i in &kept {
        role[i] = Role::Kept;
    }

    // x = t0 + T xi over the free variables
    let free: Vec<usize> = (0..m).filter(|&j| matches!(red.vars[j], Var::Free)).collect();
    let nf = free.len();
    let mut free_index = vec![usize::MAX; m];
    for (a, &j) in free.iter().enumerate() {
        free_index[j] = a;
    }
    let mut tcols: Vec<Vec<(usize, f64)>> = free.iter().map(|&j| vec![(j, 1.0)]).collect();
    let mut t0 = vec![0.0; m];
    for j in 0..m {
        match red.vars[j] {
            Var::Free => {}
            Var::Fixed(v) => t0[j] = v,
            Var::Subst { alpha, beta, partner } => match red.vars[partner] {
                Var::Fixed(v) => t0[j] = alpha + beta * v,
                _ => {
                    t0[j] = alpha;
                    tcols[free_index[partner]].push((j, beta));
                }
            },
        }
    }

    let pt0 = super::mat_vec(&prob.p, &t0);
    let nk = kept.len();
    let dim = nf + nk;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for a in 0..nf {
        for b in a..nf {
            let mut h = 0.0;
            for &(i, ti) in &tcols[a] {
                for &(j, tj) in &tcols[b] {
                    h += ti * prob.p[(i, j)] * tj;
                }
            }
            kkt[(a, b)] = h;
            kkt[(b, a)] = h;
        }
        rhs[a] = -tcols[a].iter().map(|&(i, ti)| ti * (pt0[i] + prob.q[i])).sum::<f64>();
    }
    for (r, &i) in kept.iter().enumerate() {
        let (coefs, b) = red.effective(i, bound[i]);
        for (j, c) in coefs {
            kkt[(nf + r, free_index[j])] = c;
            kkt[(free_index[j], nf + r)] = c;
        }
        rhs[nf + r] = b;
    }

    let mut reg = kkt.clone();
    for d in 0..nf {
        reg[(d, d)] += KKT_REG;
    }
    for d in nf..dim {
        reg[(d, d)] -= KKT_REG;
    }
    let mut sol = DVector::<f64>::zeros(dim);
    if dim > 0 {
        let lu = reg.lu();
        sol = lu.solve(&rhs)?;
        for _ in 0..REFINE_STEPS {
            let resid = &rhs - &kkt * &sol;
            if resid.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                break;
            }
            sol += lu.solve(&resid)?;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let xi: Vec<f64> = sol.as_slice()[..nf].to_vec();
    let x: Vec<f64> = (0..m).map(|j| red.value(j, &xi, &free_index)).collect();
    let mut yout = vec![0.0; k];
    for (r, &i) in kept.iter().enumerate() {
        yout[i] = sol[nf + r];
    }

    let mut grad = super::mat_vec(&prob.p, &x);
    for j in 0..m {
        grad[j] += prob.q[j];
    }
    for &i in &kept {
        for &(j, c) in &rows[i] {
            grad[j] += c * yout[i];
        }
    }

    let elim: Vec<usize> = (0..k).filter(|&i| matches!(role[i], Role::Eliminated | Role::Dropped)).collect();
    for block in row_blocks(&elim, &rows, m) {
        recover_block(&block, &rows, &side, &grad, &mut yout)?;
    }
    Some((x, yout))
}

/// Groups rows into connected blocks through shared variables.
fn row_blocks(elim: &[usize], rows: &[Vec<(usize, f64)>], m: usize) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    for &i in elim {
        let mut it = rows[i].iter();
        if let Some(&(first, _)) = it.next() {
            for &(j, _) in it {
                let (ra, rb) = (find(&mut parent, first), find(&mut parent, j));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut blocks: Vec<(usize, Vec<usize>)> = Vec::new();
    for &i in elim {
        let Some(&(j, _)) = rows[i].first() else { continue };
        let root = find(&mut parent, j);
        match blocks.iter_mut().find(|(r, _)| *r == root) {
            Some((_, b)) => b.push(i),
            None => blocks.push((root, vec![i])),
        }
    }
    blocks.into_iter().map(|(_, b)| b).collect()
}

/// Chooses multipliers for one block so that the stationarity residual on its
/// variables vanishes, subject to the sign each side requires.
fn recover_block(
    block: &[usize],
    rows: &[Vec<(usize, f64)>],
    side: &[Option<Side>],
    grad: &[f64],
    yout: &mut [f64],
) -> Option<()> {
    let mut vars: Vec<usize> = block.iter().flat_map(|&i| rows[i].iter().map(|&(j, _)| j)).collect();
    vars.sort_unstable();
    vars.dedup();
    // columns: (row, sign) with y_row = sign * w, w >= 0
    let mut cols: Vec<(usize, f64)> = Vec::new();
    for &i in block {
        match side[i]? {
            Side::Lower => cols.push((i, -1.0)),
            Side::Upper => cols.push((i, 1.0)),
            Side::Equal => {
                cols.push((i, 1.0));
                cols.push((i, -1.0));
            }
        }
    }
    let mut d = DMatrix::<f64>::zeros(vars.len(), cols.len());
    for (c, &(i, sgn)) in cols.iter().enumerate() {
        for &(j, a) in &rows[i] {
            let r = vars.binary_search(&j).ok()?;
            d[(r, c)] = sgn * a;
        }
    }
    let target = DVector::from_iterator(vars.len(), vars.iter().map(|&j| -grad[j]));
    let w = nnls(&d, &target)?;
    for (c, &(i, sgn)) in cols.iter().enumerate() {
        yout[i] += sgn * w[c];
    }
    Some(())
}

/// Lawson–Hanson non-negative least squares: min ‖Dw − b‖ subject to w ≥ 0.
pub(crate) fn nnls(d: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = d.ncols();
    let mut w = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-13 * (1.0 + d.amax() * b.amax());
    let max_outer = 3 * n + 10;

    let solve_passive = |passive: &[bool]| -> Option<DVector<f64>> {
        let idx: Vec<usize> = (0..n).filter(|&c| passive[c]).collect();
        let sub = d.select_columns(&idx);
        let s = sub.svd(true, true).solve(b, 1e-14).ok()?;
        let mut full = DVector::<f64>::zeros(n);
        for (a, &c) in idx.iter().enumerate() {
            full[c] = s[a];
        }
        Some(full)
    };

    for _ in 0..max_outer {
        let grad = d.tr_mul(&(b - d * &w));
        let mut best = None;
        for c in 0..n {
            if !passive[c] && grad[c] > tol && best.map_or(true, |(_, g)| grad[c] > g) {
                best = Some((c, grad[c]));
            }
        }
        let Some((c, _)) = best else { return Some(w) };
        passive[c] = true;
        loop {
            let s = solve_passive(&passive)?;
            if (0..n).all(|c| !passive[c] || s[c] > 0.0) {
                w = s;
                break;
            }
            let mut alpha = f64::INFINITY;
            for c in 0..n {
                if passive[c] && s[c] <= 0.0 {
                    alpha = alpha.min(w[c] / (w[c] - s[c]));
                }
            }
            w = &w + (s - &w) * alpha;
            for c in 0..n {
                if passive[c] && w[c] <= 1e-15 {
                    passive[c] = false;
                    w[c] = 0.0;
                }
            }
        }
    }
    Some(w)
}
