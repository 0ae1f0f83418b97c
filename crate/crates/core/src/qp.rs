//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! ```text
//! min 1/2 x^T H x + g^T x
//! s.t. lb <= x <= ub,  al <= A x <= au
//! ```
//!
//! Infinite bounds are ignored. Rows with `al == au` are equalities.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP dimensions are inconsistent: {0}")]
    Dimension(String),
    #[error("QP Hessian is not positive definite")]
    NotConvex,
    #[error("QP is infeasible")]
    Infeasible,
    #[error("QP iteration limit reached")]
    IterationLimit,
    #[error("QP data contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    /// General constraint rows, `m x n`.
    pub a: DMatrix<f64>,
    pub al: DVector<f64>,
    pub au: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem of dimension `n` to which bounds and rows can be added.
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
            a: DMatrix::zeros(0, n),
            al: DVector::zeros(0),
            au: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    fn check(&self) -> Result<(), QpError> {
        let n = self.g.len();
        let m = self.a.nrows();
        if self.h.shape() != (n, n) || self.lb.len() != n || self.ub.len() != n {
            return Err(QpError::Dimension(format!("n = {n}")));
        }
        if self.a.ncols() != n || self.al.len() != m || self.au.len() != m {
            return Err(QpError::Dimension(format!("m = {m}")));
        }
        let finite = |v: &DVector<f64>| v.iter().all(|x| !x.is_nan());
        if !self.h.iter().all(|v| v.is_finite())
            || !self.g.iter().all(|v| v.is_finite())
            || !self.a.iter().all(|v| v.is_finite())
            || !finite(&self.lb)
            || !finite(&self.ub)
            || !finite(&self.al)
            || !finite(&self.au)
        {
            return Err(QpError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `x >= lb` and `x <= ub` (nonnegative).
    pub bound_lower: DVector<f64>,
    pub bound_upper: DVector<f64>,
    /// Multipliers of `A x >= al` and `A x <= au`; equalities report the
    /// signed multiplier in `row_lower`.
    pub row_lower: DVector<f64>,
    pub row_upper: DVector<f64>,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Normal {
    /// `sign * x_i`
    Bound(usize, f64),
    /// `sign * A_j x`
    Row(usize, f64),
}

#[derive(Debug, Clone, Copy)]
struct Cons {
    normal: Normal,
    rhs: f64,
    equality: bool,
}

struct Workspace {
    at: DMatrix<f64>,
    row_norms: Vec<f64>,
}

impl Workspace {
    fn dot(&self, c: &Cons, v: &DVector<f64>) -> f64 {
        match c.normal {
            Normal::Bound(i, s) => s * v[i],
            Normal::Row(j, s) => s * self.at.column(j).dot(v),
        }
    }

    fn norm(&self, c: &Cons) -> f64 {
        match c.normal {
            Normal::Bound(..) => 1.0,
            Normal::Row(j, _) => self.row_norms[j],
        }
    }

    /// `J^T n`.
    fn jt_normal(&self, j: &DMatrix<f64>, c: &Cons, out: &mut DVector<f64>) {
        let n = j.ncols();
        match c.normal {
            Normal::Bound(i, s) => {
                for k in 0..n {
                    out[k] = s * j[(i, k)];
                }
            }
            Normal::Row(r, s) => {
                let a = self.at.column(r);
                for k in 0..n {
                    out[k] = s * j.column(k).dot(&a);
                }
            }
        }
    }

    fn add_to(&self, c: &Cons, scale: f64, out: &mut DVector<f64>) {
        match c.normal {
            Normal::Bound(i, s) => out[i] += scale * s,
            Normal::Row(r, s) => out.axpy(scale * s, &self.at.column(r), 1.0),
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0, a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

fn rotate_columns(j: &mut DMatrix<f64>, c0: usize, c1: usize, c: f64, s: f64) {
    let n = j.nrows();
    for k in 0..n {
        let a = j[(k, c0)];
        let b = j[(k, c1)];
        j[(k, c0)] = c * a + s * b;
        j[(k, c1)] = -s * a + c * b;
    }
}

/// Cholesky factor of a symmetric positive definite matrix, with the
/// smallest pivot ratio, or `None` when it fails.
pub fn cholesky_with_pivot_ratio(h: &DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = h.clone().cholesky()?;
    let l = chol.unpack();
    let diag = l.diagonal();
    let (mn, mx) = diag.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    if !(mn > 0.0) {
        return None;
    }
    Some((l, (mn / mx).powi(2)))
}

/// Solves the QP from a cold start.
pub fn solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    p.check()?;
    let n = p.num_vars();
    let m = p.a.nrows();
    let (l, _) = cholesky_with_pivot_ratio(&p.h).ok_or(QpError::NotConvex)?;
    // J = L^-T so that J J^T = H^-1
    let linv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotConvex)?;
    let mut j = linv.transpose();

    let at = p.a.transpose();
    let row_norms = (0..m).map(|r| at.column(r).norm().max(1e-300)).collect();
    let ws = Workspace { at, row_norms };

    // constraint list: equalities first
    let mut cons = Vec::new();
    for r in 0..m {
        if p.al[r] == p.au[r] {
            cons.push(Cons {
                normal: Normal::Row(r, 1.0),
                rhs: p.al[r],
                equality: true,
            });
        }
    }
    for i in 0..n {
        if p.lb[i] == p.ub[i] {
            cons.push(Cons {
                normal: Normal::Bound(i, 1.0),
                rhs: p.lb[i],
                equality: true,
            });
            continue;
        }
        if p.lb[i] > p.ub[i] {
            return Err(QpError::Infeasible);
        }
        if p.lb[i].is_finite() {
            cons.push(Cons {
                normal: Normal::Bound(i, 1.0),
                rhs: p.lb[i],
                equality: false,
            });
        }
        if p.ub[i].is_finite() {
            cons.push(Cons {
                normal: Normal::Bound(i, -1.0),
                rhs: -p.ub[i],
                equality: false,
            });
        }
    }
    // move bound equalities up front as well
    cons.sort_by_key(|c| !c.equality);
    for r in 0..m {
        if p.al[r] == p.au[r] {
            continue;
        }
        if p.al[r] > p.au[r] {
            return Err(QpError::Infeasible);
        }
        if p.al[r].is_finite() {
            cons.push(Cons {
                normal: Normal::Row(r, 1.0),
                rhs: p.al[r],
                equality: false,
            });
        }
        if p.au[r].is_finite() {
            cons.push(Cons {
                normal: Normal::Row(r, -1.0),
                rhs: -p.au[r],
                equality: false,
            });
        }
    }

    // unconstrained minimizer
    let mut x = -(&j * (j.transpose() * &p.g));
    let mut active: Vec<usize> = Vec::new();
    let mut is_active = vec![false; cons.len()];
    let mut u: Vec<f64> = Vec::new();
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut d = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    let max_iter = 20 * (n + cons.len()) + 100;
    let mut iterations = 0;
    let tol = 1e-11;

    loop {
        // pick the next constraint: pending equalities first, then the most violated
        let mut pick: Option<(usize, f64)> = None;
        for (ci, c) in cons.iter().enumerate() {
            if is_active[ci] {
                continue;
            }
            let s = ws.dot(c, &x) - c.rhs;
            if c.equality {
                pick = Some((ci, s));
                break;
            }
            let viol = s / ws.norm(c);
            if viol < -tol * (1.0 + c.rhs.abs() / ws.norm(c)) && pick.is_none_or(|(_, v)| viol < v) {
                pick = Some((ci, viol));
            }
        }
        let Some((pi, s_pick)) = pick else { break };
        if cons[pi].equality && s_pick > 0.0 {
            // approach the equality from the violated side
            let c = &mut cons[pi];
            c.rhs = -c.rhs;
            c.normal = match c.normal {
                Normal::Bound(i, s) => Normal::Bound(i, -s),
                Normal::Row(r, s) => Normal::Row(r, -s),
            };
        }
        let cp = cons[pi];
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let q = active.len();
            ws.jt_normal(&j, &cp, &mut d);
            // primal direction z = J2 d2
            z.fill(0.0);
            for k in q..n {
                let dk = d[k];
                if dk != 0.0 {
                    z.axpy(dk, &j.column(k), 1.0);
                }
            }
            // dual direction r = R^-1 d1
            let mut rv = vec![0.0; q];
            for i in (0..q).rev() {
                let mut acc = d[i];
                for k in i + 1..q {
                    acc -= r[(i, k)] * rv[k];
                }
                rv[i] = acc / r[(i, i)];
            }
            // dual step length
            let mut t1 = f64::INFINITY;
            let mut k_drop = usize::MAX;
            for (idx, &ai) in active.iter().enumerate() {
                if !cons[ai].equality && rv[idx] > 0.0 {
                    let t = u[idx] / rv[idx];
                    if t < t1 {
                        t1 = t;
                        k_drop = idx;
                    }
                }
            }
            // primal step length; z^T n_p = |d2|^2
            let zn = ws.dot(&cp, &z);
            let s_p = ws.dot(&cp, &x) - cp.rhs;
            let dn = d.norm_squared();
            let t2 = if zn > 1e-13 * dn { -s_p / zn } else { f64::INFINITY };
            if !t1.is_finite() && !t2.is_finite() {
                if cp.equality && s_p.abs() <= tol * (1.0 + cp.rhs.abs()) {
                    // redundant equality, already satisfied
                    is_active[pi] = true;
                    break;
                }
                return Err(QpError::Infeasible);
            }
            if !t2.is_finite() {
                // dual step only, then drop the blocking constraint
                for (idx, val) in u.iter_mut().enumerate() {
                    *val -= t1 * rv[idx];
                }
                u_new += t1;
                drop_constraint(&mut active, &mut u, &mut r, &mut j, &mut is_active, k_drop);
                continue;
            }
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (idx, val) in u.iter_mut().enumerate() {
                *val -= t * rv[idx];
            }
            u_new += t;
            if t2 <= t1 {
                // add the constraint: rotate d2 onto its first entry
                for k in (q + 1..n).rev() {
                    if d[k] == 0.0 {
                        continue;
                    }
                    let (c, s, rr) = givens(d[k - 1], d[k]);
                    d[k - 1] = rr;
                    d[k] = 0.0;
                    rotate_columns(&mut j, k - 1, k, c, s);
                }
                for i in 0..=q {
                    r[(i, q)] = d[i];
                }
                active.push(pi);
                is_active[pi] = true;
                u.push(u_new);
                break;
            }
            drop_constraint(&mut active, &mut u, &mut r, &mut j, &mut is_active, k_drop);
        }
    }

    let mut sol = QpSolution {
        objective: p.objective(&x),
        bound_lower: DVector::zeros(n),
        bound_upper: DVector::zeros(n),
        row_lower: DVector::zeros(m),
        row_upper: DVector::zeros(m),
        x,
        iterations,
    };
    for (idx, &ci) in active.iter().enumerate() {
        let c = cons[ci];
        let mu = u[idx];
        if c.equality {
            match c.normal {
                Normal::Bound(i, s) => sol.bound_lower[i] += s * mu,
                Normal::Row(rw, s) => sol.row_lower[rw] += s * mu,
            }
            continue;
        }
        match c.normal {
            Normal::Bound(i, s) if s > 0.0 => sol.bound_lower[i] += mu,
            Normal::Bound(i, _) => sol.bound_upper[i] += mu,
            Normal::Row(rw, s) if s > 0.0 => sol.row_lower[rw] += mu,
            Normal::Row(rw, _) => sol.row_upper[rw] += mu,
        }
    }
    // sanity: stationarity of the final point
    let mut grad = &p.h * &sol.x + &p.g;
    for (idx, &ci) in active.iter().enumerate() {
        ws.add_to(&cons[ci], -u[idx], &mut grad);
    }
    if !grad.iter().all(|v| v.is_finite()) {
        return Err(QpError::NonFinite);
    }
    Ok(sol)
}

/// Initial guess for a variable's bound activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundGuess {
    Free,
    Lower,
    Upper,
}

const MAX_GUESS_ROUNDS: usize = 8;

/// Solves the QP with the guessed variables held on their bounds first.
///
/// Each round solves the reduced problem over the free variables, then
/// releases every held bound whose multiplier has the wrong sign. The
/// result satisfies the optimality conditions of the full problem; when the
/// rounds do not settle, or the reduced problem is infeasible, it falls back
/// to [`solve`].
pub fn solve_with_guess(p: &QpProblem, guess: &[BoundGuess]) -> Result<QpSolution, QpError> {
    p.check()?;
    let n = p.num_vars();
    if guess.len() != n {
        return Err(QpError::Dimension(format!("guess has {} entries for {n} variables", guess.len())));
    }
    let mut held: Vec<BoundGuess> = guess
        .iter()
        .enumerate()
        .map(|(i, g)| match g {
            BoundGuess::Lower if p.lb[i].is_finite() && p.lb[i] < p.ub[i] => BoundGuess::Lower,
            BoundGuess::Upper if p.ub[i].is_finite() && p.lb[i] < p.ub[i] => BoundGuess::Upper,
            _ => BoundGuess::Free,
        })
        .collect();
    let gscale = 1.0 + p.g.amax() + p.h.diagonal().amax();
    let tol = 1e-9 * gscale;
    let mut iterations = 0;

    for _ in 0..MAX_GUESS_ROUNDS {
        let free: Vec<usize> = (0..n).filter(|&i| held[i] == BoundGuess::Free).collect();
        if free.len() == n {
            break;
        }
        let mut x = DVector::zeros(n);
        for i in 0..n {
            match held[i] {
                BoundGuess::Lower => x[i] = p.lb[i],
                BoundGuess::Upper => x[i] = p.ub[i],
                BoundGuess::Free => {}
            }
        }
        let nf = free.len();
        let hx = &p.h * &x;
        let ax = &p.a * &x;
        let mut reduced = QpProblem::new(
            DMatrix::from_fn(nf, nf, |a, b| p.h[(free[a], free[b])]),
            DVector::from_fn(nf, |a, _| p.g[free[a]] + hx[free[a]]),
        );
        for (a, &i) in free.iter().enumerate() {
            reduced.lb[a] = p.lb[i];
            reduced.ub[a] = p.ub[i];
        }
        reduced.a = DMatrix::from_fn(p.a.nrows(), nf, |r, a| p.a[(r, free[a])]);
        reduced.al = &p.al - &ax;
        reduced.au = &p.au - &ax;
        let rs = match solve(&reduced) {
            Ok(rs) => rs,
            Err(QpError::Infeasible) | Err(QpError::IterationLimit) => break,
            Err(e) => return Err(e),
        };
        iterations += rs.iterations;
        for (a, &i) in free.iter().enumerate() {
            x[i] = rs.x[a];
        }
        // bound multipliers of the held variables from stationarity
        let mut grad = &p.h * &x + &p.g;
        grad.gemv_tr(-1.0, &p.a, &(&rs.row_lower - &rs.row_upper), 1.0);
        let mut released = false;
        for i in 0..n {
            let wrong = match held[i] {
                BoundGuess::Lower => grad[i] < -tol,
                BoundGuess::Upper => grad[i] > tol,
                BoundGuess::Free => false,
            };
            if wrong {
                held[i] = BoundGuess::Free;
                released = true;
            }
        }
        if released {
            continue;
        }
        let mut sol = QpSolution {
            objective: p.objective(&x),
            bound_lower: DVector::zeros(n),
            bound_upper: DVector::zeros(n),
            row_lower: rs.row_lower,
            row_upper: rs.row_upper,
            x,
            iterations,
        };
        for (a, &i) in free.iter().enumerate() {
            sol.bound_lower[i] = rs.bound_lower[a];
            sol.bound_upper[i] = rs.bound_upper[a];
        }
        for i in 0..n {
            match held[i] {
                BoundGuess::Lower => sol.bound_lower[i] = grad[i].max(0.0),
                BoundGuess::Upper => sol.bound_upper[i] = (-grad[i]).max(0.0),
                BoundGuess::Free => {}
            }
        }
        return Ok(sol);
    }
    let mut sol = solve(p)?;
    sol.iterations += iterations;
    Ok(sol)
}

fn drop_constraint(
    active: &mut Vec<usize>,
    u: &mut Vec<f64>,
    r: &mut DMatrix<f64>,
    j: &mut DMatrix<f64>,
    is_active: &mut [bool],
    k: usize,
) {
    let q = active.len();
    is_active[active[k]] = false;
    active.remove(k);
    u.remove(k);
    // shift columns of R left
    for col in k..q - 1 {
        for row in 0..=col + 1 {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..q {
        r[(row, q - 1)] = 0.0;
    }
    // restore triangularity
    for col in k..q - 1 {
        let a = r[(col, col)];
        let b = r[(col + 1, col)];
        if b == 0.0 {
            continue;
        }
        let (c, s, rr) = givens(a, b);
        r[(col, col)] = rr;
        r[(col + 1, col)] = 0.0;
        for cc in col + 1..q - 1 {
            let x0 = r[(col, cc)];
            let x1 = r[(col + 1, cc)];
            r[(col, cc)] = c * x0 + s * x1;
            r[(col + 1, cc)] = -s * x0 + c * x1;
        }
        rotate_columns(j, col, col + 1, c, s);
    }
}
