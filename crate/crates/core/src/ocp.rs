//! Multiple-shooting optimal control transcription and a Gauss-Newton SQP
//! solver with condensing, an L1 merit line search and soft constraints.
//!
//! Decision vector layout: `[x_0 .. x_N, u_0 .. u_{N-1}, slack_1 .. slack_S]`.
//! Defects are `c_0 = x0 - x_0` and `c_{k+1} = F(x_k, u_k) - x_{k+1}`.
//! Inequalities are written `g(x_k, u_k) >= 0`; soft ones become
//! `g + slack >= 0, slack >= 0` with penalty `rho (slack + slack^2)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::objective::QuadraticModel;
use crate::qp::{self, BoundGuess, QpError, QpProblem};

/// Identifies the origin of an inequality for telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintTag {
    Corridor,
    KeepOut,
    Velocity,
    AngularRate,
    TerminalBall,
    TerminalVelocity,
    Progress,
    Approach,
    Generic,
}

/// One inequality `value >= 0` linearized at the current iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub value: f64,
    /// Gradient with respect to the stage state, `None` if independent of it.
    pub grad_x: Option<DVector<f64>>,
    /// Gradient with respect to the stage input, `None` if independent of it.
    pub grad_u: Option<DVector<f64>>,
    pub soft: bool,
    /// The constraint enters the QP only while `value < screen`.
    pub screen: f64,
    pub tag: ConstraintTag,
}

impl ConstraintEval {
    pub fn hard(value: f64, grad_x: Option<DVector<f64>>, grad_u: Option<DVector<f64>>, tag: ConstraintTag) -> Self {
        Self {
            value,
            grad_x,
            grad_u,
            soft: false,
            screen: f64::INFINITY,
            tag,
        }
    }

    fn directional(&self, dx: &DVector<f64>, du: Option<&DVector<f64>>) -> f64 {
        let mut v = self.grad_x.as_ref().map_or(0.0, |g| g.dot(dx));
        if let (Some(g), Some(du)) = (&self.grad_u, du) {
            v += g.dot(du);
        }
        v
    }
}

/// Discrete dynamics evaluation with optional Jacobians.
#[derive(Debug, Clone)]
pub struct Step {
    pub next: DVector<f64>,
    pub jacobians: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

/// A finite-horizon optimal control problem in multiple-shooting form.
pub trait ShootingProblem {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn horizon(&self) -> usize;
    fn step(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>, jacobian: bool) -> Step;
    /// Cost model over `[x_k, u_k]`; its gradient must be exact.
    fn stage_model(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> QuadraticModel;
    fn terminal_model(&self, x: &DVector<f64>) -> QuadraticModel;
    fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.stage_model(k, x, u).value
    }
    fn terminal_cost(&self, x: &DVector<f64>) -> f64 {
        self.terminal_model(x).value
    }
    fn input_bounds(&self, k: usize) -> (DVector<f64>, DVector<f64>);
    /// Inequalities at stage `k` (`u` is `None` at `k = N`). The count and
    /// order must not depend on the iterate.
    fn constraints(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> Vec<ConstraintEval>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleSoft,
    Failed,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::InfeasibleSoft => "infeasible_soft",
            SolveStatus::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpSettings {
    pub max_iter: usize,
    pub kkt_tol: f64,
    /// Backtracking factor.
    pub ls_beta: f64,
    /// Armijo sufficient decrease constant.
    pub ls_armijo: f64,
    pub ls_min_step: f64,
    /// Penalty on soft-constraint slacks.
    pub rho: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 30,
            kkt_tol: 1e-6,
            ls_beta: 0.5,
            ls_armijo: 1e-4,
            ls_min_step: 1e-6,
            rho: 1e3,
        }
    }
}

/// Components of the first-order optimality residual (infinity norms).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub dual_infeasibility: f64,
}

impl KktResidual {
    pub fn total(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
            .max(self.dual_infeasibility)
    }
}

/// Primal iterate of the NLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
}

/// Lagrange multipliers in the decision-vector ordering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Multipliers {
    /// Defect multipliers `lambda_0 .. lambda_N`.
    pub defect: Vec<DVector<f64>>,
    /// One per inequality in canonical order.
    pub ineq: Vec<f64>,
    /// One per slack (multiplier of `slack >= 0`).
    pub slack: Vec<f64>,
    pub input_lower: Vec<DVector<f64>>,
    pub input_upper: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpSolution {
    pub trajectory: Trajectory,
    pub slacks: Vec<f64>,
    pub multipliers: Multipliers,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt: KktResidual,
    /// Merit before and after every accepted step.
    pub merit_log: Vec<(f64, f64)>,
    /// Infinity norm of the last accepted step.
    pub last_step: f64,
    /// Largest Levenberg shift added to the reduced Hessian.
    pub regularization: f64,
    /// Hard state constraints had to be dropped from the last QP.
    pub relaxed: bool,
    pub diagnostic: Option<String>,
}

impl SqpSolution {
    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().fold(0.0, |a, b| a.max(*b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConsRef {
    stage: usize,
    index: usize,
    soft: Option<usize>,
}

/// Transcribed NLP: a shooting problem pinned at a measured initial state.
pub struct NlpInstance<'p, P: ShootingProblem + ?Sized> {
    pub problem: &'p P,
    pub x0: DVector<f64>,
    pub rho: f64,
    /// Canonical constraint list; pure-state constraints at `k = 0` are omitted.
    cons: Vec<ConsRef>,
    per_stage: Vec<usize>,
    n_soft: usize,
}

impl<'p, P: ShootingProblem + ?Sized> NlpInstance<'p, P> {
    /// Builds the transcription; `probe` fixes the constraint structure.
    pub fn new(problem: &'p P, x0: DVector<f64>, rho: f64, probe: &Trajectory) -> Self {
        let n = problem.horizon();
        let mut cons = Vec::new();
        let mut per_stage = Vec::with_capacity(n + 1);
        let mut n_soft = 0;
        for k in 0..=n {
            let xk = if k == 0 { &x0 } else { &probe.xs[k] };
            let list = problem.constraints(k, xk, probe.us.get(k));
            per_stage.push(list.len());
            for (index, c) in list.iter().enumerate() {
                if k == 0 && c.grad_u.is_none() {
                    continue;
                }
                let soft = if c.soft {
                    n_soft += 1;
                    Some(n_soft - 1)
                } else {
                    None
                };
                cons.push(ConsRef { stage: k, index, soft });
            }
        }
        Self {
            problem,
            x0,
            rho,
            cons,
            per_stage,
            n_soft,
        }
    }

    pub fn num_constraints(&self) -> usize {
        self.cons.len()
    }
    pub fn num_slacks(&self) -> usize {
        self.n_soft
    }

    /// `(N+1) nx + N nu + slacks`.
    pub fn num_decision(&self) -> usize {
        let p = self.problem;
        (p.horizon() + 1) * p.nx() + p.horizon() * p.nu() + self.n_soft
    }

    pub fn pack(&self, traj: &Trajectory, slacks: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_decision());
        let (nx, nu, n) = (self.problem.nx(), self.problem.nu(), self.problem.horizon());
        for (k, x) in traj.xs.iter().enumerate() {
            z.rows_mut(k * nx, nx).copy_from(x);
        }
        let off = (n + 1) * nx;
        for (k, u) in traj.us.iter().enumerate() {
            z.rows_mut(off + k * nu, nu).copy_from(u);
        }
        let off = off + n * nu;
        for (i, s) in slacks.iter().enumerate() {
            z[off + i] = *s;
        }
        z
    }

    pub fn unpack(&self, z: &DVector<f64>) -> (Trajectory, Vec<f64>) {
        let (nx, nu, n) = (self.problem.nx(), self.problem.nu(), self.problem.horizon());
        let xs = (0..=n).map(|k| z.rows(k * nx, nx).into_owned()).collect();
        let off = (n + 1) * nx;
        let us = (0..n).map(|k| z.rows(off + k * nu, nu).into_owned()).collect();
        let off = off + n * nu;
        let slacks = (0..self.n_soft).map(|i| z[off + i]).collect();
        (Trajectory { xs, us }, slacks)
    }

    fn stage_constraints(&self, k: usize, traj: &Trajectory) -> Vec<ConstraintEval> {
        let list = self.problem.constraints(k, &traj.xs[k], traj.us.get(k));
        assert_eq!(list.len(), self.per_stage[k], "constraint count changed at stage {k}");
        list
    }

    fn all_constraints(&self, traj: &Trajectory) -> Vec<ConstraintEval> {
        let mut stages: Vec<Vec<ConstraintEval>> = (0..=self.problem.horizon())
            .map(|k| self.stage_constraints(k, traj))
            .collect();
        self.cons
            .iter()
            .map(|c| std::mem::replace(&mut stages[c.stage][c.index], ConstraintEval::hard(0.0, None, None, ConstraintTag::Generic)))
            .collect()
    }

    /// Objective including slack penalties.
    pub fn objective(&self, traj: &Trajectory, slacks: &[f64]) -> f64 {
        let n = self.problem.horizon();
        let mut f: f64 = (0..n).map(|k| self.problem.stage_cost(k, &traj.xs[k], &traj.us[k])).sum();
        f += self.problem.terminal_cost(&traj.xs[n]);
        f + slacks.iter().map(|s| self.rho * (s + s * s)).sum::<f64>()
    }

    /// Independent dense evaluation of the KKT residual at `z` with the given
    /// multipliers, assembled from full gradient and Jacobian matrices.
    pub fn dense_kkt(&self, traj: &Trajectory, slacks: &[f64], m: &Multipliers) -> KktResidual {
        let p = self.problem;
        let (nx, nu, n) = (p.nx(), p.nu(), p.horizon());
        let nz = self.num_decision();
        let z = self.pack(traj, slacks);
        let xoff = |k: usize| k * nx;
        let uoff = |k: usize| (n + 1) * nx + k * nu;
        let soff = (n + 1) * nx + n * nu;

        let mut grad = DVector::zeros(nz);
        for k in 0..n {
            let md = p.stage_model(k, &traj.xs[k], &traj.us[k]);
            grad.rows_mut(xoff(k), nx).axpy(1.0, &md.gradient.rows(0, nx), 1.0);
            grad.rows_mut(uoff(k), nu).axpy(1.0, &md.gradient.rows(nx, nu), 1.0);
        }
        let md = p.terminal_model(&traj.xs[n]);
        grad.rows_mut(xoff(n), nx).axpy(1.0, &md.gradient.rows(0, nx), 1.0);
        for (i, s) in slacks.iter().enumerate() {
            grad[soff + i] += self.rho * (1.0 + 2.0 * s);
        }

        // equality constraints c(z) = 0 and their Jacobian
        let neq = (n + 1) * nx;
        let mut c = DVector::zeros(neq);
        let mut jc = DMatrix::zeros(neq, nz);
        c.rows_mut(0, nx).copy_from(&(&self.x0 - &traj.xs[0]));
        for i in 0..nx {
            jc[(i, xoff(0) + i)] = -1.0;
        }
        for k in 0..n {
            let st = p.step(k, &traj.xs[k], &traj.us[k], true);
            let (a, b) = st.jacobians.expect("jacobian requested");
            let r = (k + 1) * nx;
            c.rows_mut(r, nx).copy_from(&(&st.next - &traj.xs[k + 1]));
            jc.view_mut((r, xoff(k)), (nx, nx)).copy_from(&a);
            jc.view_mut((r, uoff(k)), (nx, nu)).copy_from(&b);
            for i in 0..nx {
                jc[(r + i, xoff(k + 1) + i)] = -1.0;
            }
        }
        let lambda = DVector::from_iterator(neq, m.defect.iter().flat_map(|l| l.iter().copied()));

        // inequalities g(z) >= 0
        let cons = self.all_constraints(traj);
        let ni = cons.len();
        let mut g = DVector::zeros(ni);
        let mut jg = DMatrix::zeros(ni, nz);
        for (row, (cr, ce)) in self.cons.iter().zip(&cons).enumerate() {
            g[row] = ce.value;
            if let Some(gx) = &ce.grad_x {
                jg.view_mut((row, xoff(cr.stage)), (1, nx)).copy_from(&gx.transpose());
            }
            if let Some(gu) = &ce.grad_u {
                jg.view_mut((row, uoff(cr.stage)), (1, nu)).copy_from(&gu.transpose());
            }
            if let Some(si) = cr.soft {
                g[row] += slacks[si];
                jg[(row, soff + si)] = 1.0;
            }
        }
        let mu = DVector::from_column_slice(&m.ineq);

        let mut lag = grad + jc.transpose() * &lambda - jg.transpose() * &mu;
        for k in 0..n {
            let nl = &m.input_lower[k];
            let nuu = &m.input_upper[k];
            let mut v = lag.rows_mut(uoff(k), nu);
            v -= nl;
            v += nuu;
        }
        for i in 0..self.n_soft {
            lag[soff + i] -= m.slack[i];
        }

        let mut res = KktResidual {
            stationarity: lag.amax(),
            feasibility: c.amax(),
            ..Default::default()
        };
        let upd = |acc: &mut f64, v: f64| *acc = acc.max(v);
        for (row, cr) in self.cons.iter().enumerate() {
            let _ = cr;
            upd(&mut res.feasibility, (-g[row]).max(0.0));
            upd(&mut res.complementarity, (mu[row] * g[row]).abs());
            upd(&mut res.dual_infeasibility, (-mu[row]).max(0.0));
        }
        for i in 0..self.n_soft {
            let s = z[soff + i];
            upd(&mut res.feasibility, (-s).max(0.0));
            upd(&mut res.complementarity, (m.slack[i] * s).abs());
            upd(&mut res.dual_infeasibility, (-m.slack[i]).max(0.0));
        }
        for k in 0..n {
            let (lb, ub) = p.input_bounds(k);
            let u = &traj.us[k];
            for i in 0..nu {
                upd(&mut res.feasibility, (lb[i] - u[i]).max(0.0).max(u[i] - ub[i]));
                if lb[i].is_finite() {
                    upd(&mut res.complementarity, (m.input_lower[k][i] * (u[i] - lb[i])).abs());
                }
                if ub[i].is_finite() {
                    upd(&mut res.complementarity, (m.input_upper[k][i] * (ub[i] - u[i])).abs());
                }
                upd(&mut res.dual_infeasibility, (-m.input_lower[k][i]).max(0.0).max(-m.input_upper[k][i]));
            }
        }
        res
    }
}

/// Linearization of the NLP at one iterate.
struct Linearization {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    defects: Vec<DVector<f64>>,
    models: Vec<QuadraticModel>,
    cons: Vec<ConstraintEval>,
    slacks: Vec<f64>,
    finite: bool,
}

fn slack_of(c: &ConstraintEval) -> f64 {
    (-c.value).max(0.0)
}

fn linearize<P: ShootingProblem + ?Sized>(nlp: &NlpInstance<P>, traj: &Trajectory) -> Linearization {
    let p = nlp.problem;
    let n = p.horizon();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut defects = Vec::with_capacity(n);
    let mut models = Vec::with_capacity(n + 1);
    let mut finite = true;
    for k in 0..n {
        let st = p.step(k, &traj.xs[k], &traj.us[k], true);
        let (ak, bk) = st.jacobians.expect("jacobian requested");
        let d = &st.next - &traj.xs[k + 1];
        finite &= d.iter().all(|v| v.is_finite()) && ak.iter().all(|v| v.is_finite()) && bk.iter().all(|v| v.is_finite());
        a.push(ak);
        b.push(bk);
        defects.push(d);
        models.push(p.stage_model(k, &traj.xs[k], &traj.us[k]));
    }
    models.push(p.terminal_model(&traj.xs[n]));
    finite &= models
        .iter()
        .all(|m| m.value.is_finite() && m.gradient.iter().all(|v| v.is_finite()));
    let cons = nlp.all_constraints(traj);
    finite &= cons.iter().all(|c| c.value.is_finite());
    let mut slacks = vec![0.0; nlp.n_soft];
    for (cr, c) in nlp.cons.iter().zip(&cons) {
        if let Some(si) = cr.soft {
            slacks[si] = slack_of(c);
        }
    }
    Linearization {
        a,
        b,
        defects,
        models,
        cons,
        slacks,
        finite,
    }
}

/// Multipliers of the QP solution mapped back to the NLP.
struct QpDuals {
    ineq: Vec<f64>,
    lower: Vec<DVector<f64>>,
    upper: Vec<DVector<f64>>,
}

/// Defect multipliers by the backward recursion that zeroes the state
/// stationarity; `dx`/`du` add the QP curvature terms when given.
fn defect_multipliers<P: ShootingProblem + ?Sized>(
    nlp: &NlpInstance<P>,
    lin: &Linearization,
    mu: &[f64],
    step: Option<(&[DVector<f64>], &[DVector<f64>])>,
) -> Vec<DVector<f64>> {
    let p = nlp.problem;
    let (nx, n) = (p.nx(), p.horizon());
    let mut ms: Vec<DVector<f64>> = (0..=n)
        .map(|k| lin.models[k].gradient.rows(0, nx).into_owned())
        .collect();
    if let Some((dx, du)) = step {
        for k in 0..=n {
            let h = &lin.models[k].hessian;
            let mut add = h.view((0, 0), (nx, nx)) * &dx[k];
            if k < n {
                add += h.view((0, nx), (nx, p.nu())) * &du[k];
            }
            ms[k] += add;
        }
    }
    for ((cr, c), m) in nlp.cons.iter().zip(&lin.cons).zip(mu) {
        if let Some(gx) = &c.grad_x {
            ms[cr.stage].axpy(-m, gx, 1.0);
        }
    }
    let mut lambda = vec![DVector::zeros(nx); n + 1];
    lambda[n] = ms[n].clone();
    for k in (0..n).rev() {
        lambda[k] = &ms[k] + lin.a[k].transpose() * &lambda[k + 1];
    }
    lambda
}

fn kkt_residual<P: ShootingProblem + ?Sized>(nlp: &NlpInstance<P>, lin: &Linearization, traj: &Trajectory, duals: &QpDuals) -> (KktResidual, Multipliers) {
    let p = nlp.problem;
    let (nx, nu, n) = (p.nx(), p.nu(), p.horizon());
    let lambda = defect_multipliers(nlp, lin, &duals.ineq, None);
    let mut res = KktResidual::default();
    let mut grad_u: Vec<DVector<f64>> = (0..n)
        .map(|k| lin.models[k].gradient.rows(nx, nu) + lin.b[k].transpose() * &lambda[k + 1])
        .collect();
    for ((cr, c), m) in nlp.cons.iter().zip(&lin.cons).zip(&duals.ineq) {
        if let Some(gu) = &c.grad_u {
            grad_u[cr.stage].axpy(-m, gu, 1.0);
        }
        let value = c.value + cr.soft.map_or(0.0, |si| lin.slacks[si]);
        res.feasibility = res.feasibility.max((-value).max(0.0));
        res.complementarity = res.complementarity.max((m * value).abs());
        res.dual_infeasibility = res.dual_infeasibility.max((-m).max(0.0));
    }
    for k in 0..n {
        grad_u[k] -= &duals.lower[k];
        grad_u[k] += &duals.upper[k];
        res.stationarity = res.stationarity.max(grad_u[k].amax());
        let (lb, ub) = p.input_bounds(k);
        let u = &traj.us[k];
        for i in 0..nu {
            res.feasibility = res.feasibility.max((lb[i] - u[i]).max(0.0).max(u[i] - ub[i]));
            if lb[i].is_finite() {
                res.complementarity = res.complementarity.max((duals.lower[k][i] * (u[i] - lb[i])).abs());
            }
            if ub[i].is_finite() {
                res.complementarity = res.complementarity.max((duals.upper[k][i] * (ub[i] - u[i])).abs());
            }
            res.dual_infeasibility = res
                .dual_infeasibility
                .max((-duals.lower[k][i]).max(0.0).max(-duals.upper[k][i]));
        }
    }
    for d in &lin.defects {
        res.feasibility = res.feasibility.max(d.amax());
    }
    res.feasibility = res.feasibility.max((&nlp.x0 - &traj.xs[0]).amax());
    // slack multipliers close the slack stationarity exactly
    let mut slack_mult = vec![0.0; nlp.n_soft];
    for (cr, m) in nlp.cons.iter().zip(&duals.ineq) {
        if let Some(si) = cr.soft {
            let s = lin.slacks[si];
            let eta = nlp.rho * (1.0 + 2.0 * s) - m;
            slack_mult[si] = eta;
            res.complementarity = res.complementarity.max((eta * s).abs());
            res.dual_infeasibility = res.dual_infeasibility.max((-eta).max(0.0));
        }
    }
    let mults = Multipliers {
        defect: lambda,
        ineq: duals.ineq.clone(),
        slack: slack_mult,
        input_lower: duals.lower.clone(),
        input_upper: duals.upper.clone(),
    };
    (res, mults)
}

/// Condensed QP in `[du_0 .. du_{N-1}, slacks of included soft constraints]`.
struct Condensed {
    qp: QpProblem,
    /// QP row index for each canonical constraint, if included.
    rows: Vec<Option<usize>>,
}

fn condense<P: ShootingProblem + ?Sized>(nlp: &NlpInstance<P>, lin: &Linearization, traj: &Trajectory, relaxed: bool) -> Condensed {
    let p = nlp.problem;
    let (nx, nu, n) = (p.nx(), p.nu(), p.horizon());
    let nuu = n * nu;

    // free response xi_k and sensitivities G[k][j] of dx_k to du_j
    let mut xi = vec![DVector::zeros(nx); n + 1];
    for k in 0..n {
        xi[k + 1] = &lin.a[k] * &xi[k] + &lin.defects[k];
    }
    let mut sens: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); n + 1];
    for k in 1..=n {
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            if j == k - 1 {
                row.push(lin.b[k - 1].clone());
            } else {
                row.push(&lin.a[k - 1] * &sens[k - 1][j]);
            }
        }
        sens[k] = row;
    }

    let qxx = |k: usize| lin.models[k].hessian.view((0, 0), (nx, nx));
    let qx = |k: usize| lin.models[k].gradient.rows(0, nx);

    // included constraints
    let mut rows = vec![None; nlp.cons.len()];
    let mut n_rows = 0;
    let mut soft_cols = Vec::new();
    for (i, (cr, c)) in nlp.cons.iter().zip(&lin.cons).enumerate() {
        let state_dep = c.grad_x.is_some() && cr.stage > 0;
        if relaxed && !c.soft && state_dep {
            continue;
        }
        if c.value < c.screen {
            rows[i] = Some(n_rows);
            n_rows += 1;
            if c.soft {
                soft_cols.push(i);
            }
        }
    }
    let nv = nuu + soft_cols.len();

    let mut h = DMatrix::zeros(nv, nv);
    let mut g = DVector::zeros(nv);
    // gradient: backward recursion on the free response
    let mut mu_next = qx(n) + qxx(n) * &xi[n];
    for k in (0..n).rev() {
        let m = &lin.models[k];
        let r = m.gradient.rows(nx, nu);
        let s = m.hessian.view((nx, 0), (nu, nx));
        let gk = r + s * &xi[k] + lin.b[k].transpose() * &mu_next;
        g.rows_mut(k * nu, nu).copy_from(&gk);
        mu_next = qx(k) + qxx(k) * &xi[k] + lin.a[k].transpose() * &mu_next;
    }
    // Hessian blocks via P^(j)_k = Q_k G_kj + A_k^T P^(j)_{k+1}
    for j in 0..n {
        let mut pk = qxx(n) * &sens[n][j];
        for i in (j..n).rev() {
            // pk holds P^(j)_{i+1}
            let hij = if i == j {
                lin.b[i].transpose() * &pk + lin.models[i].hessian.view((nx, nx), (nu, nu))
            } else {
                lin.b[i].transpose() * &pk + lin.models[i].hessian.view((nx, 0), (nu, nx)) * &sens[i][j]
            };
            h.view_mut((i * nu, j * nu), (nu, nu)).copy_from(&hij);
            if i != j {
                h.view_mut((j * nu, i * nu), (nu, nu)).copy_from(&hij.transpose());
            }
            if i > j {
                pk = qxx(i) * &sens[i][j] + lin.a[i].transpose() * &pk;
            }
        }
    }
    for (c, _) in soft_cols.iter().enumerate() {
        h[(nuu + c, nuu + c)] = 2.0 * nlp.rho;
        g[nuu + c] = nlp.rho;
    }

    let mut qp = QpProblem::new(h, g);
    for k in 0..n {
        let (lb, ub) = p.input_bounds(k);
        for i in 0..nu {
            qp.lb[k * nu + i] = lb[i] - traj.us[k][i];
            qp.ub[k * nu + i] = ub[i] - traj.us[k][i];
        }
    }
    for c in 0..soft_cols.len() {
        qp.lb[nuu + c] = 0.0;
    }
    let mut a = DMatrix::zeros(n_rows, nv);
    let mut al = DVector::zeros(n_rows);
    let au = DVector::from_element(n_rows, f64::INFINITY);
    let mut soft_col = 0;
    for (i, (cr, c)) in nlp.cons.iter().zip(&lin.cons).enumerate() {
        let Some(row) = rows[i] else { continue };
        let k = cr.stage;
        let mut rhs = -c.value;
        if let (Some(gx), true) = (&c.grad_x, k > 0) {
            rhs -= gx.dot(&xi[k]);
            for j in 0..k {
                let coeff = sens[k][j].transpose() * gx;
                a.view_mut((row, j * nu), (1, nu)).copy_from(&coeff.transpose());
            }
        }
        if let Some(gu) = &c.grad_u {
            let mut v = a.view_mut((row, k * nu), (1, nu));
            v += gu.transpose();
        }
        if c.soft {
            a[(row, nuu + soft_col)] = 1.0;
            soft_col += 1;
        }
        al[row] = rhs;
    }
    qp.a = a;
    qp.al = al;
    qp.au = au;
    Condensed { qp, rows }
}

fn merit<P: ShootingProblem + ?Sized>(nlp: &NlpInstance<P>, traj: &Trajectory, nu_pen: f64) -> Option<f64> {
    let p = nlp.problem;
    let n = p.horizon();
    let mut f = 0.0;
    let mut viol = 0.0;
    for k in 0..n {
        f += p.stage_cost(k, &traj.xs[k], &traj.us[k]);
        let st = p.step(k, &traj.xs[k], &traj.us[k], false);
        viol += (&st.next - &traj.xs[k + 1]).lp_norm(1);
    }
    f += p.terminal_cost(&traj.xs[n]);
    let cons = nlp.all_constraints(traj);
    for c in &cons {
        let s = slack_of(c);
        if c.soft {
            f += nlp.rho * (s + s * s);
        } else {
            viol += s;
        }
    }
    let m = f + nu_pen * viol;
    m.is_finite().then_some(m)
}

/// Solves the NLP from `guess` (whose first state is replaced by the pinned `x0`).
pub fn sqp_solve<P: ShootingProblem + ?Sized>(nlp: &NlpInstance<P>, guess: &Trajectory, settings: &SqpSettings) -> SqpSolution {
    let p = nlp.problem;
    let (nx, nu, n) = (p.nx(), p.nu(), p.horizon());
    let mut traj = guess.clone();
    traj.xs[0] = nlp.x0.clone();
    for k in 0..n {
        let (lb, ub) = p.input_bounds(k);
        for i in 0..nu {
            traj.us[k][i] = traj.us[k][i].clamp(lb[i], ub[i]);
        }
    }

    let zero_duals = QpDuals {
        ineq: vec![0.0; nlp.cons.len()],
        lower: vec![DVector::zeros(nu); n],
        upper: vec![DVector::zeros(nu); n],
    };
    let mut duals: Option<QpDuals> = None;
    let mut merit_log = Vec::new();
    let mut nu_pen: f64 = 1.0;
    let mut last_step = f64::INFINITY;
    let mut regularization: f64 = 0.0;
    let mut relaxed = false;
    let mut iterations = 0;

    let fail = |traj: Trajectory, lin: Option<&Linearization>, msg: String, it: usize, log: Vec<(f64, f64)>, reg: f64| SqpSolution {
        slacks: lin.map_or(vec![0.0; nlp.n_soft], |l| l.slacks.clone()),
        trajectory: traj,
        multipliers: Multipliers::default(),
        status: SolveStatus::Failed,
        iterations: it,
        kkt: KktResidual {
            stationarity: f64::INFINITY,
            ..Default::default()
        },
        merit_log: log,
        last_step: f64::NAN,
        regularization: reg,
        relaxed: false,
        diagnostic: Some(msg),
    };

    loop {
        let lin = linearize(nlp, &traj);
        if !lin.finite {
            return fail(traj, None, "non-finite value in iterate".into(), iterations, merit_log, regularization);
        }
        let (kkt, mults) = kkt_residual(nlp, &lin, &traj, duals.as_ref().unwrap_or(&zero_duals));
        let done = duals.is_some() && kkt.total() <= settings.kkt_tol;
        let stalled = duals.is_some() && last_step <= 1e-14;
        if done || stalled || iterations >= settings.max_iter {
            let status = if relaxed {
                SolveStatus::InfeasibleSoft
            } else if done {
                SolveStatus::Converged
            } else {
                SolveStatus::MaxIter
            };
            return SqpSolution {
                trajectory: traj,
                slacks: lin.slacks.clone(),
                multipliers: mults,
                status,
                iterations,
                kkt,
                merit_log,
                last_step,
                regularization,
                relaxed,
                diagnostic: None,
            };
        }
        iterations += 1;

        // QP subproblem, with relaxation of hard state constraints on infeasibility
        let mut sol = None;
        relaxed = false;
        for relax in [false, true] {
            let mut cd = condense(nlp, &lin, &traj, relax);
            let mut shift = 0.0;
            let base = cd.qp.h.diagonal().amax().max(1e-12);
            // inputs sitting on a bound are expected to stay there
            let guess: Vec<BoundGuess> = (0..cd.qp.num_vars())
                .map(|i| {
                    if i >= n * nu {
                        BoundGuess::Free
                    } else if cd.qp.lb[i].abs() <= 1e-12 {
                        BoundGuess::Lower
                    } else if cd.qp.ub[i].abs() <= 1e-12 {
                        BoundGuess::Upper
                    } else {
                        BoundGuess::Free
                    }
                })
                .collect();
            let result = loop {
                match qp::solve_with_guess(&cd.qp, &guess) {
                    Err(QpError::NotConvex) if shift < 1e6 * base => {
                        let next = if shift == 0.0 { 1e-10 * base } else { shift * 100.0 };
                        for i in 0..cd.qp.num_vars() {
                            cd.qp.h[(i, i)] += next - shift;
                        }
                        shift = next;
                    }
                    other => break other,
                }
            };
            regularization = regularization.max(shift);
            match result {
                Ok(s) => {
                    sol = Some((cd, s));
                    relaxed = relax;
                    break;
                }
                Err(QpError::Infeasible) if !relax => continue,
                Err(e) => {
                    return fail(traj, Some(&lin), format!("QP subproblem: {e}"), iterations, merit_log, regularization);
                }
            }
        }
        let Some((cd, qs)) = sol else {
            return fail(traj, Some(&lin), "QP subproblem infeasible after relaxation".into(), iterations, merit_log, regularization);
        };

        // expand the step
        let du: Vec<DVector<f64>> = (0..n).map(|k| qs.x.rows(k * nu, nu).into_owned()).collect();
        let mut dx = vec![DVector::zeros(nx); n + 1];
        for k in 0..n {
            dx[k + 1] = &lin.a[k] * &dx[k] + &lin.b[k] * &du[k] + &lin.defects[k];
        }
        let mut ineq = vec![0.0; nlp.cons.len()];
        for (i, r) in cd.rows.iter().enumerate() {
            if let Some(r) = r {
                ineq[i] = qs.row_lower[*r];
            }
        }
        let new_duals = QpDuals {
            ineq,
            lower: (0..n).map(|k| qs.bound_lower.rows(k * nu, nu).into_owned()).collect(),
            upper: (0..n).map(|k| qs.bound_upper.rows(k * nu, nu).into_owned()).collect(),
        };

        // merit penalty from the QP multipliers
        let lam_qp = defect_multipliers(nlp, &lin, &new_duals.ineq, Some((&dx, &du)));
        let mut max_mult = lam_qp.iter().fold(0.0f64, |a, l| a.max(l.amax()));
        for (cr, m) in nlp.cons.iter().zip(&new_duals.ineq) {
            if cr.soft.is_none() {
                max_mult = max_mult.max(m.abs());
            }
        }
        nu_pen = nu_pen.max(1.1 * max_mult + 1e-3);

        // directional derivative of the merit along the step
        let mut dir = 0.0;
        for k in 0..=n {
            let gm = &lin.models[k].gradient;
            dir += gm.rows(0, nx).dot(&dx[k]);
            if k < n {
                dir += gm.rows(nx, nu).dot(&du[k]);
            }
        }
        dir -= nu_pen * lin.defects.iter().map(|d| d.lp_norm(1)).sum::<f64>();
        for (cr, c) in nlp.cons.iter().zip(&lin.cons) {
            let dg = c.directional(&dx[cr.stage], du.get(cr.stage));
            let w = if c.soft {
                nlp.rho * (1.0 + 2.0 * slack_of(c))
            } else {
                nu_pen
            };
            if c.value < 0.0 {
                dir -= w * dg;
            } else if c.value == 0.0 {
                dir += w * (-dg).max(0.0);
            }
        }

        let phi0 = merit(nlp, &traj, nu_pen).expect("finite merit at accepted iterate");
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= settings.ls_min_step {
            let trial = Trajectory {
                xs: traj.xs.iter().zip(&dx).map(|(x, d)| x + d * alpha).collect(),
                us: traj.us.iter().zip(&du).map(|(u, d)| u + d * alpha).collect(),
            };
            if let Some(phi) = merit(nlp, &trial, nu_pen) {
                if phi <= phi0 + settings.ls_armijo * alpha * dir.min(0.0) {
                    accepted = Some((trial, phi));
                    break;
                }
            }
            alpha *= settings.ls_beta;
        }
        let Some((mut trial, phi)) = accepted else {
            // no acceptable step: report the current iterate
            last_step = 0.0;
            duals.get_or_insert(new_duals);
            continue;
        };
        // exact clamp against rounding in u + alpha du
        for k in 0..n {
            let (lb, ub) = p.input_bounds(k);
            for i in 0..nu {
                trial.us[k][i] = trial.us[k][i].clamp(lb[i], ub[i]);
            }
        }
        last_step = du
            .iter()
            .chain(dx.iter())
            .fold(0.0f64, |a, d| a.max(d.amax()))
            * alpha;
        merit_log.push((phi0, phi));
        traj = trial;
        duals = Some(new_duals);
    }
}
