#![allow(dead_code)]

pub mod checks;

use freeflyer::objective::QuadraticModel;
use freeflyer::ocp::{ConstraintEval, ConstraintTag, ShootingProblem, Step, Trajectory};
use freeflyer::qp::{self, QpProblem};
use nalgebra::{DMatrix, DVector};

/// Point mass in `dim` axes: `x = [p, v]`, `u = acceleration`, exact ZOH.
pub struct DoubleIntegrator {
    pub dim: usize,
    pub n: usize,
    pub dt: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_n: DMatrix<f64>,
    pub u_max: f64,
    /// Optional hard bound on every velocity component.
    pub v_max: Option<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl DoubleIntegrator {
    pub fn new(dim: usize, n: usize, dt: f64) -> Self {
        let nx = 2 * dim;
        let mut a = DMatrix::identity(nx, nx);
        let mut b = DMatrix::zeros(nx, dim);
        for i in 0..dim {
            a[(i, dim + i)] = dt;
            b[(i, i)] = 0.5 * dt * dt;
            b[(dim + i, i)] = dt;
        }
        let q = DMatrix::from_diagonal(&DVector::from_fn(nx, |i, _| if i < dim { 2.0 } else { 0.5 }));
        Self {
            dim,
            n,
            dt,
            q_n: &q * 10.0,
            q,
            r: DMatrix::identity(dim, dim) * 0.3,
            u_max: f64::INFINITY,
            v_max: None,
            a,
            b,
        }
    }

    pub fn zero_guess(&self) -> Trajectory {
        Trajectory {
            xs: vec![DVector::zeros(2 * self.dim); self.n + 1],
            us: vec![DVector::zeros(self.dim); self.n],
        }
    }

    /// Finite-horizon LQR by the Riccati recursion, ignoring all bounds.
    pub fn lqr(&self, x0: &DVector<f64>) -> Trajectory {
        let mut p = self.q_n.clone();
        let mut gains = vec![DMatrix::zeros(self.dim, 2 * self.dim); self.n];
        for k in (0..self.n).rev() {
            let s = &self.r + self.b.transpose() * &p * &self.b;
            let k_gain = s.lu().solve(&(self.b.transpose() * &p * &self.a)).unwrap();
            p = &self.q + self.a.transpose() * &p * (&self.a - &self.b * &k_gain);
            p = (&p + p.transpose()) * 0.5;
            gains[k] = k_gain;
        }
        let mut xs = vec![x0.clone()];
        let mut us = Vec::new();
        for k_gain in &gains {
            let x = xs.last().unwrap();
            let u = -(k_gain * x);
            xs.push(&self.a * x + &self.b * &u);
            us.push(u);
        }
        Trajectory { xs, us }
    }

    /// Dense QP over `[x_1..x_N, u_0..u_{N-1}]` with equality dynamics rows.
    pub fn dense_oracle(&self, x0: &DVector<f64>) -> Trajectory {
        let (nx, nu, n) = (2 * self.dim, self.dim, self.n);
        let nv = n * nx + n * nu;
        let xo = |k: usize| (k - 1) * nx;
        let uo = |k: usize| n * nx + k * nu;
        let mut h = DMatrix::zeros(nv, nv);
        for k in 1..=n {
            let w = if k == n { &self.q_n } else { &self.q };
            h.view_mut((xo(k), xo(k)), (nx, nx)).copy_from(&(w * 2.0));
        }
        for k in 0..n {
            h.view_mut((uo(k), uo(k)), (nu, nu)).copy_from(&(&self.r * 2.0));
        }
        let mut p = QpProblem::new(h, DVector::zeros(nv));
        for k in 0..n {
            for i in 0..nu {
                p.lb[uo(k) + i] = -self.u_max;
                p.ub[uo(k) + i] = self.u_max;
            }
        }
        if let Some(v) = self.v_max {
            for k in 1..=n {
                for i in 0..self.dim {
                    p.lb[xo(k) + self.dim + i] = -v;
                    p.ub[xo(k) + self.dim + i] = v;
                }
            }
        }
        let mut a = DMatrix::zeros(n * nx, nv);
        let mut rhs = DVector::zeros(n * nx);
        for k in 0..n {
            let r = k * nx;
            a.view_mut((r, xo(k + 1)), (nx, nx)).copy_from(&DMatrix::identity(nx, nx));
            a.view_mut((r, uo(k)), (nx, nu)).copy_from(&(-&self.b));
            if k == 0 {
                rhs.rows_mut(r, nx).copy_from(&(&self.a * x0));
            } else {
                a.view_mut((r, xo(k)), (nx, nx)).copy_from(&(-&self.a));
            }
        }
        p.a = a;
        p.al = rhs.clone();
        p.au = rhs;
        let s = qp::solve(&p).expect("oracle QP");
        let mut xs = vec![x0.clone()];
        xs.extend((1..=n).map(|k| s.x.rows(xo(k), nx).into_owned()));
        let us = (0..n).map(|k| s.x.rows(uo(k), nu).into_owned()).collect();
        Trajectory { xs, us }
    }
}

pub fn trajectory_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.xs.iter().zip(&b.xs) {
        s += (x - y).norm_squared();
    }
    for (x, y) in a.us.iter().zip(&b.us) {
        s += (x - y).norm_squared();
    }
    s.sqrt()
}

impl ShootingProblem for DoubleIntegrator {
    fn nx(&self) -> usize {
        2 * self.dim
    }
    fn nu(&self) -> usize {
        self.dim
    }
    fn horizon(&self) -> usize {
        self.n
    }
    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>, jacobian: bool) -> Step {
        Step {
            next: &self.a * x + &self.b * u,
            jacobians: jacobian.then(|| (self.a.clone(), self.b.clone())),
        }
    }
    fn stage_model(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> QuadraticModel {
        let (nx, nu) = (2 * self.dim, self.dim);
        let mut gradient = DVector::zeros(nx + nu);
        gradient.rows_mut(0, nx).copy_from(&(&self.q * x * 2.0));
        gradient.rows_mut(nx, nu).copy_from(&(&self.r * u * 2.0));
        let mut hessian = DMatrix::zeros(nx + nu, nx + nu);
        hessian.view_mut((0, 0), (nx, nx)).copy_from(&(&self.q * 2.0));
        hessian.view_mut((nx, nx), (nu, nu)).copy_from(&(&self.r * 2.0));
        QuadraticModel {
            value: x.dot(&(&self.q * x)) + u.dot(&(&self.r * u)),
            gradient,
            hessian,
        }
    }
    fn terminal_model(&self, x: &DVector<f64>) -> QuadraticModel {
        QuadraticModel {
            value: x.dot(&(&self.q_n * x)),
            gradient: &self.q_n * x * 2.0,
            hessian: &self.q_n * 2.0,
        }
    }
    fn input_bounds(&self, _k: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(self.dim, -self.u_max),
            DVector::from_element(self.dim, self.u_max),
        )
    }
    fn constraints(&self, _k: usize, x: &DVector<f64>, _u: Option<&DVector<f64>>) -> Vec<ConstraintEval> {
        let Some(v) = self.v_max else { return Vec::new() };
        let nx = 2 * self.dim;
        let mut out = Vec::new();
        for i in 0..self.dim {
            for sign in [1.0, -1.0] {
                let mut g = DVector::zeros(nx);
                g[self.dim + i] = -sign;
                out.push(ConstraintEval::hard(v - sign * x[self.dim + i], Some(g), None, ConstraintTag::Velocity));
            }
        }
        out
    }
}
