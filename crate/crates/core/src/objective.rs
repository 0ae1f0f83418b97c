//! Stage and terminal costs for linger (quadratic tracking) and flyby
//! (contouring, lag and progress) modes, with analytic derivatives.

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, SMatrix, SVector, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::dynamics::{skew, ControlInput, State, StateVector, STATE_DIM};
use crate::geometry::ReferencePath;

/// Dimension of the tracking error: position, attitude, velocity, rate.
pub const ERROR_DIM: usize = 12;
pub type ErrorVector = SVector<f64, ERROR_DIM>;
pub type ErrorMatrix = SMatrix<f64, ERROR_DIM, ERROR_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("invalid weight {name}: {reason}")]
    Invalid { name: &'static str, reason: String },
}

fn check_psd(name: &'static str, m: &DMatrix<f64>, strict: bool) -> Result<(), WeightError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(WeightError::Invalid {
            name,
            reason: "non-finite entry".into(),
        });
    }
    let scale = m.abs().max().max(1.0);
    if (m - m.transpose()).abs().max() > 1e-12 * scale {
        return Err(WeightError::Invalid {
            name,
            reason: "not symmetric".into(),
        });
    }
    let eig = SymmetricEigen::new(m.clone());
    let min = eig.eigenvalues.min();
    if (strict && min <= 0.0) || min < -1e-12 * scale {
        return Err(WeightError::Invalid {
            name,
            reason: format!("smallest eigenvalue {min:e}"),
        });
    }
    Ok(())
}

/// Quadratic tracking weights over the 12-dim error.
#[derive(Debug, Clone, PartialEq)]
pub struct LingerWeights {
    pub q: ErrorMatrix,
    pub r: DMatrix<f64>,
    pub q_n: ErrorMatrix,
}

impl LingerWeights {
    pub fn new(q: ErrorMatrix, r: DMatrix<f64>, q_n: ErrorMatrix) -> Result<Self, WeightError> {
        let w = Self { q, r, q_n };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), WeightError> {
        check_psd("Q", &DMatrix::from_column_slice(12, 12, self.q.as_slice()), false)?;
        check_psd("Q_N", &DMatrix::from_column_slice(12, 12, self.q_n.as_slice()), false)?;
        if !self.r.is_square() {
            return Err(WeightError::Invalid {
                name: "R",
                reason: "not square".into(),
            });
        }
        check_psd("R", &self.r, true)
    }

    /// Diagonal weights `Q = diag(10, 5, 1, 1 per block)`, `R = 0.1 I`, `Q_N = 10 Q`.
    pub fn default_for(n_u: usize) -> Self {
        let q = ErrorMatrix::from_diagonal(&diag_blocks([10.0, 5.0, 1.0, 1.0]));
        Self {
            q,
            r: DMatrix::identity(n_u, n_u) * 0.1,
            q_n: q * 10.0,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            q: self.q * alpha,
            r: &self.r * alpha,
            q_n: self.q_n * alpha,
        }
    }
}

/// Expands four per-block weights into the 12-dim diagonal.
pub fn diag_blocks(w: [f64; 4]) -> ErrorVector {
    ErrorVector::from_fn(|i, _| w[i / 3])
}

/// Contouring, lag, progress and attitude weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FlybyWeights {
    pub q_c: f64,
    pub q_l: f64,
    pub mu: f64,
    pub q_att: f64,
    pub r: DMatrix<f64>,
}

impl FlybyWeights {
    pub fn new(q_c: f64, q_l: f64, mu: f64, q_att: f64, r: DMatrix<f64>) -> Result<Self, WeightError> {
        let w = Self { q_c, q_l, mu, q_att, r };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), WeightError> {
        for (name, v) in [("q_c", self.q_c), ("q_l", self.q_l), ("mu", self.mu), ("q_att", self.q_att)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(WeightError::Invalid {
                    name,
                    reason: format!("must be finite and nonnegative, got {v}"),
                });
            }
        }
        if !self.r.is_square() {
            return Err(WeightError::Invalid {
                name: "R",
                reason: "not square".into(),
            });
        }
        check_psd("R", &self.r, true)
    }

    pub fn default_for(n_u: usize) -> Self {
        Self {
            q_c: 50.0,
            q_l: 10.0,
            mu: 2.0,
            q_att: 5.0,
            r: DMatrix::identity(n_u, n_u) * 0.1,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            q_c: self.q_c * alpha,
            q_l: self.q_l * alpha,
            mu: self.mu * alpha,
            q_att: self.q_att * alpha,
            r: &self.r * alpha,
        }
    }
}

/// Vehicle state augmented with path progress and its rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub state: State,
    pub s: f64,
    pub v_s: f64,
}

/// `2 vec(q_ref^-1 q)` on the shortest-rotation branch.
pub fn attitude_error(q: &Quaternion<f64>, q_ref: &Quaternion<f64>) -> Vector3<f64> {
    attitude_error_jacobian(q, q_ref).0
}

/// Attitude error and its Jacobian with respect to `(q_x, q_y, q_z, q_w)`.
/// The map is linear in `q` on each branch, so the Jacobian is exact.
pub fn attitude_error_jacobian(q: &Quaternion<f64>, q_ref: &Quaternion<f64>) -> (Vector3<f64>, SMatrix<f64, 3, 4>) {
    let (er, e) = (q_ref.imag(), q.imag());
    let w = q_ref.w * q.w + er.dot(&e);
    // written out so that q == q_ref cancels exactly
    let v = e * q_ref.w - er * q.w - er.cross(&e);
    let sign = if w < 0.0 { -2.0 } else { 2.0 };
    let mut jac = SMatrix::<f64, 3, 4>::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&((Matrix3::identity() * q_ref.w - skew(&er)) * sign));
    jac.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-er * sign));
    (v * sign, jac)
}

/// Derivative of the attitude error with respect to the reference quaternion
/// along `dq_ref`, holding the branch fixed.
fn attitude_error_ref_rate(q: &Quaternion<f64>, q_ref: &Quaternion<f64>, dq_ref: &Quaternion<f64>) -> Vector3<f64> {
    let qe = q_ref.conjugate() * q;
    let sign = if qe.w < 0.0 { -2.0 } else { 2.0 };
    (dq_ref.conjugate() * q).imag() * sign
}

/// 12-dim tracking error and its constant Jacobian (12x13) w.r.t. the state vector.
pub fn tracking_error(x: &State, x_ref: &State) -> (ErrorVector, SMatrix<f64, ERROR_DIM, STATE_DIM>) {
    let (att, ja) = attitude_error_jacobian(&x.attitude, &x_ref.attitude);
    let mut e = ErrorVector::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(x.position - x_ref.position));
    e.fixed_rows_mut::<3>(3).copy_from(&att);
    e.fixed_rows_mut::<3>(6).copy_from(&(x.velocity - x_ref.velocity));
    e.fixed_rows_mut::<3>(9).copy_from(&(x.angular_rate - x_ref.angular_rate));
    let mut j = SMatrix::<f64, ERROR_DIM, STATE_DIM>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    j.fixed_view_mut::<3, 4>(3, 3).copy_from(&ja);
    j.fixed_view_mut::<3, 3>(6, 7).fill_with_identity();
    j.fixed_view_mut::<3, 3>(9, 10).fill_with_identity();
    (e, j)
}

fn input_cost(u: &DVector<f64>, r: &DMatrix<f64>) -> f64 {
    u.dot(&(r * u))
}

/// `e^T Q e + u^T R u`.
pub fn linger_stage_cost(x: &State, u: &ControlInput, x_ref: &State, w: &LingerWeights) -> f64 {
    let (e, _) = tracking_error(x, x_ref);
    e.dot(&(w.q * e)) + input_cost(&u.0, &w.r)
}

/// `e_N^T Q_N e_N`.
pub fn linger_terminal_cost(x_n: &State, x_ref: &State, w: &LingerWeights) -> f64 {
    let (e, _) = tracking_error(x_n, x_ref);
    e.dot(&(w.q_n * e))
}

/// Gradient of a cost with respect to its arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGradient {
    /// With respect to the 13-dim state vector.
    pub x: StateVector,
    /// With respect to path progress (flyby only).
    pub s: f64,
    pub u: DVector<f64>,
    /// With respect to progress rate (flyby only).
    pub v_s: f64,
    /// Set when the path derivative is one-sided (evaluated at a kink).
    pub one_sided: bool,
}

pub fn linger_stage_gradient(x: &State, u: &ControlInput, x_ref: &State, w: &LingerWeights) -> CostGradient {
    let (e, j) = tracking_error(x, x_ref);
    CostGradient {
        x: j.transpose() * (w.q * e) * 2.0,
        s: 0.0,
        u: &w.r * &u.0 * 2.0,
        v_s: 0.0,
        one_sided: false,
    }
}

pub fn linger_terminal_gradient(x_n: &State, x_ref: &State, w: &LingerWeights) -> StateVector {
    let (e, j) = tracking_error(x_n, x_ref);
    j.transpose() * (w.q_n * e) * 2.0
}

/// Contouring decomposition and its derivatives at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct FlybyEval {
    pub cost: f64,
    pub e_c: f64,
    pub e_l: f64,
    pub attitude_error: Vector3<f64>,
    /// `s` was outside `[0, L]` and has been clamped.
    pub clamped: bool,
    pub at_kink: bool,
    /// Stacked residual `[sqrt(q_c) e_perp, sqrt(q_l) e_l, sqrt(q_att) a]`.
    residual: SVector<f64, 7>,
    /// Residual Jacobian w.r.t. `[x (13), s]`.
    jacobian: SMatrix<f64, 7, 14>,
}

fn flyby_terms(x: &State, s: f64, path: &ReferencePath, w: &FlybyWeights) -> FlybyEval {
    let length = path.length();
    let clamped = !(0.0..=length).contains(&s);
    if clamped {
        log::warn!("flyby progress {s} outside [0, {length}], clamped");
    }
    let smp = path.sample(s);
    let t = smp.tangent;
    let kappa = smp.curvature;
    let e = x.position - smp.position;
    let e_l = t.dot(&e);
    let e_perp = e - t * e_l;
    let del_ds = kappa.dot(&e) - 1.0;
    let dperp_ds = -t - t * del_ds - kappa * e_l;
    let (att, ja) = attitude_error_jacobian(&x.attitude, &smp.orientation);
    let datt_ds = attitude_error_ref_rate(&x.attitude, &smp.orientation, &smp.orientation_rate);

    let (sc, sl, sa) = (w.q_c.sqrt(), w.q_l.sqrt(), w.q_att.sqrt());
    let mut residual = SVector::<f64, 7>::zeros();
    residual.fixed_rows_mut::<3>(0).copy_from(&(e_perp * sc));
    residual[3] = e_l * sl;
    residual.fixed_rows_mut::<3>(4).copy_from(&(att * sa));

    let mut jacobian = SMatrix::<f64, 7, 14>::zeros();
    let proj = Matrix3::identity() - t * t.transpose();
    jacobian.fixed_view_mut::<3, 3>(0, 0).copy_from(&(proj * sc));
    jacobian.fixed_view_mut::<1, 3>(3, 0).copy_from(&(t.transpose() * sl));
    jacobian.fixed_view_mut::<3, 4>(4, 3).copy_from(&(ja * sa));
    if !clamped {
        jacobian.fixed_view_mut::<3, 1>(0, 13).copy_from(&(dperp_ds * sc));
        jacobian[(3, 13)] = del_ds * sl;
        jacobian.fixed_view_mut::<3, 1>(4, 13).copy_from(&(datt_ds * sa));
    }

    FlybyEval {
        cost: residual.norm_squared(),
        e_c: e_perp.norm(),
        e_l,
        attitude_error: att,
        clamped,
        at_kink: smp.at_kink,
        residual,
        jacobian,
    }
}

/// Contouring, lag and attitude terms without input or progress terms.
pub fn evaluate_flyby(x: &State, s: f64, path: &ReferencePath, w: &FlybyWeights) -> FlybyEval {
    flyby_terms(x, s, path, w)
}

/// `q_c e_c^2 + q_l e_l^2 + q_att |a|^2 + u^T R u - mu v_s dt`.
pub fn flyby_stage_cost(xa: &AugmentedState, u: &ControlInput, path: &ReferencePath, w: &FlybyWeights, dt: f64) -> f64 {
    flyby_terms(&xa.state, xa.s, path, w).cost + input_cost(&u.0, &w.r) - w.mu * xa.v_s * dt
}

/// Terminal flyby cost: the tracking terms at the last stage.
pub fn flyby_terminal_cost(xa: &AugmentedState, path: &ReferencePath, w: &FlybyWeights) -> f64 {
    flyby_terms(&xa.state, xa.s, path, w).cost
}

pub fn flyby_stage_gradient(
    xa: &AugmentedState,
    u: &ControlInput,
    path: &ReferencePath,
    w: &FlybyWeights,
    dt: f64,
) -> CostGradient {
    let ev = flyby_terms(&xa.state, xa.s, path, w);
    let g = ev.jacobian.transpose() * ev.residual * 2.0;
    CostGradient {
        x: g.fixed_rows::<13>(0).into_owned(),
        s: g[13],
        u: &w.r * &u.0 * 2.0,
        v_s: -w.mu * dt,
        one_sided: ev.at_kink,
    }
}

/// A local quadratic model `value + g^T d + 1/2 d^T H d` of a stage cost
/// over `[x_aug, u_aug]`. `H` is the Gauss-Newton curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticModel {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Linger stage model over `[x (13), u]`; exact since the error is linear in `x`.
pub fn linger_stage_model(x: &State, u: &DVector<f64>, x_ref: &State, q: &ErrorMatrix, r: Option<&DMatrix<f64>>) -> QuadraticModel {
    let (e, j) = tracking_error(x, x_ref);
    let nu = r.map_or(0, |r| r.nrows());
    let n = STATE_DIM + nu;
    let mut gradient = DVector::zeros(n);
    let mut hessian = DMatrix::zeros(n, n);
    let qe = q * e;
    gradient.rows_mut(0, STATE_DIM).copy_from(&(j.transpose() * qe * 2.0));
    hessian
        .view_mut((0, 0), (STATE_DIM, STATE_DIM))
        .copy_from(&(j.transpose() * q * j * 2.0));
    let mut value = e.dot(&qe);
    if let Some(r) = r {
        let ru = r * u;
        value += u.dot(&ru);
        gradient.rows_mut(STATE_DIM, nu).copy_from(&(ru * 2.0));
        hessian.view_mut((STATE_DIM, STATE_DIM), (nu, nu)).copy_from(&(r * 2.0));
    }
    QuadraticModel { value, gradient, hessian }
}

/// Flyby stage model over `[x (13), s, u, v_s]`; the terminal form omits
/// the input block when `inputs` is `None`.
pub fn flyby_stage_model(
    x: &State,
    s: f64,
    inputs: Option<(&DVector<f64>, f64)>,
    path: &ReferencePath,
    w: &FlybyWeights,
    dt: f64,
) -> (QuadraticModel, FlybyEval) {
    let ev = flyby_terms(x, s, path, w);
    let nu = if inputs.is_some() { w.r.nrows() + 1 } else { 0 };
    let n = 14 + nu;
    let mut gradient = DVector::zeros(n);
    let mut hessian = DMatrix::zeros(n, n);
    gradient
        .rows_mut(0, 14)
        .copy_from(&(ev.jacobian.transpose() * ev.residual * 2.0));
    hessian
        .view_mut((0, 0), (14, 14))
        .copy_from(&(ev.jacobian.transpose() * ev.jacobian * 2.0));
    let mut value = ev.cost;
    if let Some((u, v_s)) = inputs {
        let m = w.r.nrows();
        let ru = &w.r * u;
        value += u.dot(&ru) - w.mu * v_s * dt;
        gradient.rows_mut(14, m).copy_from(&(ru * 2.0));
        gradient[14 + m] = -w.mu * dt;
        hessian.view_mut((14, 14), (m, m)).copy_from(&(&w.r * 2.0));
    }
    (QuadraticModel { value, gradient, hessian }, ev)
}
