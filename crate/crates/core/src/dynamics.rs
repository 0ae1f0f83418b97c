//! Rigid-body 6-DoF dynamics with a thruster-level input model.
//!
//! State ordering is `[r (3), q (4, x y z w), v (3), omega (3)]`: position in
//! the station frame, body-to-station attitude, and linear and angular
//! velocity expressed in the body frame. Quaternions are Hamilton,
//! scalar-last.

use nalgebra::{Const, DMatrix, DVector, Dyn, Matrix3, OMatrix, Quaternion, SMatrix, SVector, Vector3};
use thiserror::Error;

/// Number of scalar entries in a [`State`] vector.
pub const STATE_DIM: usize = 13;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
/// 13 x n_u input sensitivity.
pub type InputMatrix = OMatrix<f64, Const<STATE_DIM>, Dyn>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid vehicle model: {0}")]
    InvalidModel(String),
    #[error("integration failure: non-finite {component} after step")]
    IntegrationFailure { component: &'static str },
}

/// Pose and twist of the free-flyer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    /// Center-of-mass position, station frame [m].
    pub position: Vector3<f64>,
    /// Body-to-station attitude.
    pub attitude: Quaternion<f64>,
    /// Center-of-mass velocity, body frame [m/s].
    pub velocity: Vector3<f64>,
    /// Angular rate, body frame [rad/s].
    pub angular_rate: Vector3<f64>,
}

impl Default for State {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros(), Quaternion::identity())
    }
}

impl State {
    pub fn at_rest(position: Vector3<f64>, attitude: Quaternion<f64>) -> Self {
        Self {
            position,
            attitude,
            velocity: Vector3::zeros(),
            angular_rate: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<4>(3).copy_from(&self.attitude.coords);
        x.fixed_rows_mut::<3>(7).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(10).copy_from(&self.angular_rate);
        x
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            position: Vector3::new(x[0], x[1], x[2]),
            attitude: Quaternion::new(x[6], x[3], x[4], x[5]),
            velocity: Vector3::new(x[7], x[8], x[9]),
            angular_rate: Vector3::new(x[10], x[11], x[12]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Velocity expressed in the station frame.
    pub fn inertial_velocity(&self) -> Vector3<f64> {
        rotation_polynomial(&self.attitude) * self.velocity
    }

    /// Returns a copy with the attitude scaled to unit norm.
    pub fn normalized(mut self) -> Self {
        let n = self.attitude.norm();
        if n > 0.0 {
            self.attitude /= n;
        }
        self
    }
}

/// A single unidirectional thruster.
#[derive(Debug, Clone, PartialEq)]
pub struct Thruster {
    /// Mounting point relative to the center of mass, body frame [m].
    pub position: Vector3<f64>,
    /// Unit force direction, body frame.
    pub direction: Vector3<f64>,
    /// Saturation limit [N].
    pub max_thrust: f64,
}

/// Mass properties and actuator layout.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleModel {
    mass: f64,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    thrusters: Vec<Thruster>,
    body_radius: f64,
    isp: f64,
    wrench_map: DMatrix<f64>,
}

impl VehicleModel {
    pub fn new(
        mass: f64,
        inertia: Matrix3<f64>,
        thrusters: Vec<Thruster>,
        body_radius: f64,
        isp: f64,
    ) -> Result<Self, DynamicsError> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(DynamicsError::InvalidModel(format!("mass must be positive, got {mass}")));
        }
        if !(body_radius.is_finite() && body_radius > 0.0) {
            return Err(DynamicsError::InvalidModel(format!(
                "body_radius must be positive, got {body_radius}"
            )));
        }
        if !(isp.is_finite() && isp > 0.0) {
            return Err(DynamicsError::InvalidModel(format!("isp must be positive, got {isp}")));
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-12 * inertia.abs().max().max(1.0) {
            return Err(DynamicsError::InvalidModel("inertia is not symmetric".into()));
        }
        if inertia.cholesky().is_none() {
            return Err(DynamicsError::InvalidModel("inertia is not positive definite".into()));
        }
        let inertia_inv = inertia
            .try_inverse()
            .ok_or_else(|| DynamicsError::InvalidModel("inertia is singular".into()))?;
        if thrusters.is_empty() {
            return Err(DynamicsError::InvalidModel("vehicle has no thrusters".into()));
        }
        for (i, t) in thrusters.iter().enumerate() {
            if (t.direction.norm() - 1.0).abs() > 1e-12 {
                return Err(DynamicsError::InvalidModel(format!(
                    "thruster {i} direction is not unit length"
                )));
            }
            if !(t.max_thrust.is_finite() && t.max_thrust > 0.0) {
                return Err(DynamicsError::InvalidModel(format!(
                    "thruster {i} max_thrust must be positive"
                )));
            }
            if !t.position.iter().all(|v| v.is_finite()) {
                return Err(DynamicsError::InvalidModel(format!(
                    "thruster {i} position is not finite"
                )));
            }
        }
        let mut wrench_map = DMatrix::zeros(6, thrusters.len());
        for (i, t) in thrusters.iter().enumerate() {
            let torque = t.position.cross(&t.direction);
            wrench_map.fixed_view_mut::<3, 1>(0, i).copy_from(&t.direction);
            wrench_map.fixed_view_mut::<3, 1>(3, i).copy_from(&torque);
        }
        Ok(Self {
            mass,
            inertia,
            inertia_inv,
            thrusters,
            body_radius,
            isp,
            wrench_map,
        })
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }
    pub fn inertia(&self) -> &Matrix3<f64> {
        &self.inertia
    }
    pub fn inertia_inv(&self) -> &Matrix3<f64> {
        &self.inertia_inv
    }
    pub fn thrusters(&self) -> &[Thruster] {
        &self.thrusters
    }
    pub fn num_thrusters(&self) -> usize {
        self.thrusters.len()
    }
    pub fn body_radius(&self) -> f64 {
        self.body_radius
    }
    pub fn isp(&self) -> f64 {
        self.isp
    }

    /// The 6 x n_u map from thruster magnitudes to body force (rows 0..3)
    /// and body torque (rows 3..6).
    pub fn wrench_map(&self) -> &DMatrix<f64> {
        &self.wrench_map
    }

    pub fn max_thrust(&self) -> DVector<f64> {
        DVector::from_iterator(self.thrusters.len(), self.thrusters.iter().map(|t| t.max_thrust))
    }
}

/// Per-thruster force magnitudes [N].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput(pub DVector<f64>);

impl ControlInput {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Clamps every entry into `[0, max_thrust_i]`.
    pub fn clamped(&self, model: &VehicleModel) -> Self {
        Self(DVector::from_iterator(
            self.0.len(),
            self.0
                .iter()
                .zip(model.thrusters())
                .map(|(u, t)| u.clamp(0.0, t.max_thrust)),
        ))
    }

    pub fn within_limits(&self, model: &VehicleModel) -> bool {
        self.0.len() == model.num_thrusters()
            && self
                .0
                .iter()
                .zip(model.thrusters())
                .all(|(u, t)| *u >= 0.0 && *u <= t.max_thrust)
    }
}

/// Multiplicative per-thruster degradation. All ones is the nominal vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct FaultMask(DVector<f64>);

impl FaultMask {
    pub fn nominal(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0))
    }

    pub fn new(scale: DVector<f64>) -> Result<Self, DynamicsError> {
        if scale.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(DynamicsError::InvalidArgument(
                "fault scale factors must lie in [0, 1]".into(),
            ));
        }
        Ok(Self(scale))
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_nominal(&self) -> bool {
        self.0.iter().all(|s| *s == 1.0)
    }

    pub fn set(&mut self, index: usize, scale: f64) -> Result<(), DynamicsError> {
        if index >= self.0.len() {
            return Err(DynamicsError::InvalidArgument(format!(
                "thruster index {index} out of range"
            )));
        }
        if !(0.0..=1.0).contains(&scale) {
            return Err(DynamicsError::InvalidArgument(format!(
                "fault scale {scale} outside [0, 1]"
            )));
        }
        self.0[index] = scale;
        Ok(())
    }
}

/// Skew-symmetric cross-product matrix, `skew(a) * b == a x b`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Quadratic rotation form; equals the rotation matrix for unit `q` and is
/// smooth for any `q`.
fn rotation_polynomial(q: &Quaternion<f64>) -> Matrix3<f64> {
    let w = q.w;
    let e = q.imag();
    Matrix3::identity() * (w * w - e.dot(&e)) + e * e.transpose() * 2.0 + skew(&e) * (2.0 * w)
}

/// Rotation matrix mapping body-frame vectors to the station frame.
pub fn quat_to_rotmat(q: &Quaternion<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    if !q.coords.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::InvalidArgument("non-finite quaternion".into()));
    }
    let n = q.norm();
    if n == 0.0 {
        return Err(DynamicsError::InvalidArgument("zero quaternion".into()));
    }
    Ok(rotation_polynomial(&(q / n)))
}

/// The 4 x 3 map `G(q)` with `q_dot = 0.5 * G(q) * omega`; `G = H(q)^T`.
fn rate_map(q: &Quaternion<f64>) -> SMatrix<f64, 4, 3> {
    let w = q.w;
    let e = q.imag();
    let top = Matrix3::identity() * w + skew(&e);
    let mut g = SMatrix::<f64, 4, 3>::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&top);
    g.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-e.transpose()));
    g
}

/// Attitude kinematics for a body-frame angular rate.
pub fn quat_rate(q: &Quaternion<f64>, omega: &Vector3<f64>) -> Quaternion<f64> {
    Quaternion::from(rate_map(q) * omega * 0.5)
}

/// Net body force and torque produced by the (masked) thruster commands.
pub fn thruster_wrench(
    u: &ControlInput,
    model: &VehicleModel,
    mask: &FaultMask,
) -> Result<(Vector3<f64>, Vector3<f64>), DynamicsError> {
    let n = model.num_thrusters();
    if u.len() != n || mask.len() != n {
        return Err(DynamicsError::InvalidArgument(format!(
            "expected {n} thruster entries, got input {} and mask {}",
            u.len(),
            mask.len()
        )));
    }
    Ok(wrench_unchecked(u.0.as_slice(), model, mask))
}

fn wrench_unchecked(u: &[f64], model: &VehicleModel, mask: &FaultMask) -> (Vector3<f64>, Vector3<f64>) {
    let mut force = Vector3::zeros();
    let mut torque = Vector3::zeros();
    let map = model.wrench_map();
    for (i, &ui) in u.iter().enumerate() {
        let f = mask.0[i] * ui;
        if f == 0.0 {
            continue;
        }
        for r in 0..3 {
            force[r] += map[(r, i)] * f;
            torque[r] += map[(r + 3, i)] * f;
        }
    }
    (force, torque)
}

fn derivative_vec(x: &StateVector, force: &Vector3<f64>, torque: &Vector3<f64>, model: &VehicleModel) -> StateVector {
    let q = Quaternion::new(x[6], x[3], x[4], x[5]);
    let v = Vector3::new(x[7], x[8], x[9]);
    let w = Vector3::new(x[10], x[11], x[12]);
    let r_dot = rotation_polynomial(&q) * v;
    let q_dot = rate_map(&q) * w * 0.5;
    let v_dot = force / model.mass - w.cross(&v);
    let w_dot = model.inertia_inv * (torque - w.cross(&(model.inertia * w)));
    let mut d = StateVector::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&r_dot);
    d.fixed_rows_mut::<4>(3).copy_from(&q_dot);
    d.fixed_rows_mut::<3>(7).copy_from(&v_dot);
    d.fixed_rows_mut::<3>(10).copy_from(&w_dot);
    d
}

/// Newton-Euler state derivative, in [`State::to_vector`] ordering.
pub fn continuous_derivative(
    x: &State,
    u: &ControlInput,
    model: &VehicleModel,
    mask: &FaultMask,
) -> Result<StateVector, DynamicsError> {
    let (f, t) = thruster_wrench(u, model, mask)?;
    Ok(derivative_vec(&x.to_vector(), &f, &t, model))
}

/// Jacobian of the continuous derivative with respect to the state vector.
fn derivative_state_jacobian(x: &StateVector, model: &VehicleModel) -> StateMatrix {
    let w = x[6];
    let e = Vector3::new(x[3], x[4], x[5]);
    let v = Vector3::new(x[7], x[8], x[9]);
    let om = Vector3::new(x[10], x[11], x[12]);
    let q = Quaternion::new(w, e.x, e.y, e.z);
    let mut a = StateMatrix::zeros();

    // r_dot = R(q) v
    let d_re = -v * e.transpose() * 2.0
        + e * v.transpose() * 2.0
        + Matrix3::identity() * (2.0 * e.dot(&v))
        - skew(&v) * (2.0 * w);
    let d_rw = v * (2.0 * w) + e.cross(&v) * 2.0;
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&d_re);
    a.fixed_view_mut::<3, 1>(0, 6).copy_from(&d_rw);
    a.fixed_view_mut::<3, 3>(0, 7).copy_from(&rotation_polynomial(&q));

    // q_dot = 0.5 G(q) omega
    let mut d_qq = SMatrix::<f64, 4, 4>::zeros();
    d_qq.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&om)));
    d_qq.fixed_view_mut::<3, 1>(0, 3).copy_from(&om);
    d_qq.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-om.transpose()));
    a.fixed_view_mut::<4, 4>(3, 3).copy_from(&(d_qq * 0.5));
    a.fixed_view_mut::<4, 3>(3, 10).copy_from(&(rate_map(&q) * 0.5));

    // v_dot = F/m - omega x v
    a.fixed_view_mut::<3, 3>(7, 7).copy_from(&(-skew(&om)));
    a.fixed_view_mut::<3, 3>(7, 10).copy_from(&skew(&v));

    // omega_dot = I^-1 (T - omega x I omega)
    let i_om = model.inertia * om;
    let d_ww = -model.inertia_inv * (skew(&om) * model.inertia - skew(&i_om));
    a.fixed_view_mut::<3, 3>(10, 10).copy_from(&d_ww);
    a
}

/// Jacobian of the continuous derivative with respect to the thruster
/// magnitudes (13 x n_u). Independent of the state.
fn derivative_input_jacobian(model: &VehicleModel, mask: &FaultMask) -> InputMatrix {
    let n = model.num_thrusters();
    let map = model.wrench_map();
    let mut b = InputMatrix::zeros(n);
    for i in 0..n {
        let s = mask.0[i];
        let f = map.fixed_view::<3, 1>(0, i) * (s / model.mass);
        let t = model.inertia_inv * map.fixed_view::<3, 1>(3, i) * s;
        b.fixed_view_mut::<3, 1>(7, i).copy_from(&f);
        b.fixed_view_mut::<3, 1>(10, i).copy_from(&t);
    }
    b
}

fn normalize_attitude(x: &mut StateVector) {
    let n = x.fixed_rows::<4>(3).norm();
    if n > 0.0 {
        x.fixed_rows_mut::<4>(3).unscale_mut(n);
    }
}

fn check_finite(x: &StateVector) -> Result<(), DynamicsError> {
    let parts: [(&'static str, std::ops::Range<usize>); 4] = [
        ("position", 0..3),
        ("attitude", 3..7),
        ("velocity", 7..10),
        ("angular_rate", 10..13),
    ];
    for (name, range) in parts {
        if range.clone().any(|i| !x[i].is_finite()) {
            return Err(DynamicsError::IntegrationFailure { component: name });
        }
    }
    Ok(())
}

fn rk4_raw(x: &StateVector, force: &Vector3<f64>, torque: &Vector3<f64>, dt: f64, model: &VehicleModel) -> StateVector {
    let k1 = derivative_vec(x, force, torque, model);
    let k2 = derivative_vec(&(x + k1 * (0.5 * dt)), force, torque, model);
    let k3 = derivative_vec(&(x + k2 * (0.5 * dt)), force, torque, model);
    let k4 = derivative_vec(&(x + k3 * dt), force, torque, model);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// One classical RK4 step with the input held over `dt`, followed by
/// attitude renormalization.
pub fn rk4_step(
    x: &State,
    u: &ControlInput,
    dt: f64,
    model: &VehicleModel,
    mask: &FaultMask,
) -> Result<State, DynamicsError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(DynamicsError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let (f, t) = thruster_wrench(u, model, mask)?;
    let mut next = rk4_raw(&x.to_vector(), &f, &t, dt, model);
    check_finite(&next)?;
    normalize_attitude(&mut next);
    Ok(State::from_slice(next.as_slice()))
}

/// Discrete step on raw vectors plus its exact Jacobians `(A, B)`, including
/// the attitude renormalization. Used by the planner's shooting transcription.
pub fn rk4_step_jacobian(
    x: &StateVector,
    u: &[f64],
    dt: f64,
    model: &VehicleModel,
    mask: &FaultMask,
    with_jacobian: bool,
) -> (StateVector, Option<(StateMatrix, InputMatrix)>) {
    let (force, torque) = wrench_unchecked(u, model, mask);
    if !with_jacobian {
        let mut next = rk4_raw(x, &force, &torque, dt, model);
        normalize_attitude(&mut next);
        return (next, None);
    }
    let bc = derivative_input_jacobian(model, mask);
    let h = 0.5 * dt;

    let k1 = derivative_vec(x, &force, &torque, model);
    let a1 = derivative_state_jacobian(x, model);
    let x2 = x + k1 * h;
    let k2 = derivative_vec(&x2, &force, &torque, model);
    let a2 = derivative_state_jacobian(&x2, model);
    let x3 = x + k2 * h;
    let k3 = derivative_vec(&x3, &force, &torque, model);
    let a3 = derivative_state_jacobian(&x3, model);
    let x4 = x + k3 * dt;
    let k4 = derivative_vec(&x4, &force, &torque, model);
    let a4 = derivative_state_jacobian(&x4, model);

    let ident = StateMatrix::identity();
    let dk1x = a1;
    let dk2x = a2 * (ident + dk1x * h);
    let dk3x = a3 * (ident + dk2x * h);
    let dk4x = a4 * (ident + dk3x * dt);
    let dk1u = bc.clone();
    let dk2u = &bc + a2 * &dk1u * h;
    let dk3u = &bc + a3 * &dk2u * h;
    let dk4u = &bc + a4 * &dk3u * dt;

    let raw = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let mut a_raw = ident + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (dt / 6.0);
    let mut b_raw = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (dt / 6.0);

    // d(q / |q|) = (I - q̂ q̂^T) / |q| dq
    let qv = raw.fixed_rows::<4>(3).into_owned();
    let n = qv.norm();
    let qh = qv / n;
    let proj = (SMatrix::<f64, 4, 4>::identity() - qh * qh.transpose()) / n;
    let aq = proj * a_raw.fixed_rows::<4>(3);
    a_raw.fixed_rows_mut::<4>(3).copy_from(&aq);
    let bq = proj * b_raw.rows(3, 4);
    b_raw.rows_mut(3, 4).copy_from(&bq);

    let mut next = raw;
    normalize_attitude(&mut next);
    (next, Some((a_raw, b_raw)))
}

/// Default free-flyer: 10 kg, 0.3 m encasing sphere, Isp 40 s, and twelve
/// 0.2 N unidirectional thrusters in six symmetric pairs.
///
/// Each body axis has two thrusters firing along `+axis` and two along
/// `-axis`, offset by +/-0.15 m along the next axis (x thrusters offset in y,
/// y in z, z in x). Firing a same-direction pair gives pure force; firing one
/// `+axis` and the opposite-offset `-axis` thruster gives pure torque.
///
/// Index layout: `[+x@+y, +x@-y, -x@+y, -x@-y, +y@+z, +y@-z, -y@+z, -y@-z,
/// +z@+x, +z@-x, -z@+x, -z@-x]`.
pub fn make_default_vehicle() -> VehicleModel {
    const ARM: f64 = 0.15;
    const FACE: f64 = 0.2;
    const MAX_THRUST: f64 = 0.2;
    let mut thrusters = Vec::with_capacity(12);
    for axis in 0..3 {
        let offset_axis = (axis + 1) % 3;
        for sign in [1.0, -1.0] {
            for off in [ARM, -ARM] {
                let mut direction = Vector3::zeros();
                direction[axis] = sign;
                let mut position = Vector3::zeros();
                // mounted on the face opposite to the firing direction
                position[axis] = -sign * FACE;
                position[offset_axis] = off;
                thrusters.push(Thruster {
                    position,
                    direction,
                    max_thrust: MAX_THRUST,
                });
            }
        }
    }
    VehicleModel::new(10.0, Matrix3::from_diagonal_element(0.25), thrusters, 0.3, 40.0)
        .expect("default vehicle is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn u_from(v: &[f64]) -> ControlInput {
        ControlInput(DVector::from_column_slice(v))
    }

    #[test]
    fn identity_quaternion_gives_identity_matrix() {
        let r = quat_to_rotmat(&Quaternion::identity()).unwrap();
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let s = std::f64::consts::FRAC_PI_4.sin();
        let c = std::f64::consts::FRAC_PI_4.cos();
        let q = Quaternion::new(c, 0.0, 0.0, s);
        let r = quat_to_rotmat(&q).unwrap();
        // Rodrigues: R = I + sin(t) K + (1 - cos(t)) K^2 with t = pi/2
        let k = skew(&Vector3::z());
        let rod = Matrix3::identity() + k + k * k;
        assert_relative_eq!(r, rod, epsilon = 1e-15);
        assert_relative_eq!(r * Vector3::x(), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn double_cover_gives_same_matrix() {
        let q = Quaternion::new(0.3, -0.5, 0.1, 0.8).normalize();
        assert_relative_eq!(quat_to_rotmat(&q).unwrap(), quat_to_rotmat(&-q).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn rotmat_rejects_non_finite() {
        let q = Quaternion::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(quat_to_rotmat(&q), Err(DynamicsError::InvalidArgument(_))));
    }

    #[test]
    fn rotmat_is_proper_orthogonal() {
        let q = Quaternion::new(0.2, 0.4, -0.7, 0.1);
        let r = quat_to_rotmat(&q).unwrap();
        assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-14);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn quat_rate_examples() {
        let q = Quaternion::identity();
        assert_eq!(quat_rate(&q, &Vector3::zeros()), Quaternion::new(0.0, 0.0, 0.0, 0.0));
        let qd = quat_rate(&q, &Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(qd.coords.as_slice(), &[0.0, 0.0, 0.5, 0.0]);
        let q = Quaternion::new(0.3, -0.5, 0.1, 0.8).normalize();
        let qd = quat_rate(&q, &Vector3::new(0.4, -1.2, 2.0));
        assert!(q.coords.dot(&qd.coords).abs() < 1e-12);
    }

    #[test]
    fn quat_rate_matches_hamilton_product() {
        let q = Quaternion::new(0.3, -0.5, 0.1, 0.8).normalize();
        let w = Vector3::new(0.4, -1.2, 2.0);
        let expect = q * Quaternion::from_imag(w) * 0.5;
        assert_relative_eq!(quat_rate(&q, &w).coords, expect.coords, epsilon = 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_wrench() {
        let m = make_default_vehicle();
        let (f, t) = thruster_wrench(&ControlInput::zeros(12), &m, &FaultMask::nominal(12)).unwrap();
        assert_eq!(f, Vector3::zeros());
        assert_eq!(t, Vector3::zeros());
    }

    #[test]
    fn plus_x_pair_is_pure_force() {
        let m = make_default_vehicle();
        let mut u = vec![0.0; 12];
        u[0] = 0.1;
        u[1] = 0.1;
        let (f, t) = thruster_wrench(&u_from(&u), &m, &FaultMask::nominal(12)).unwrap();
        // thrusters at (-0.2, +-0.15, 0) pushing +x: torques (0,0,-0.015) and (0,0,+0.015)
        assert_relative_eq!(f, Vector3::new(0.2, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(t, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn masked_pair_member_gives_parasitic_torque() {
        let m = make_default_vehicle();
        let mut u = vec![0.0; 12];
        u[0] = 0.1;
        u[1] = 0.1;
        let mut mask = FaultMask::nominal(12);
        mask.set(1, 0.0).unwrap();
        let (f, t) = thruster_wrench(&u_from(&u), &m, &mask).unwrap();
        // remaining thruster at (-0.2, 0.15, 0) with force (0.1, 0, 0): r x F = (0, 0, -0.015)
        assert_relative_eq!(f, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(t, Vector3::new(0.0, 0.0, -0.015), epsilon = 1e-15);
    }

    #[test]
    fn wrench_rejects_dimension_mismatch() {
        let m = make_default_vehicle();
        let r = thruster_wrench(&ControlInput::zeros(11), &m, &FaultMask::nominal(12));
        assert!(matches!(r, Err(DynamicsError::InvalidArgument(_))));
    }

    #[test]
    fn default_vehicle_properties() {
        let m = make_default_vehicle();
        assert_eq!(m.mass(), 10.0);
        assert_eq!(m.isp(), 40.0);
        assert_eq!(m.body_radius(), 0.3);
        assert_eq!(m.num_thrusters(), 12);
        assert_eq!(m.wrench_map().clone().rank(1e-9), 6);
        let all = u_from(&[0.1; 12]);
        let (f, t) = thruster_wrench(&all, &m, &FaultMask::nominal(12)).unwrap();
        assert!(f.norm() < 1e-15 && t.norm() < 1e-15);
    }

    #[test]
    fn rest_state_is_equilibrium() {
        let m = make_default_vehicle();
        let x = State::at_rest(Vector3::new(1.0, 2.0, 3.0), Quaternion::new(0.9, 0.1, 0.3, 0.2).normalize());
        let d = continuous_derivative(&x, &ControlInput::zeros(12), &m, &FaultMask::nominal(12)).unwrap();
        assert_eq!(d, StateVector::zeros());
        let y = rk4_step(&x, &ControlInput::zeros(12), 0.37, &m, &FaultMask::nominal(12)).unwrap();
        assert_eq!(y.position, x.position);
        assert_eq!(y.velocity, x.velocity);
        assert_relative_eq!(y.attitude.coords, x.attitude.coords, epsilon = 1e-15);
    }

    #[test]
    fn pure_force_drives_only_translation() {
        let m = make_default_vehicle();
        let mut u = vec![0.0; 12];
        u[0] = 0.2;
        u[1] = 0.2;
        let x = State::default();
        let d = continuous_derivative(&x, &u_from(&u), &m, &FaultMask::nominal(12)).unwrap();
        let mut expect = StateVector::zeros();
        expect[7] = 0.04;
        assert_relative_eq!(d, expect, epsilon = 1e-15);
    }

    #[test]
    fn double_integrator_closed_form() {
        let m = make_default_vehicle();
        // net 0.2 N along +x from a single-direction pair at 0.1 N each
        let mut u = vec![0.0; 12];
        u[0] = 0.1;
        u[1] = 0.1;
        let u = u_from(&u);
        let mask = FaultMask::nominal(12);
        let mut x = State::default();
        for _ in 0..100 {
            x = rk4_step(&x, &u, 0.01, &m, &mask).unwrap();
        }
        assert!((x.velocity.x - 0.02).abs() < 1e-9);
        assert!((x.position.x - 0.01).abs() < 1e-9);
    }

    #[test]
    fn rk4_rejects_bad_dt_and_nan() {
        let m = make_default_vehicle();
        let mask = FaultMask::nominal(12);
        let x = State::default();
        assert!(rk4_step(&x, &ControlInput::zeros(12), 0.0, &m, &mask).is_err());
        let mut bad = x;
        bad.velocity.y = f64::INFINITY;
        let err = rk4_step(&bad, &ControlInput::zeros(12), 0.1, &m, &mask).unwrap_err();
        assert!(matches!(err, DynamicsError::IntegrationFailure { .. }));
    }

    #[test]
    fn nominal_mask_is_bit_identical() {
        let m = make_default_vehicle();
        let x = State {
            position: Vector3::new(0.1, 0.2, 0.3),
            attitude: Quaternion::new(0.9, 0.1, -0.3, 0.2).normalize(),
            velocity: Vector3::new(0.05, -0.02, 0.01),
            angular_rate: Vector3::new(0.01, 0.03, -0.02),
        };
        let u = u_from(&[0.01, 0.02, 0.0, 0.15, 0.2, 0.0, 0.07, 0.0, 0.0, 0.11, 0.0, 0.03]);
        let a = continuous_derivative(&x, &u, &m, &FaultMask::nominal(12)).unwrap();
        let b = continuous_derivative(&x, &u, &m, &FaultMask::new(DVector::from_element(12, 1.0)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_validation() {
        let good = make_default_vehicle();
        let thr = good.thrusters().to_vec();
        assert!(VehicleModel::new(0.0, Matrix3::identity(), thr.clone(), 0.3, 40.0).is_err());
        assert!(VehicleModel::new(1.0, Matrix3::zeros(), thr.clone(), 0.3, 40.0).is_err());
        assert!(VehicleModel::new(1.0, Matrix3::identity(), thr.clone(), -1.0, 40.0).is_err());
        let mut bad = thr;
        bad[0].direction = Vector3::new(1.0, 1.0, 0.0);
        assert!(VehicleModel::new(1.0, Matrix3::identity(), bad, 0.3, 40.0).is_err());
    }

    #[test]
    fn step_jacobian_matches_finite_differences() {
        let m = VehicleModel::new(
            10.0,
            Matrix3::new(0.3, 0.02, 0.0, 0.02, 0.25, 0.01, 0.0, 0.01, 0.2),
            make_default_vehicle().thrusters().to_vec(),
            0.3,
            40.0,
        )
        .unwrap();
        let mut mask = FaultMask::nominal(12);
        mask.set(4, 0.5).unwrap();
        let x = State {
            position: Vector3::new(0.1, 0.2, 0.3),
            attitude: Quaternion::new(0.9, 0.1, -0.3, 0.2).normalize(),
            velocity: Vector3::new(0.2, -0.1, 0.05),
            angular_rate: Vector3::new(0.1, 0.3, -0.2),
        }
        .to_vector();
        let u = [0.01, 0.02, 0.0, 0.15, 0.2, 0.0, 0.07, 0.0, 0.0, 0.11, 0.0, 0.03];
        let dt = 0.2;
        let (_, jac) = rk4_step_jacobian(&x, &u, dt, &m, &mask, true);
        let (a, b) = jac.unwrap();
        let h = 1e-6;
        for j in 0..STATE_DIM {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (rk4_step_jacobian(&xp, &u, dt, &m, &mask, false).0
                - rk4_step_jacobian(&xm, &u, dt, &m, &mask, false).0)
                / (2.0 * h);
            for i in 0..STATE_DIM {
                assert!((a[(i, j)] - fd[i]).abs() < 1e-8, "A[{i},{j}] {} vs {}", a[(i, j)], fd[i]);
            }
        }
        for j in 0..12 {
            let mut up = u;
            let mut um = u;
            up[j] += h;
            um[j] -= h;
            let fd = (rk4_step_jacobian(&x, &up, dt, &m, &mask, false).0
                - rk4_step_jacobian(&x, &um, dt, &m, &mask, false).0)
                / (2.0 * h);
            for i in 0..STATE_DIM {
                assert!((b[(i, j)] - fd[i]).abs() < 1e-8, "B[{i},{j}]");
            }
        }
    }
}
