//! Mission geometry: inspection points, the keep-in corridor, keep-out
//! ellipsoids, and the arc-length parameterized reference path.
//!
//! Margins follow one sign convention everywhere: positive means feasible,
//! negative means the encasing sphere of the vehicle crosses the boundary.

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid mission: {0}")]
    InvalidMission(String),
}

/// Operator-specified inspection pose with optional timing.
#[derive(Debug, Clone, PartialEq)]
pub struct InspectionPoint {
    /// Desired arrival time [s]; used by linger mode only.
    pub t: Option<f64>,
    /// Dwell duration at the point [s]; used by linger mode only.
    pub linger: Option<f64>,
    pub position: Vector3<f64>,
    /// Desired body-to-station attitude, unit norm.
    pub orientation: Quaternion<f64>,
    /// Keep-in radius of the corridor at this point [m].
    pub corridor_radius: f64,
    /// Optional station-frame velocity hint.
    pub velocity: Option<Vector3<f64>>,
}

impl InspectionPoint {
    pub fn new(position: Vector3<f64>, orientation: Quaternion<f64>, corridor_radius: f64) -> Self {
        Self {
            t: None,
            linger: None,
            position,
            orientation,
            corridor_radius,
            velocity: None,
        }
    }

    pub fn with_timing(mut self, t: f64, linger: f64) -> Self {
        self.t = Some(t);
        self.linger = Some(linger);
        self
    }
}

/// Ellipsoidal keep-out zone `(p - c)^T P (p - c) >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepOutEllipsoid {
    name: String,
    center: Vector3<f64>,
    shape: Matrix3<f64>,
    semi_axes: Vector3<f64>,
    axes: Matrix3<f64>,
}

impl KeepOutEllipsoid {
    /// Builds from a symmetric positive-definite shape matrix.
    pub fn new(name: impl Into<String>, center: Vector3<f64>, shape: Matrix3<f64>) -> Result<Self, GeometryError> {
        let name = name.into();
        if !center.iter().chain(shape.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidGeometry(format!("keep-out '{name}' has non-finite entries")));
        }
        if (shape - shape.transpose()).abs().max() > 1e-12 * shape.abs().max() {
            return Err(GeometryError::InvalidGeometry(format!("keep-out '{name}' shape is not symmetric")));
        }
        let eig = SymmetricEigen::new(shape);
        if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
            return Err(GeometryError::InvalidGeometry(format!(
                "keep-out '{name}' shape is not positive definite"
            )));
        }
        let semi_axes = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
        Ok(Self {
            name,
            center,
            shape,
            semi_axes,
            axes: eig.eigenvectors,
        })
    }

    /// Builds from semi-axis lengths along the columns of `rotation`.
    pub fn from_semi_axes(
        name: impl Into<String>,
        center: Vector3<f64>,
        semi_axes: Vector3<f64>,
        rotation: Matrix3<f64>,
    ) -> Result<Self, GeometryError> {
        let name = name.into();
        if semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(GeometryError::InvalidGeometry(format!("keep-out '{name}' semi-axes must be positive")));
        }
        let d = Matrix3::from_diagonal(&semi_axes.map(|a| 1.0 / (a * a)));
        let shape = rotation * d * rotation.transpose();
        // exact symmetry so the eigen route sees a symmetric matrix
        let shape = (shape + shape.transpose()) * 0.5;
        Self::new(name, center, shape)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn center(&self) -> &Vector3<f64> {
        &self.center
    }
    pub fn shape(&self) -> &Matrix3<f64> {
        &self.shape
    }
    pub fn semi_axes(&self) -> &Vector3<f64> {
        &self.semi_axes
    }

    /// Shape matrix with every semi-axis grown by `inflation`.
    pub fn inflated_shape(&self, inflation: f64) -> Matrix3<f64> {
        if inflation == 0.0 {
            return self.shape;
        }
        let d = Matrix3::from_diagonal(&self.semi_axes.map(|a| 1.0 / ((a + inflation) * (a + inflation))));
        self.axes * d * self.axes.transpose()
    }
}

/// `(p - c)^T P~ (p - c) - 1` with `P~` the per-axis inflated shape.
pub fn ellipsoid_margin(p: &Vector3<f64>, e: &KeepOutEllipsoid, inflation: f64) -> f64 {
    let d = p - e.center;
    d.dot(&(e.inflated_shape(inflation) * d)) - 1.0
}

fn quadratic_margin(p: &Vector3<f64>, center: &Vector3<f64>, shape: &Matrix3<f64>) -> (f64, Vector3<f64>) {
    let d = p - center;
    let pd = shape * d;
    (d.dot(&pd) - 1.0, pd * 2.0)
}

/// Linearly tapered keep-in corridor through the inspection points.
#[derive(Debug, Clone, PartialEq)]
pub struct KeepInCorridor {
    waypoints: Vec<Vector3<f64>>,
    radii: Vec<f64>,
}

impl KeepInCorridor {
    pub fn new(waypoints: Vec<Vector3<f64>>, radii: Vec<f64>) -> Result<Self, GeometryError> {
        if waypoints.len() < 2 {
            return Err(GeometryError::InvalidGeometry("corridor needs at least two waypoints".into()));
        }
        if waypoints.len() != radii.len() {
            return Err(GeometryError::InvalidGeometry("one radius per waypoint is required".into()));
        }
        if let Some(i) = radii.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(GeometryError::InvalidGeometry(format!("corridor radius {i} must be positive")));
        }
        for (i, w) in waypoints.windows(2).enumerate() {
            if (w[1] - w[0]).norm() <= 0.0 {
                return Err(GeometryError::InvalidGeometry(format!("corridor segment {i} has zero length")));
            }
        }
        Ok(Self { waypoints, radii })
    }

    pub fn from_points(points: &[InspectionPoint]) -> Result<Self, GeometryError> {
        Self::new(
            points.iter().map(|p| p.position).collect(),
            points.iter().map(|p| p.corridor_radius).collect(),
        )
    }

    pub fn waypoints(&self) -> &[Vector3<f64>] {
        &self.waypoints
    }
    pub fn radii(&self) -> &[f64] {
        &self.radii
    }
    pub fn num_segments(&self) -> usize {
        self.waypoints.len() - 1
    }

    /// Margin against one segment and its gradient with respect to `p`.
    fn segment_margin(&self, seg: usize, p: &Vector3<f64>, body_radius: f64) -> (f64, Vector3<f64>) {
        let a = self.waypoints[seg];
        let b = self.waypoints[seg + 1];
        let (ra, rb) = (self.radii[seg], self.radii[seg + 1]);
        let ab = b - a;
        let len2 = ab.norm_squared();
        let (lambda, interior) = if *p == a {
            (0.0, false)
        } else if *p == b {
            (1.0, false)
        } else {
            let l = (p - a).dot(&ab) / len2;
            if l <= 0.0 {
                (0.0, false)
            } else if l >= 1.0 {
                (1.0, false)
            } else {
                (l, true)
            }
        };
        let closest = a + ab * lambda;
        let diff = p - closest;
        let dist = diff.norm();
        let radius = (1.0 - lambda) * ra + lambda * rb;
        let mut grad = if dist > 0.0 { -diff / dist } else { Vector3::zeros() };
        if interior {
            grad += ab * ((rb - ra) / len2);
        }
        (radius - body_radius - dist, grad)
    }

    /// Margin, best segment index, and gradient.
    pub fn margin_with_gradient(&self, p: &Vector3<f64>, body_radius: f64) -> (f64, usize, Vector3<f64>) {
        let mut best = (f64::NEG_INFINITY, 0, Vector3::zeros());
        for seg in 0..self.num_segments() {
            let (m, g) = self.segment_margin(seg, p, body_radius);
            if m > best.0 {
                best = (m, seg, g);
            }
        }
        best
    }
}

/// Largest clearance of the encasing sphere inside any tapered capsule.
pub fn corridor_margin(p: &Vector3<f64>, c: &KeepInCorridor, body_radius: f64) -> f64 {
    c.margin_with_gradient(p, body_radius).0
}

/// Which part of free space a margin refers to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintId {
    Corridor,
    KeepOut(String),
}

impl std::fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintId::Corridor => write!(f, "corridor"),
            ConstraintId::KeepOut(name) => write!(f, "keepout:{name}"),
        }
    }
}

/// Keep-in corridor minus inflated keep-out ellipsoids.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeSpace {
    corridor: KeepInCorridor,
    keepouts: Vec<KeepOutEllipsoid>,
    body_radius: f64,
    inflated: Vec<Matrix3<f64>>,
}

impl FreeSpace {
    /// Builds free space and checks that every waypoint lies strictly inside.
    pub fn new(corridor: KeepInCorridor, keepouts: Vec<KeepOutEllipsoid>, body_radius: f64) -> Result<Self, GeometryError> {
        let fs = Self::unchecked(corridor, keepouts, body_radius)?;
        for (i, w) in fs.corridor.waypoints().iter().enumerate() {
            let (m, id) = fs.margin_with_source(w);
            if m <= 0.0 {
                return Err(GeometryError::InvalidMission(format!(
                    "waypoint {i} violates {id} (margin {m:.4})"
                )));
            }
        }
        Ok(fs)
    }

    /// Builds free space without the waypoint check, for validation reports.
    pub fn unchecked(corridor: KeepInCorridor, keepouts: Vec<KeepOutEllipsoid>, body_radius: f64) -> Result<Self, GeometryError> {
        if !(body_radius.is_finite() && body_radius > 0.0) {
            return Err(GeometryError::InvalidGeometry("body radius must be positive".into()));
        }
        let inflated = keepouts.iter().map(|e| e.inflated_shape(body_radius)).collect();
        Ok(Self {
            corridor,
            keepouts,
            body_radius,
            inflated,
        })
    }

    pub fn corridor(&self) -> &KeepInCorridor {
        &self.corridor
    }
    pub fn keepouts(&self) -> &[KeepOutEllipsoid] {
        &self.keepouts
    }
    pub fn body_radius(&self) -> f64 {
        self.body_radius
    }

    pub fn corridor_margin(&self, p: &Vector3<f64>) -> f64 {
        corridor_margin(p, &self.corridor, self.body_radius)
    }

    /// Each keep-out margin with the inflated shape, in declaration order.
    pub fn keepout_margins<'a>(&'a self, p: &'a Vector3<f64>) -> impl Iterator<Item = f64> + 'a {
        self.keepouts
            .iter()
            .zip(&self.inflated)
            .map(move |(e, s)| quadratic_margin(p, &e.center, s).0)
    }

    /// Smallest keep-out margin, its index and gradient; `None` without keep-outs.
    pub fn nearest_keepout(&self, p: &Vector3<f64>) -> Option<(f64, usize, Vector3<f64>)> {
        let mut best: Option<(f64, usize, Vector3<f64>)> = None;
        for (i, (e, s)) in self.keepouts.iter().zip(&self.inflated).enumerate() {
            let (m, g) = quadratic_margin(p, &e.center, s);
            if best.as_ref().is_none_or(|b| m < b.0) {
                best = Some((m, i, g));
            }
        }
        best
    }

    /// Free-space margin and the constraint that attains it.
    pub fn margin_with_source(&self, p: &Vector3<f64>) -> (f64, ConstraintId) {
        let mut best = (self.corridor_margin(p), ConstraintId::Corridor);
        if let Some((m, i, _)) = self.nearest_keepout(p) {
            if m < best.0 {
                best = (m, ConstraintId::KeepOut(self.keepouts[i].name.clone()));
            }
        }
        best
    }
}

/// `min(corridor margin, keep-out margins)`; positive strictly inside.
pub fn free_space_margin(p: &Vector3<f64>, fs: &FreeSpace) -> f64 {
    fs.margin_with_source(p).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Linear,
    Cubic,
}

#[derive(Debug, Clone, PartialEq)]
struct CubicSegment {
    u0: f64,
    h: f64,
    p0: Vector3<f64>,
    p1: Vector3<f64>,
    m0: Vector3<f64>,
    m1: Vector3<f64>,
    /// Subdivision leaves: parameter start and cumulative arc length.
    leaf_u: Vec<f64>,
    leaf_s: Vec<f64>,
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

impl CubicSegment {
    fn eval(&self, u: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let h = self.h;
        let a = self.u0 + h - u;
        let b = u - self.u0;
        let p = self.m0 * (a * a * a / (6.0 * h))
            + self.m1 * (b * b * b / (6.0 * h))
            + (self.p0 / h - self.m0 * (h / 6.0)) * a
            + (self.p1 / h - self.m1 * (h / 6.0)) * b;
        let dp = -self.m0 * (a * a / (2.0 * h)) + self.m1 * (b * b / (2.0 * h)) - (self.p0 / h - self.m0 * (h / 6.0))
            + (self.p1 / h - self.m1 * (h / 6.0));
        let ddp = self.m0 * (a / h) + self.m1 * (b / h);
        (p, dp, ddp)
    }

    fn speed(&self, u: f64) -> f64 {
        self.eval(u).1.norm()
    }

    fn gauss_length(&self, a: f64, b: f64) -> f64 {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        GL_NODES
            .iter()
            .zip(GL_WEIGHTS)
            .map(|(x, w)| w * self.speed(mid + half * x))
            .sum::<f64>()
            * half
    }

    fn chord(&self, a: f64, b: f64) -> f64 {
        (self.eval(b).0 - self.eval(a).0).norm()
    }

    fn subdivide(&self, a: f64, b: f64, depth: usize, out: &mut Vec<f64>) {
        let m = 0.5 * (a + b);
        let whole = self.chord(a, b);
        let split = self.chord(a, m) + self.chord(m, b);
        if depth >= 20 || (split - whole).abs() <= 1e-6 * split.max(1e-12) * 0.25 {
            out.push(a);
            return;
        }
        self.subdivide(a, m, depth + 1, out);
        self.subdivide(m, b, depth + 1, out);
    }

    fn build_leaves(&mut self) -> f64 {
        let mut starts = Vec::new();
        // always split at least a few times so short wiggles are resolved
        let n0 = 8;
        for i in 0..n0 {
            let a = self.u0 + self.h * i as f64 / n0 as f64;
            let b = self.u0 + self.h * (i + 1) as f64 / n0 as f64;
            self.subdivide(a, b, 0, &mut starts);
        }
        let mut leaf_s = Vec::with_capacity(starts.len() + 1);
        let mut s = 0.0;
        leaf_s.push(0.0);
        for (i, &a) in starts.iter().enumerate() {
            let b = starts.get(i + 1).copied().unwrap_or(self.u0 + self.h);
            s += self.gauss_length(a, b);
            leaf_s.push(s);
        }
        starts.push(self.u0 + self.h);
        self.leaf_u = starts;
        self.leaf_s = leaf_s;
        s
    }

    /// Parameter at local arc length `ds` from the segment start.
    fn param_at(&self, ds: f64) -> f64 {
        let total = *self.leaf_s.last().unwrap();
        if ds <= 0.0 {
            return self.u0;
        }
        if ds >= total {
            return self.u0 + self.h;
        }
        let i = match self.leaf_s.binary_search_by(|v| v.partial_cmp(&ds).unwrap()) {
            Ok(i) => return self.leaf_u[i],
            Err(i) => i - 1,
        };
        let (ua, ub) = (self.leaf_u[i], self.leaf_u[i + 1]);
        let target = ds - self.leaf_s[i];
        let span = self.leaf_s[i + 1] - self.leaf_s[i];
        let mut u = ua + (ub - ua) * target / span;
        for _ in 0..8 {
            let err = self.gauss_length(ua, u) - target;
            let step = err / self.speed(u);
            u = (u - step).clamp(ua, ub);
            if step.abs() < 1e-15 * self.h.max(1.0) {
                break;
            }
        }
        u
    }
}

/// A path point with its local frame derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub s: f64,
    pub position: Vector3<f64>,
    /// Unit tangent `dP/ds`.
    pub tangent: Vector3<f64>,
    /// `dT/ds`; zero on straight segments.
    pub curvature: Vector3<f64>,
    pub orientation: Quaternion<f64>,
    /// `dq/ds` of the interpolated orientation.
    pub orientation_rate: Quaternion<f64>,
    pub segment: usize,
    /// True where `s` sits on a tangent discontinuity (derivatives are one-sided).
    pub at_kink: bool,
}

/// Centerline through the inspection points, parameterized by arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePath {
    interpolation: Interpolation,
    waypoints: Vec<Vector3<f64>>,
    orientations: Vec<Quaternion<f64>>,
    knots: Vec<f64>,
    cubic: Vec<CubicSegment>,
}

/// Shortest-arc log of `qa^-1 qb`: returns `qb` sign-aligned with `qa`
/// and the half-angle rotation vector.
fn relative_half_rotation(qa: &Quaternion<f64>, qb: &Quaternion<f64>) -> (Quaternion<f64>, Vector3<f64>) {
    let qb = if qa.coords.dot(&qb.coords) < 0.0 { -*qb } else { *qb };
    let rel = qa.conjugate() * qb;
    let v = rel.imag();
    let sn = v.norm();
    let half_angle = sn.atan2(rel.w);
    let axis_scaled = if sn > 1e-15 { v * (half_angle / sn) } else { v };
    (qb, axis_scaled)
}

/// Shortest-arc slerp from `qa` to `qb` at `tau`, with `dq/dtau`.
pub fn slerp_with_rate(qa: &Quaternion<f64>, qb: &Quaternion<f64>, tau: f64) -> (Quaternion<f64>, Quaternion<f64>) {
    let (_, half_rot) = relative_half_rotation(qa, qb);
    let angle = half_rot.norm();
    let delta = if angle > 1e-15 {
        let a = angle * tau;
        Quaternion::from_parts(a.cos(), half_rot * (a.sin() / angle))
    } else {
        Quaternion::from_parts(1.0, half_rot * tau)
    };
    let q = qa * delta;
    // dq/dtau = q * (half_rot, 0)
    let rate = q * Quaternion::from_imag(half_rot);
    (q, rate)
}

fn natural_spline_moments(u: &[f64], p: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let n = p.len();
    let mut m = vec![Vector3::zeros(); n];
    if n < 3 {
        return m;
    }
    // Thomas algorithm on the interior equations
    let k = n - 2;
    let mut diag = vec![0.0; k];
    let mut upper = vec![0.0; k];
    let mut rhs = vec![Vector3::zeros(); k];
    for i in 1..n - 1 {
        let h0 = u[i] - u[i - 1];
        let h1 = u[i + 1] - u[i];
        diag[i - 1] = (h0 + h1) / 3.0;
        upper[i - 1] = h1 / 6.0;
        rhs[i - 1] = (p[i + 1] - p[i]) / h1 - (p[i] - p[i - 1]) / h0;
    }
    for i in 1..k {
        let lower = (u[i + 1] - u[i]) / 6.0;
        let w = lower / diag[i - 1];
        diag[i] -= w * upper[i - 1];
        let prev = rhs[i - 1];
        rhs[i] -= prev * w;
    }
    let mut sol = vec![Vector3::zeros(); k];
    sol[k - 1] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        sol[i] = (rhs[i] - sol[i + 1] * upper[i]) / diag[i];
    }
    m[1..(k + 1)].copy_from_slice(&sol[..k]);
    m
}

/// Builds the reference centerline through the inspection points.
pub fn build_path(points: &[InspectionPoint], interpolation: Interpolation) -> Result<ReferencePath, GeometryError> {
    if points.len() < 2 {
        return Err(GeometryError::InvalidMission("a path needs at least two inspection points".into()));
    }
    for (i, w) in points.windows(2).enumerate() {
        if w[0].position == w[1].position {
            return Err(GeometryError::InvalidMission(format!(
                "inspection points {i} and {} share a position",
                i + 1
            )));
        }
    }
    let waypoints: Vec<_> = points.iter().map(|p| p.position).collect();
    let orientations: Vec<_> = points.iter().map(|p| p.orientation.normalize()).collect();
    let mut knots = Vec::with_capacity(points.len());
    knots.push(0.0);
    let mut cubic = Vec::new();
    match interpolation {
        Interpolation::Linear => {
            let mut s = 0.0;
            for w in waypoints.windows(2) {
                s += (w[1] - w[0]).norm();
                knots.push(s);
            }
        }
        Interpolation::Cubic => {
            let mut u = vec![0.0];
            for w in waypoints.windows(2) {
                u.push(u.last().unwrap() + (w[1] - w[0]).norm());
            }
            let m = natural_spline_moments(&u, &waypoints);
            let mut s = 0.0;
            for i in 0..waypoints.len() - 1 {
                let mut seg = CubicSegment {
                    u0: u[i],
                    h: u[i + 1] - u[i],
                    p0: waypoints[i],
                    p1: waypoints[i + 1],
                    m0: m[i],
                    m1: m[i + 1],
                    leaf_u: Vec::new(),
                    leaf_s: Vec::new(),
                };
                s += seg.build_leaves();
                knots.push(s);
                cubic.push(seg);
            }
        }
    }
    Ok(ReferencePath {
        interpolation,
        waypoints,
        orientations,
        knots,
        cubic,
    })
}

impl ReferencePath {
    pub fn length(&self) -> f64 {
        *self.knots.last().unwrap()
    }
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
    pub fn waypoints(&self) -> &[Vector3<f64>] {
        &self.waypoints
    }
    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }
    pub fn num_segments(&self) -> usize {
        self.waypoints.len() - 1
    }

    /// Segment containing `s` (right-continuous, last segment at `L`).
    pub fn segment_at(&self, s: f64) -> usize {
        let n = self.num_segments();
        match self.knots.binary_search_by(|k| k.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(n - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 1),
        }
    }

    pub fn position(&self, s: f64) -> Vector3<f64> {
        self.sample(s).position
    }

    /// Evaluates the path at `s`, clamped into `[0, L]`.
    pub fn sample(&self, s: f64) -> PathSample {
        let s = s.clamp(0.0, self.length());
        let seg = self.segment_at(s);
        let (s0, s1) = (self.knots[seg], self.knots[seg + 1]);
        let seg_len = s1 - s0;
        let frac = ((s - s0) / seg_len).clamp(0.0, 1.0);
        let (position, tangent, curvature) = match self.interpolation {
            Interpolation::Linear => {
                let a = self.waypoints[seg];
                let b = self.waypoints[seg + 1];
                let t = (b - a) / seg_len;
                let p = if frac == 1.0 { b } else { a + (b - a) * frac };
                (p, t, Vector3::zeros())
            }
            Interpolation::Cubic => {
                let c = &self.cubic[seg];
                let u = c.param_at(s - s0);
                let (p, dp, ddp) = c.eval(u);
                let speed = dp.norm();
                let t = dp / speed;
                let kappa = (ddp - t * t.dot(&ddp)) / (speed * speed);
                (p, t, kappa)
            }
        };
        let (q, dq_dtau) = slerp_with_rate(&self.orientations[seg], &self.orientations[seg + 1], frac);
        let at_kink = self.interpolation == Interpolation::Linear
            && ((seg > 0 && s == s0) || (seg + 1 < self.num_segments() && s == s1));
        PathSample {
            s,
            position,
            tangent,
            curvature,
            orientation: q,
            orientation_rate: dq_dtau / seg_len,
            segment: seg,
            at_kink,
        }
    }

    fn project_segment(&self, seg: usize, p: &Vector3<f64>) -> (f64, f64) {
        let (s0, s1) = (self.knots[seg], self.knots[seg + 1]);
        match self.interpolation {
            Interpolation::Linear => {
                let a = self.waypoints[seg];
                let b = self.waypoints[seg + 1];
                let ab = b - a;
                let lambda = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                let s = s0 + lambda * (s1 - s0);
                (s, (p - (a + ab * lambda)).norm())
            }
            Interpolation::Cubic => {
                let dist = |s: f64| (self.position(s) - p).norm();
                let n = 24;
                let mut best = (s0, dist(s0));
                for i in 1..=n {
                    let s = s0 + (s1 - s0) * i as f64 / n as f64;
                    let d = dist(s);
                    if d < best.1 {
                        best = (s, d);
                    }
                }
                let h = (s1 - s0) / n as f64;
                let (mut lo, mut hi) = ((best.0 - h).max(s0), (best.0 + h).min(s1));
                let g = (5f64.sqrt() - 1.0) / 2.0;
                let mut c = hi - g * (hi - lo);
                let mut d = lo + g * (hi - lo);
                let (mut fc, mut fd) = (dist(c), dist(d));
                while hi - lo > 1e-9 {
                    if fc < fd {
                        hi = d;
                        d = c;
                        fd = fc;
                        c = hi - g * (hi - lo);
                        fc = dist(c);
                    } else {
                        lo = c;
                        c = d;
                        fc = fd;
                        d = lo + g * (hi - lo);
                        fd = dist(d);
                    }
                }
                let s = 0.5 * (lo + hi);
                (s, dist(s))
            }
        }
    }
}

/// Result of projecting a point onto the reference path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub point: Vector3<f64>,
    pub lateral: f64,
}

/// Closest path point searching the hint's segment and its two neighbours.
/// Ties keep the hint's own segment, then the earlier neighbour.
pub fn project_to_path(p: &Vector3<f64>, path: &ReferencePath, s_hint: f64) -> Projection {
    let seg = path.segment_at(s_hint.clamp(0.0, path.length()));
    let mut candidates = vec![seg];
    if seg > 0 {
        candidates.push(seg - 1);
    }
    if seg + 1 < path.num_segments() {
        candidates.push(seg + 1);
    }
    let mut best: Option<(f64, f64)> = None;
    for c in candidates {
        let (s, d) = path.project_segment(c, p);
        if best.is_none_or(|(_, bd)| d < bd - 1e-12) {
            best = Some((s, d));
        }
    }
    let (s, lateral) = best.unwrap();
    Projection {
        s,
        point: path.position(s),
        lateral,
    }
}

/// Where along the mission a violation was found.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub constraint: ConstraintId,
    /// First waypoint inside the violating stretch, if any.
    pub waypoint: Option<usize>,
    /// Segments touched by the violating stretch.
    pub segments: Vec<usize>,
    /// Arc length interval of the violating stretch.
    pub s_range: (f64, f64),
    pub worst_margin: f64,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.waypoint {
            Some(w) => write!(f, "waypoint {w} violates {}", self.constraint)?,
            None => write!(f, "segment {} violates {}", self.segments[0], self.constraint)?,
        }
        write!(
            f,
            " (s in [{:.3}, {:.3}] m, worst margin {:.4})",
            self.s_range.0, self.s_range.1, self.worst_margin
        )
    }
}

/// Samples validated per corridor segment, in addition to the waypoints.
pub const VALIDATION_SAMPLES_PER_SEGMENT: usize = 100;

/// Checks every waypoint and evenly spaced samples along each straight
/// corridor segment. Contiguous violating stretches are merged per
/// constraint; an empty result means the mission is geometrically feasible.
pub fn validate_mission(points: &[InspectionPoint], fs: &FreeSpace) -> Vec<Violation> {
    let wps: Vec<_> = points.iter().map(|p| p.position).collect();
    if wps.len() < 2 {
        return Vec::new();
    }
    // (s, segment, waypoint index, point)
    let mut samples = Vec::new();
    let mut s0 = 0.0;
    for seg in 0..wps.len() - 1 {
        let (a, b) = (wps[seg], wps[seg + 1]);
        let len = (b - a).norm();
        samples.push((s0, seg, Some(seg), a));
        for i in 1..VALIDATION_SAMPLES_PER_SEGMENT {
            let f = i as f64 / VALIDATION_SAMPLES_PER_SEGMENT as f64;
            samples.push((s0 + f * len, seg, None, a + (b - a) * f));
        }
        s0 += len;
    }
    samples.push((s0, wps.len() - 2, Some(wps.len() - 1), wps[wps.len() - 1]));

    let mut ids = vec![ConstraintId::Corridor];
    ids.extend(fs.keepouts().iter().map(|e| ConstraintId::KeepOut(e.name().to_string())));
    let mut out = Vec::new();
    for (ci, id) in ids.iter().enumerate() {
        let mut run: Option<Violation> = None;
        for &(s, seg, wp, p) in &samples {
            let m = if ci == 0 {
                fs.corridor_margin(&p)
            } else {
                fs.keepout_margins(&p).nth(ci - 1).unwrap()
            };
            if m <= 0.0 {
                let v = run.get_or_insert_with(|| Violation {
                    constraint: id.clone(),
                    waypoint: None,
                    segments: Vec::new(),
                    s_range: (s, s),
                    worst_margin: m,
                });
                if v.waypoint.is_none() {
                    v.waypoint = wp;
                }
                if v.segments.last() != Some(&seg) {
                    v.segments.push(seg);
                }
                v.s_range.1 = s;
                v.worst_margin = v.worst_margin.min(m);
            } else if let Some(v) = run.take() {
                out.push(v);
            }
        }
        if let Some(v) = run.take() {
            out.push(v);
        }
    }
    out.sort_by(|a, b| a.s_range.0.partial_cmp(&b.s_range.0).unwrap());
    out
}
