//! Mission files, validation and run export.
//!
//! A mission is a JSON document with `schema_version: 1` and the top-level
//! keys `vehicle`, `inspection_points`, `keepouts`, `mode`, `planner`,
//! `faults`, `sim`, `planner_knows_faults`, `initial_state` and `name`.
//! Everything except `schema_version`, `inspection_points` and `mode` has a
//! default. Attitudes are quaternions written `[x, y, z, w]`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Quaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{make_default_vehicle, State, Thruster, VehicleModel};
use crate::geometry::{build_path, validate_mission, FreeSpace, InspectionPoint, Interpolation, KeepInCorridor, KeepOutEllipsoid, ReferencePath, Violation};
use crate::objective::{ErrorMatrix, FlybyWeights, LingerWeights};
use crate::ocp::SqpSettings;
use crate::planner::{Mode, PlannerParams};
use crate::sim::{FaultSchedule, Metrics, SimLog, SimSettings};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MissionError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema error in `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("mission is geometrically infeasible: {}", join_violations(.0))]
    Validation(Vec<Violation>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MissionError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            MissionError::Parse { .. } => "parse",
            MissionError::Schema { .. } => "schema",
            MissionError::Validation(_) => "validation",
            MissionError::Io { .. } => "io",
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

fn schema(field: impl Into<String>, message: impl std::fmt::Display) -> MissionError {
    MissionError::Schema {
        field: field.into(),
        message: message.to_string(),
    }
}

/// A validated mission.
#[derive(Debug, Clone, PartialEq)]
pub struct Mission {
    pub name: String,
    pub vehicle: VehicleModel,
    pub points: Vec<InspectionPoint>,
    pub keepouts: Vec<KeepOutEllipsoid>,
    pub params: PlannerParams,
    pub faults: FaultSchedule,
    pub sim: SimSettings,
    /// Hands the true fault mask to the planner (ablation only).
    pub planner_knows_faults: bool,
    pub initial_state: Option<State>,
}

impl Mission {
    pub fn mode(&self) -> Mode {
        self.params.mode
    }

    pub fn free_space(&self) -> FreeSpace {
        let corridor = KeepInCorridor::from_points(&self.points).expect("validated mission");
        FreeSpace::unchecked(corridor, self.keepouts.clone(), self.vehicle.body_radius()).expect("validated mission")
    }

    pub fn path(&self) -> ReferencePath {
        self.path_with(self.params.interpolation)
    }

    pub fn path_with(&self, interpolation: Interpolation) -> ReferencePath {
        build_path(&self.points, interpolation).expect("validated mission")
    }

    /// Given initial state, or at rest on the first inspection point.
    pub fn initial_state(&self) -> State {
        self.initial_state
            .unwrap_or_else(|| State::at_rest(self.points[0].position, self.points[0].orientation))
    }

    /// Checks mode requirements and geometry; returns warnings.
    pub fn validate(&self) -> Result<Vec<String>, MissionError> {
        let mut warnings = Vec::new();
        let n_u = self.vehicle.num_thrusters();
        if self.points.len() < 2 {
            return Err(schema("inspection_points", "at least two inspection points are required"));
        }
        match self.params.mode {
            Mode::Flyby => {
                if self.points.iter().any(|p| p.t.is_some() || p.linger.is_some()) {
                    warnings.push("flyby mode ignores t and t_l".to_string());
                }
            }
            Mode::Linger => {
                let mut prev: Option<f64> = None;
                for (i, p) in self.points.iter().enumerate() {
                    let field = |f: &str| format!("inspection_points[{i}].{f}");
                    let (Some(t), Some(tl)) = (p.t, p.linger) else {
                        return Err(schema(field(if p.t.is_none() { "t" } else { "t_l" }), "required in linger mode"));
                    };
                    if !(t.is_finite() && t >= 0.0) {
                        return Err(schema(field("t"), format!("must be >= 0, got {t}")));
                    }
                    if !(tl.is_finite() && tl >= 0.0) {
                        return Err(schema(field("t_l"), format!("must be >= 0, got {tl}")));
                    }
                    if let Some(dep) = prev {
                        if t <= dep {
                            return Err(schema(field("t"), "arrival must come after the previous departure"));
                        }
                    }
                    prev = Some(t + tl);
                }
            }
        }
        self.params.validate(n_u).map_err(|e| schema("planner", e))?;
        self.faults.validate(n_u).map_err(|e| schema("faults", e))?;
        self.sim.validate().map_err(|e| schema("sim", e))?;
        build_path(&self.points, self.params.interpolation).map_err(|e| schema("inspection_points", e))?;
        let corridor = KeepInCorridor::from_points(&self.points).map_err(|e| schema("inspection_points", e))?;
        let fs = FreeSpace::unchecked(corridor, self.keepouts.clone(), self.vehicle.body_radius())
            .map_err(|e| schema("keepouts", e))?;
        let violations = validate_mission(&self.points, &fs);
        if !violations.is_empty() {
            return Err(MissionError::Validation(violations));
        }
        Ok(warnings)
    }
}

// ---- file schema ----

fn default_orientation() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThrusterFile {
    position: [f64; 3],
    direction: [f64; 3],
    max_thrust: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VehicleFile {
    mass: Option<f64>,
    inertia: Option<[[f64; 3]; 3]>,
    body_radius: Option<f64>,
    isp: Option<f64>,
    thrusters: Option<Vec<ThrusterFile>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointFile {
    position: [f64; 3],
    #[serde(default = "default_orientation")]
    orientation: [f64; 4],
    corridor_radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    velocity: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeepOutFile {
    name: String,
    center: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    semi_axes: Option<[f64; 3]>,
    /// Orientation of the semi-axes, used with `semi_axes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rotation: Option<[f64; 4]>,
    /// Full shape matrix, alternative to `semi_axes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<[[f64; 3]; 3]>,
}

/// Either a diagonal or a full square matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum MatrixFile {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixFile {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let diagonal = (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0));
        if diagonal {
            MatrixFile::Diagonal(m.diagonal().iter().copied().collect())
        } else {
            MatrixFile::Full(m.row_iter().map(|r| r.iter().copied().collect()).collect())
        }
    }

    fn to_matrix(&self, field: &str, n: usize) -> Result<DMatrix<f64>, MissionError> {
        match self {
            MatrixFile::Diagonal(d) if d.len() == n => Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d))),
            MatrixFile::Full(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
            _ => Err(schema(field, format!("expected {n} diagonal entries or a {n}x{n} matrix"))),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LingerWeightsFile {
    q: Option<MatrixFile>,
    r: Option<MatrixFile>,
    q_n: Option<MatrixFile>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FlybyWeightsFile {
    q_c: Option<f64>,
    q_l: Option<f64>,
    mu: Option<f64>,
    q_att: Option<f64>,
    r: Option<MatrixFile>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PlannerFile {
    horizon: Option<usize>,
    dt: Option<f64>,
    v_max: Option<f64>,
    w_max: Option<f64>,
    screen_margin: Option<f64>,
    terminal_radius: Option<f64>,
    terminal_speed: Option<f64>,
    progress_rate_max: Option<f64>,
    approach_time: Option<f64>,
    approach_speed: Option<f64>,
    interpolation: Option<Interpolation>,
    sqp: Option<SqpSettings>,
    linger: LingerWeightsFile,
    flyby: FlybyWeightsFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    position: [f64; 3],
    #[serde(default = "default_orientation")]
    attitude: [f64; 4],
    #[serde(default)]
    velocity: [f64; 3],
    #[serde(default)]
    angular_rate: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MissionFile {
    schema_version: u32,
    #[serde(default)]
    name: String,
    #[serde(default)]
    vehicle: VehicleFile,
    inspection_points: Vec<PointFile>,
    #[serde(default)]
    keepouts: Vec<KeepOutFile>,
    mode: Mode,
    #[serde(default)]
    planner: PlannerFile,
    #[serde(default)]
    faults: FaultSchedule,
    #[serde(default)]
    sim: SimSettings,
    #[serde(default)]
    planner_knows_faults: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_state: Option<StateFile>,
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

fn quat(field: &str, a: [f64; 4]) -> Result<Quaternion<f64>, MissionError> {
    let q = Quaternion::new(a[3], a[0], a[1], a[2]);
    let n = q.norm();
    if !(n.is_finite() && n > 1e-9) {
        return Err(schema(field, "quaternion must be nonzero"));
    }
    if (n - 1.0).abs() > 1e-6 {
        return Err(schema(field, format!("quaternion must have unit norm, got {n}")));
    }
    Ok(if (n - 1.0).abs() < 1e-12 { q } else { q / n })
}

fn quat_array(q: &Quaternion<f64>) -> [f64; 4] {
    [q.i, q.j, q.k, q.w]
}

fn mat3(a: [[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| a[i][j])
}

fn mat3_array(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn vehicle_from(v: &VehicleFile) -> Result<VehicleModel, MissionError> {
    let d = make_default_vehicle();
    let thrusters = match &v.thrusters {
        Some(t) => t
            .iter()
            .map(|t| Thruster {
                position: vec3(t.position),
                direction: vec3(t.direction),
                max_thrust: t.max_thrust,
            })
            .collect(),
        None => d.thrusters().to_vec(),
    };
    VehicleModel::new(
        v.mass.unwrap_or(d.mass()),
        v.inertia.map(mat3).unwrap_or(*d.inertia()),
        thrusters,
        v.body_radius.unwrap_or(d.body_radius()),
        v.isp.unwrap_or(d.isp()),
    )
    .map_err(|e| schema("vehicle", e))
}

fn params_from(p: &PlannerFile, mode: Mode, n_u: usize) -> Result<PlannerParams, MissionError> {
    let d = PlannerParams::default_for(n_u);
    let ld = &d.linger;
    let fd = &d.flyby;
    let e12 = |f: &str, m: &Option<MatrixFile>, default: &ErrorMatrix| -> Result<ErrorMatrix, MissionError> {
        match m {
            Some(m) => Ok(ErrorMatrix::from_column_slice(m.to_matrix(f, 12)?.as_slice())),
            None => Ok(*default),
        }
    };
    let r = |f: &str, m: &Option<MatrixFile>, default: &DMatrix<f64>| match m {
        Some(m) => m.to_matrix(f, n_u),
        None => Ok(default.clone()),
    };
    let params = PlannerParams {
        mode,
        horizon: p.horizon.unwrap_or(d.horizon),
        dt: p.dt.unwrap_or(d.dt),
        linger: LingerWeights {
            q: e12("planner.linger.q", &p.linger.q, &ld.q)?,
            r: r("planner.linger.r", &p.linger.r, &ld.r)?,
            q_n: e12("planner.linger.q_n", &p.linger.q_n, &ld.q_n)?,
        },
        flyby: FlybyWeights {
            q_c: p.flyby.q_c.unwrap_or(fd.q_c),
            q_l: p.flyby.q_l.unwrap_or(fd.q_l),
            mu: p.flyby.mu.unwrap_or(fd.mu),
            q_att: p.flyby.q_att.unwrap_or(fd.q_att),
            r: r("planner.flyby.r", &p.flyby.r, &fd.r)?,
        },
        v_max: p.v_max.unwrap_or(d.v_max),
        w_max: p.w_max.unwrap_or(d.w_max),
        sqp: p.sqp.clone().unwrap_or(d.sqp),
        screen_margin: p.screen_margin.unwrap_or(d.screen_margin),
        terminal_radius: p.terminal_radius.unwrap_or(d.terminal_radius),
        terminal_speed: p.terminal_speed.unwrap_or(d.terminal_speed),
        progress_rate_max: p.progress_rate_max.unwrap_or(d.progress_rate_max),
        approach_time: p.approach_time.unwrap_or(d.approach_time),
        approach_speed: p.approach_speed.unwrap_or(d.approach_speed),
        interpolation: p.interpolation.unwrap_or(d.interpolation),
    };
    params.validate(n_u).map_err(|e| schema("planner", e))?;
    Ok(params)
}

fn mission_from(f: MissionFile) -> Result<Mission, MissionError> {
    if f.schema_version != SCHEMA_VERSION {
        return Err(schema(
            "schema_version",
            format!("unsupported version {}, expected {SCHEMA_VERSION}", f.schema_version),
        ));
    }
    let vehicle = vehicle_from(&f.vehicle)?;
    let mut points = Vec::with_capacity(f.inspection_points.len());
    for (i, p) in f.inspection_points.iter().enumerate() {
        let field = format!("inspection_points[{i}]");
        if !(p.corridor_radius.is_finite() && p.corridor_radius > 0.0) {
            return Err(schema(format!("{field}.corridor_radius"), "must be positive"));
        }
        let mut pt = InspectionPoint::new(vec3(p.position), quat(&format!("{field}.orientation"), p.orientation)?, p.corridor_radius);
        pt.t = p.t;
        pt.linger = p.t_l;
        pt.velocity = p.velocity.map(vec3);
        points.push(pt);
    }
    let mut keepouts = Vec::with_capacity(f.keepouts.len());
    for (i, k) in f.keepouts.iter().enumerate() {
        let field = format!("keepouts[{i}]");
        let e = match (k.semi_axes, k.shape) {
            (Some(axes), None) => {
                let rot = match k.rotation {
                    Some(r) => quat(&format!("{field}.rotation"), r)?,
                    None => Quaternion::identity(),
                };
                let rot = crate::dynamics::quat_to_rotmat(&rot).map_err(|e| schema(format!("{field}.rotation"), e))?;
                KeepOutEllipsoid::from_semi_axes(k.name.clone(), vec3(k.center), vec3(axes), rot)
            }
            (None, Some(shape)) if k.rotation.is_none() => KeepOutEllipsoid::new(k.name.clone(), vec3(k.center), mat3(shape)),
            _ => return Err(schema(field, "give either semi_axes (with optional rotation) or shape")),
        }
        .map_err(|e| schema(format!("keepouts[{i}]"), e))?;
        keepouts.push(e);
    }
    let params = params_from(&f.planner, f.mode, vehicle.num_thrusters())?;
    let initial_state = match f.initial_state {
        Some(s) => Some(State {
            position: vec3(s.position),
            attitude: quat("initial_state.attitude", s.attitude)?,
            velocity: vec3(s.velocity),
            angular_rate: vec3(s.angular_rate),
        }),
        None => None,
    };
    Ok(Mission {
        name: f.name,
        vehicle,
        points,
        keepouts,
        params,
        faults: f.faults,
        sim: f.sim,
        planner_knows_faults: f.planner_knows_faults,
        initial_state,
    })
}

fn file_from(m: &Mission) -> MissionFile {
    let v = &m.vehicle;
    let p = &m.params;
    let e12 = |q: &ErrorMatrix| MatrixFile::from_matrix(&DMatrix::from_column_slice(12, 12, q.as_slice()));
    MissionFile {
        schema_version: SCHEMA_VERSION,
        name: m.name.clone(),
        vehicle: VehicleFile {
            mass: Some(v.mass()),
            inertia: Some(mat3_array(v.inertia())),
            body_radius: Some(v.body_radius()),
            isp: Some(v.isp()),
            thrusters: Some(
                v.thrusters()
                    .iter()
                    .map(|t| ThrusterFile {
                        position: t.position.into(),
                        direction: t.direction.into(),
                        max_thrust: t.max_thrust,
                    })
                    .collect(),
            ),
        },
        inspection_points: m
            .points
            .iter()
            .map(|pt| PointFile {
                position: pt.position.into(),
                orientation: quat_array(&pt.orientation),
                corridor_radius: pt.corridor_radius,
                t: pt.t,
                t_l: pt.linger,
                velocity: pt.velocity.map(Into::into),
            })
            .collect(),
        keepouts: m
            .keepouts
            .iter()
            .map(|k| KeepOutFile {
                name: k.name().to_string(),
                center: (*k.center()).into(),
                semi_axes: None,
                rotation: None,
                shape: Some(mat3_array(k.shape())),
            })
            .collect(),
        mode: p.mode,
        planner: PlannerFile {
            horizon: Some(p.horizon),
            dt: Some(p.dt),
            v_max: Some(p.v_max),
            w_max: Some(p.w_max),
            screen_margin: Some(p.screen_margin),
            terminal_radius: Some(p.terminal_radius),
            terminal_speed: Some(p.terminal_speed),
            progress_rate_max: Some(p.progress_rate_max),
            approach_time: Some(p.approach_time),
            approach_speed: Some(p.approach_speed),
            interpolation: Some(p.interpolation),
            sqp: Some(p.sqp.clone()),
            linger: LingerWeightsFile {
                q: Some(e12(&p.linger.q)),
                r: Some(MatrixFile::from_matrix(&p.linger.r)),
                q_n: Some(e12(&p.linger.q_n)),
            },
            flyby: FlybyWeightsFile {
                q_c: Some(p.flyby.q_c),
                q_l: Some(p.flyby.q_l),
                mu: Some(p.flyby.mu),
                q_att: Some(p.flyby.q_att),
                r: Some(MatrixFile::from_matrix(&p.flyby.r)),
            },
        },
        faults: m.faults.clone(),
        sim: m.sim,
        planner_knows_faults: m.planner_knows_faults,
        initial_state: m.initial_state.map(|s| StateFile {
            position: s.position.into(),
            attitude: quat_array(&s.attitude),
            velocity: s.velocity.into(),
            angular_rate: s.angular_rate.into(),
        }),
    }
}

/// Parses and validates a mission document. Returns the mission and any
/// warnings.
pub fn parse_mission_str(text: &str) -> Result<(Mission, Vec<String>), MissionError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let file: MissionFile = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => schema(field, inner),
            _ => MissionError::Parse {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            },
        }
    })?;
    de.end().map_err(|e| MissionError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mission = mission_from(file)?;
    let warnings = mission.validate()?;
    Ok((mission, warnings))
}

pub fn parse_mission(path: impl AsRef<Path>) -> Result<(Mission, Vec<String>), MissionError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MissionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_mission_str(&text)
}

/// Pretty-printed mission document with every default filled in.
pub fn serialize_mission(m: &Mission) -> String {
    let mut s = serde_json::to_string_pretty(&file_from(m)).expect("mission serializes");
    s.push('\n');
    s
}

/// Parses a standalone fault schedule file (a JSON array of events).
pub fn parse_faults(path: impl AsRef<Path>, n_u: usize) -> Result<FaultSchedule, MissionError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MissionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let faults: FaultSchedule = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = format!("faults{}", e.path());
        let inner = e.into_inner();
        match inner.classify() {
            serde_json::error::Category::Data => schema(field, inner),
            _ => MissionError::Parse {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            },
        }
    })?;
    faults.validate(n_u).map_err(|e| schema("faults", e))?;
    Ok(faults)
}

// ---- export ----

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const SUMMARY_FILE: &str = "summary.json";

/// Trajectory CSV, one row per control step.
///
/// Columns: `t, r_x, r_y, r_z, q_x, q_y, q_z, q_w, v_x, v_y, v_z, w_x, w_y,
/// w_z, u_1 .. u_n, margin, status`.
pub fn trajectory_csv(log: &SimLog) -> String {
    let n_u = log.records.first().map_or(0, |r| r.command.len());
    let mut out = String::from("t,r_x,r_y,r_z,q_x,q_y,q_z,q_w,v_x,v_y,v_z,w_x,w_y,w_z");
    for i in 1..=n_u {
        let _ = write!(out, ",u_{i}");
    }
    out.push_str(",margin,status\n");
    for r in &log.records {
        let s = &r.state;
        let q = &s.attitude;
        let mut row: Vec<f64> = vec![r.t];
        row.extend(s.position.iter());
        row.extend([q.i, q.j, q.k, q.w]);
        row.extend(s.velocity.iter());
        row.extend(s.angular_rate.iter());
        row.extend(r.command.0.iter());
        row.push(r.margin);
        for v in row {
            let _ = write!(out, "{v},");
        }
        out.push_str(&r.status.map_or("none".to_string(), |s| s.to_string()));
        out.push('\n');
    }
    out
}

fn opt(v: Option<f64>) -> String {
    v.map_or("none".to_string(), |v| v.to_string())
}

/// Flat `key = value` metrics block.
pub fn metrics_text(log: &SimLog, m: &Metrics) -> String {
    let mut out = String::new();
    let lines = [
        ("termination", log.termination.to_string()),
        ("completed", m.completed.to_string()),
        ("avg_lateral_dev", m.avg_lateral_dev.to_string()),
        ("total_translational_impulse", opt(m.total_translational_impulse)),
        ("inspect_time", opt(m.inspect_time)),
        ("propellant_mass", opt(m.propellant_mass)),
        ("max_corridor_violation", m.max_corridor_violation.to_string()),
        ("requested_impulse", m.requested_impulse.to_string()),
        ("realized_impulse", m.realized_impulse.to_string()),
        ("steps", log.records.len().to_string()),
    ];
    for (k, v) in lines {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    schema_version: u32,
    mission: &'a str,
    mode: Mode,
    termination: crate::sim::Termination,
    steps: usize,
    metrics: &'a Metrics,
    violation: &'a Option<crate::sim::ViolationEvent>,
    planner_status: StatusCounts,
}

#[derive(Serialize, Default)]
struct StatusCounts {
    converged: usize,
    max_iter: usize,
    infeasible_soft: usize,
    failed: usize,
}

pub fn summary_json(name: &str, log: &SimLog, m: &Metrics) -> String {
    use crate::ocp::SolveStatus::*;
    let mut counts = StatusCounts::default();
    for s in log.records.iter().filter_map(|r| r.status) {
        match s {
            Converged => counts.converged += 1,
            MaxIter => counts.max_iter += 1,
            InfeasibleSoft => counts.infeasible_soft += 1,
            Failed => counts.failed += 1,
        }
    }
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        mission: name,
        mode: log.mode,
        termination: log.termination,
        steps: log.records.len(),
        metrics: m,
        violation: &log.violation,
        planner_status: counts,
    };
    let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
    s.push('\n');
    s
}

/// Writes the trajectory CSV, metrics block and summary into `dir`.
pub fn export_run(name: &str, log: &SimLog, metrics: &Metrics, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, MissionError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MissionError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let files = [
        (TRAJECTORY_FILE, trajectory_csv(log)),
        (METRICS_FILE, metrics_text(log, metrics)),
        (SUMMARY_FILE, summary_json(name, log, metrics)),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (file, content) in files {
        let path = dir.join(file);
        std::fs::write(&path, content).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
