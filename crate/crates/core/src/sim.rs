//! Closed-loop simulation of planner and plant with fault injection.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rk4_step, thruster_wrench, ControlInput, FaultMask, State, VehicleModel};
use crate::geometry::{project_to_path, ConstraintId, FreeSpace, ReferencePath};
use crate::mission::Mission;
use crate::ocp::SolveStatus;
use crate::planner::{Mode, Planner, PlannerParams, Targets};

/// Standard gravity used for the propellant conversion [m/s^2].
pub const G0: f64 = 9.80665;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid fault schedule: {0}")]
    InvalidFaults(String),
    #[error("invalid simulation settings: {0}")]
    InvalidSettings(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    /// Activation time [s].
    pub time: f64,
    pub thruster: usize,
    /// Remaining fraction of the commanded thrust.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FaultSchedule {
    pub events: Vec<FaultEvent>,
}

impl FaultSchedule {
    pub fn new(events: Vec<FaultEvent>, n_u: usize) -> Result<Self, SimError> {
        let s = Self { events };
        s.validate(n_u)?;
        Ok(s)
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, n_u: usize) -> Result<(), SimError> {
        for (i, e) in self.events.iter().enumerate() {
            if !(e.time.is_finite() && e.time >= 0.0) {
                return Err(SimError::InvalidFaults(format!("event {i}: time must be >= 0, got {}", e.time)));
            }
            if e.thruster >= n_u {
                return Err(SimError::InvalidFaults(format!(
                    "event {i}: thruster index {} out of range for {n_u} thrusters",
                    e.thruster
                )));
            }
            if !(0.0..=1.0).contains(&e.scale) {
                return Err(SimError::InvalidFaults(format!("event {i}: scale must lie in [0, 1], got {}", e.scale)));
            }
        }
        Ok(())
    }

    /// Mask in effect at time `t`. Later events override earlier ones on the
    /// same thruster.
    pub fn mask_at(&self, t: f64, n_u: usize) -> FaultMask {
        let mut order: Vec<&FaultEvent> = self.events.iter().filter(|e| e.time <= t).collect();
        order.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut scale = DVector::from_element(n_u, 1.0);
        for e in order {
            scale[e.thruster] = e.scale;
        }
        FaultMask::new(scale).expect("validated schedule")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    /// Replanning period [s].
    pub control_period: f64,
    /// Plant integration step [s].
    pub sim_dt: f64,
    pub max_time: f64,
    /// Completion tolerance on the final waypoint position [m].
    pub position_tol: f64,
    /// Completion tolerance on the final speed [m/s].
    pub speed_tol: f64,
    /// Dwell counting radius around linger waypoints [m].
    pub dwell_radius: f64,
    /// Dwell counting speed limit [m/s].
    pub dwell_speed: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            control_period: 0.2,
            sim_dt: 0.01,
            max_time: 600.0,
            position_tol: 0.1,
            speed_tol: 0.02,
            dwell_radius: 0.25,
            dwell_speed: 0.05,
        }
    }
}

impl SimSettings {
    fn substeps(&self) -> Result<usize, SimError> {
        let bad = |m: String| Err(SimError::InvalidSettings(m));
        for (name, v) in [
            ("control_period", self.control_period),
            ("sim_dt", self.sim_dt),
            ("max_time", self.max_time),
            ("position_tol", self.position_tol),
            ("speed_tol", self.speed_tol),
            ("dwell_radius", self.dwell_radius),
            ("dwell_speed", self.dwell_speed),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        let n = (self.control_period / self.sim_dt).round();
        if (n * self.sim_dt - self.control_period).abs() > 1e-9 * self.control_period {
            return bad("control_period must be an integer multiple of sim_dt".into());
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.substeps().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    Collision,
    PlannerFailed,
    Timeout,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Completed => "completed",
            Termination::Collision => "collision",
            Termination::PlannerFailed => "planner_failed",
            Termination::Timeout => "timeout",
        })
    }
}

/// One control step. The last record of a run carries the terminal state
/// and no plan.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub state: State,
    /// Commanded (pre-mask) thrust, held over the control period.
    pub command: ControlInput,
    /// Realized body force and torque after the fault mask.
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
    pub status: Option<SolveStatus>,
    pub iterations: usize,
    pub kkt: f64,
    pub slack_max: f64,
    /// True free-space margin of `state`.
    pub margin: f64,
    pub corridor_margin: f64,
    /// Flyby progress estimate, `NaN` in linger mode.
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEvent {
    pub step: usize,
    pub t: f64,
    pub constraint: ConstraintId,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub mode: Mode,
    pub control_period: f64,
    pub records: Vec<StepRecord>,
    pub termination: Termination,
    pub violation: Option<ViolationEvent>,
    /// Wall-clock planner times, one per planned step [s]. Kept apart from
    /// the records so the records stay reproducible.
    pub solve_times: Vec<f64>,
}

impl SimLog {
    /// Equality ignoring wall-clock telemetry.
    pub fn same_run(&self, other: &SimLog) -> bool {
        self.mode == other.mode
            && self.control_period == other.control_period
            && self.records == other.records
            && self.termination == other.termination
            && self.violation == other.violation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub completed: bool,
    pub avg_lateral_dev: f64,
    /// Absent unless completed.
    pub total_translational_impulse: Option<f64>,
    pub inspect_time: Option<f64>,
    pub propellant_mass: Option<f64>,
    pub max_corridor_violation: f64,
    /// Commanded impulse up to termination, defined for every run.
    pub requested_impulse: f64,
    pub realized_impulse: f64,
}

pub fn propellant_from_impulse(impulse: f64, isp: f64) -> f64 {
    assert!(impulse >= 0.0 && isp > 0.0, "impulse must be >= 0 and isp > 0");
    impulse / (isp * G0)
}

/// Active linger target: the first point whose dwell has not ended by `t`.
pub fn active_waypoint(points: &[crate::geometry::InspectionPoint], t: f64) -> usize {
    points
        .iter()
        .position(|p| t < p.t.unwrap_or(0.0) + p.linger.unwrap_or(0.0))
        .unwrap_or(points.len() - 1)
}

struct Progress {
    dwell: Vec<f64>,
    visited: Vec<bool>,
    s: f64,
}

impl Progress {
    fn update(&mut self, mission: &Mission, path: &ReferencePath, x: &State, settings: &SimSettings, during: f64) {
        self.s = self.s.max(project_to_path(&x.position, path, self.s).s);
        if mission.params.mode != Mode::Linger {
            return;
        }
        let speed = x.velocity.norm();
        for (i, p) in mission.points.iter().enumerate() {
            let near = (x.position - p.position).norm() <= settings.dwell_radius && speed <= settings.dwell_speed;
            if near && (i == 0 || self.visited[i - 1]) {
                self.visited[i] = true;
                self.dwell[i] += during;
            }
        }
    }

    fn complete(&self, mission: &Mission, path: &ReferencePath, x: &State, settings: &SimSettings) -> bool {
        let last = mission.points.last().expect("validated mission");
        let at_end = (x.position - last.position).norm() <= settings.position_tol && x.velocity.norm() <= settings.speed_tol;
        if !at_end {
            return false;
        }
        match mission.params.mode {
            Mode::Flyby => self.s >= path.length() - 2.0 * settings.position_tol,
            Mode::Linger => mission
                .points
                .iter()
                .enumerate()
                .all(|(i, p)| self.visited[i] && self.dwell[i] + 1e-9 >= p.linger.unwrap_or(0.0)),
        }
    }
}

/// Runs the mission in closed loop with the given tuning and faults.
pub fn run_mission(mission: &Mission, params: &PlannerParams, faults: &FaultSchedule, settings: &SimSettings) -> Result<SimLog, SimError> {
    let substeps = settings.substeps()?;
    let model = &mission.vehicle;
    let n_u = model.num_thrusters();
    faults.validate(n_u)?;
    let fs = mission.free_space();
    let path = mission.path_with(params.interpolation);
    let mut planner = Planner::new(params.clone(), model.clone()).map_err(|e| SimError::InvalidSettings(e.to_string()))?;

    let mut x = mission.initial_state();
    let mut records = Vec::new();
    let mut solve_times = Vec::new();
    let mut progress = Progress {
        dwell: vec![0.0; mission.points.len()],
        visited: vec![false; mission.points.len()],
        s: 0.0,
    };
    progress.update(mission, &path, &x, settings, 0.0);

    let mut k = 0usize;
    let (termination, violation) = loop {
        let t = k as f64 * settings.control_period;
        let (margin, source) = fs.margin_with_source(&x.position);
        let corridor_margin = fs.corridor_margin(&x.position);
        let mut record = StepRecord {
            t,
            state: x,
            command: ControlInput::zeros(n_u),
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
            status: None,
            iterations: 0,
            kkt: 0.0,
            slack_max: 0.0,
            margin,
            corridor_margin,
            progress: if params.mode == Mode::Flyby { progress.s } else { f64::NAN },
        };
        if margin < 0.0 {
            let v = ViolationEvent {
                step: k,
                t,
                constraint: source,
                margin,
            };
            records.push(record);
            break (Termination::Collision, Some(v));
        }
        if progress.complete(mission, &path, &x, settings) {
            records.push(record);
            break (Termination::Completed, None);
        }
        if t >= settings.max_time - 1e-9 {
            records.push(record);
            break (Termination::Timeout, None);
        }

        let mask = faults.mask_at(t, n_u);
        if mission.planner_knows_faults {
            planner.set_mask(mask.clone());
        }
        let targets = match params.mode {
            Mode::Linger => Targets::Linger {
                points: &mission.points,
                active: active_waypoint(&mission.points, t),
                t,
            },
            Mode::Flyby => Targets::Flyby { path: &path, s_hint: progress.s },
        };
        let plan = match planner.plan(&x, targets, &fs) {
            Ok(p) if p.status != SolveStatus::Failed => p,
            Ok(p) => {
                record.status = Some(p.status);
                record.iterations = p.iterations;
                records.push(record);
                break (Termination::PlannerFailed, None);
            }
            Err(_) => {
                records.push(record);
                break (Termination::PlannerFailed, None);
            }
        };
        solve_times.push(plan.solve_time);
        let u = plan.inputs[0].clamped(model);
        let (force, torque) = thruster_wrench(&u, model, &mask).expect("dimensions checked");
        record.command = u.clone();
        record.force = force;
        record.torque = torque;
        record.status = Some(plan.status);
        record.iterations = plan.iterations;
        record.kkt = plan.kkt;
        record.slack_max = plan.slack.max;
        records.push(record);

        let mut next = x;
        for _ in 0..substeps {
            next = match rk4_step(&next, &u, settings.sim_dt, model, &mask) {
                Ok(n) => n,
                Err(_) => State {
                    position: Vector3::from_element(f64::NAN),
                    ..next
                },
            };
        }
        if !next.is_finite() {
            break (Termination::PlannerFailed, None);
        }
        x = next;
        k += 1;
        progress.update(mission, &path, &x, settings, settings.control_period);
    };

    Ok(SimLog {
        mode: params.mode,
        control_period: settings.control_period,
        records,
        termination,
        violation,
        solve_times,
    })
}

/// Runs the mission with its own tuning, faults and settings.
pub fn run(mission: &Mission) -> Result<SimLog, SimError> {
    run_mission(mission, &mission.params, &mission.faults, &mission.sim)
}

/// Runs independent missions, one thread each.
pub fn run_batch(missions: &[Mission]) -> Vec<Result<SimLog, SimError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = missions.iter().map(|m| scope.spawn(move || run(m))).collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    })
}

pub fn compute_metrics(log: &SimLog, path: &ReferencePath, vehicle: &VehicleModel) -> Metrics {
    assert!(!log.records.is_empty(), "empty log");
    let nominal = FaultMask::nominal(vehicle.num_thrusters());
    let mut s = 0.0;
    let mut lateral = 0.0;
    let mut requested = 0.0;
    let mut realized = 0.0;
    let mut worst: f64 = 0.0;
    for r in &log.records {
        let p = project_to_path(&r.state.position, path, s);
        s = p.s;
        lateral += p.lateral;
        let (f, _) = thruster_wrench(&r.command, vehicle, &nominal).expect("log matches vehicle");
        requested += f.norm() * log.control_period;
        realized += r.force.norm() * log.control_period;
        worst = worst.max(-r.corridor_margin);
    }
    let completed = log.termination == Termination::Completed;
    let done = |v: f64| completed.then_some(v);
    Metrics {
        completed,
        avg_lateral_dev: lateral / log.records.len() as f64,
        total_translational_impulse: done(requested),
        inspect_time: done(log.records.last().expect("non-empty").t),
        propellant_mass: done(propellant_from_impulse(requested, vehicle.isp())),
        max_corridor_violation: worst,
        requested_impulse: requested,
        realized_impulse: realized,
    }
}

/// First logged state outside the true free space.
pub fn detect_violation(log: &SimLog, fs: &FreeSpace) -> Option<ViolationEvent> {
    log.records.iter().enumerate().find_map(|(step, r)| {
        let (margin, constraint) = fs.margin_with_source(&r.state.position);
        (margin < 0.0).then_some(ViolationEvent {
            step,
            t: r.t,
            constraint,
            margin,
        })
    })
}

/// Planner timing statistics [s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl SolveStats {
    pub fn from_times(times: &[f64]) -> Option<Self> {
        if times.is_empty() {
            return None;
        }
        let mut v = times.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        // nearest-rank percentile
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            p95: v[rank - 1],
            max: v[n - 1],
        })
    }

    /// Solve rate implied by the median time [Hz].
    pub fn median_rate(&self) -> f64 {
        1.0 / self.median
    }
}
