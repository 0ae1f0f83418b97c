//! Receding-horizon inspection planner: transcribes the tracking problem for
//! the current targets and solves it with the shooting SQP.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{quat_to_rotmat, rk4_step_jacobian, ControlInput, FaultMask, State, StateVector, VehicleModel, STATE_DIM};
use crate::geometry::{project_to_path, slerp_with_rate, FreeSpace, InspectionPoint, Interpolation, ReferencePath};
use crate::objective::{flyby_stage_model, linger_stage_model, FlybyWeights, LingerWeights, QuadraticModel};
use crate::ocp::{sqp_solve, ConstraintEval, ConstraintTag, KktResidual, NlpInstance, ShootingProblem, SolveStatus, SqpSettings, SqpSolution, Step, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid planner parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Linger,
    #[default]
    Flyby,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Linger => "linger",
            Mode::Flyby => "flyby",
        })
    }
}

/// Planner tuning parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerParams {
    pub mode: Mode,
    pub horizon: usize,
    pub dt: f64,
    pub linger: LingerWeights,
    pub flyby: FlybyWeights,
    /// Body-frame velocity box [m/s].
    pub v_max: f64,
    /// Angular rate box [rad/s].
    pub w_max: f64,
    pub sqp: SqpSettings,
    /// Soft free-space constraints with a larger margin are left out of the QP.
    pub screen_margin: f64,
    /// Linger terminal ball radius [m].
    pub terminal_radius: f64,
    /// Linger terminal velocity box [m/s].
    pub terminal_speed: f64,
    /// Upper bound on the flyby progress rate [m/s].
    pub progress_rate_max: f64,
    /// Braking horizon of the flyby end-of-path constraint [s].
    pub approach_time: f64,
    /// Progress rate still allowed at the end of the path [m/s].
    pub approach_speed: f64,
    pub interpolation: Interpolation,
}

impl PlannerParams {
    pub fn default_for(n_u: usize) -> Self {
        Self {
            mode: Mode::Flyby,
            horizon: 20,
            dt: 0.2,
            linger: LingerWeights::default_for(n_u),
            flyby: FlybyWeights::default_for(n_u),
            v_max: 0.4,
            w_max: 0.3,
            sqp: SqpSettings::default(),
            screen_margin: 0.5,
            terminal_radius: 0.25,
            terminal_speed: 0.05,
            progress_rate_max: 0.25,
            approach_time: 8.0,
            approach_speed: 0.03,
            interpolation: Interpolation::Linear,
        }
    }

    pub fn validate(&self, n_u: usize) -> Result<(), PlannerError> {
        let bad = |m: String| Err(PlannerError::InvalidParams(m));
        if self.horizon < 2 {
            return bad(format!("horizon must be at least 2, got {}", self.horizon));
        }
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("w_max", self.w_max),
            ("rho", self.sqp.rho),
            ("kkt_tol", self.sqp.kkt_tol),
            ("terminal_radius", self.terminal_radius),
            ("terminal_speed", self.terminal_speed),
            ("progress_rate_max", self.progress_rate_max),
            ("approach_time", self.approach_time),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.approach_speed >= 0.0 && self.screen_margin >= 0.0) {
            return bad("approach_speed and screen_margin must be nonnegative".into());
        }
        if !(self.sqp.ls_beta > 0.0 && self.sqp.ls_beta < 1.0) {
            return bad(format!("ls_beta must lie in (0, 1), got {}", self.sqp.ls_beta));
        }
        self.linger.validate().map_err(|e| PlannerError::InvalidParams(e.to_string()))?;
        self.flyby.validate().map_err(|e| PlannerError::InvalidParams(e.to_string()))?;
        if self.linger.r.nrows() != n_u || self.flyby.r.nrows() != n_u {
            return bad(format!("input weights must be {n_u} x {n_u}"));
        }
        Ok(())
    }
}

/// Time-parameterized linger reference: hold each point for its dwell time,
/// then move to the next one on a cosine velocity profile.
pub fn linger_reference(points: &[InspectionPoint], t: f64) -> Result<State, PlannerError> {
    if points.is_empty() {
        return Err(PlannerError::InvalidArgument("empty target window".into()));
    }
    let timing = |i: usize| -> Result<(f64, f64), PlannerError> {
        match (points[i].t, points[i].linger) {
            (Some(a), l) => Ok((a, l.unwrap_or(0.0))),
            _ => Err(PlannerError::InvalidArgument(format!("inspection point {i} has no arrival time"))),
        }
    };
    let hold = |i: usize| State::at_rest(points[i].position, points[i].orientation);
    for i in 0..points.len() {
        let (arrive, dwell) = timing(i)?;
        let depart = arrive + dwell;
        if t <= depart || i + 1 == points.len() {
            return Ok(hold(i));
        }
        let (next_arrive, _) = timing(i + 1)?;
        if t < next_arrive {
            let span = next_arrive - depart;
            let sigma = (t - depart) / span;
            let pi = std::f64::consts::PI;
            let lambda = 0.5 * (1.0 - (pi * sigma).cos());
            let rate = 0.5 * pi / span * (pi * sigma).sin();
            let delta = points[i + 1].position - points[i].position;
            let (q, dq) = slerp_with_rate(&points[i].orientation, &points[i + 1].orientation, lambda);
            let rot = quat_to_rotmat(&q).map_err(|e| PlannerError::InvalidArgument(e.to_string()))?;
            return Ok(State {
                position: points[i].position + delta * lambda,
                attitude: q,
                velocity: rot.transpose() * (delta * rate),
                angular_rate: (q.conjugate() * dq).imag() * (2.0 * rate),
            });
        }
    }
    Ok(hold(points.len() - 1))
}

/// What the planner tracks at one call.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Timed inspection points; `active` is the next point whose dwell is
    /// not yet complete and `t` the current mission time.
    Linger {
        points: &'a [InspectionPoint],
        active: usize,
        t: f64,
    },
    /// The full reference path with the progress hint `s_hint`.
    Flyby { path: &'a ReferencePath, s_hint: f64 },
}

enum Kind<'a> {
    Linger {
        refs: Vec<State>,
        terminal: Option<Vector3<f64>>,
    },
    Flyby {
        path: &'a ReferencePath,
    },
}

/// The transcribed inspection problem for one planner call.
pub struct InspectionProblem<'a> {
    model: &'a VehicleModel,
    mask: &'a FaultMask,
    fs: &'a FreeSpace,
    params: &'a PlannerParams,
    kind: Kind<'a>,
    max_thrust: DVector<f64>,
    /// Measured initial state, augmented with progress in flyby mode.
    pub x0: DVector<f64>,
}

const POS: usize = 0;
const VEL: usize = 7;
const RATE: usize = 10;
const PROGRESS: usize = STATE_DIM;

/// Builds the shooting problem for the current targets.
pub fn transcribe<'a>(
    x0: &State,
    targets: Targets<'a>,
    fs: &'a FreeSpace,
    model: &'a VehicleModel,
    mask: &'a FaultMask,
    params: &'a PlannerParams,
) -> Result<InspectionProblem<'a>, PlannerError> {
    if !x0.is_finite() {
        return Err(PlannerError::InvalidArgument("initial state is not finite".into()));
    }
    params.validate(model.num_thrusters())?;
    let xv = x0.normalized().to_vector();
    let n = params.horizon;
    let (kind, x0v) = match targets {
        Targets::Linger { points, active, t } => {
            if points.is_empty() || active >= points.len() {
                return Err(PlannerError::InvalidArgument("empty target window".into()));
            }
            let refs = (0..=n)
                .map(|k| linger_reference(points, t + k as f64 * params.dt))
                .collect::<Result<Vec<_>, _>>()?;
            let t_end = t + n as f64 * params.dt;
            let p = &points[active];
            let arrive = p.t.unwrap_or(0.0);
            let depart = arrive + p.linger.unwrap_or(0.0).max(params.dt);
            let terminal = (t_end >= arrive && t_end <= depart).then_some(p.position);
            (Kind::Linger { refs, terminal }, DVector::from_column_slice(xv.as_slice()))
        }
        Targets::Flyby { path, s_hint } => {
            let proj = project_to_path(&x0.position, path, s_hint);
            let s0 = proj.s.max(s_hint).clamp(0.0, path.length());
            let mut v = DVector::zeros(STATE_DIM + 1);
            v.rows_mut(0, STATE_DIM).copy_from(&xv);
            v[PROGRESS] = s0;
            (Kind::Flyby { path }, v)
        }
    };
    Ok(InspectionProblem {
        model,
        mask,
        fs,
        params,
        kind,
        max_thrust: model.max_thrust(),
        x0: x0v,
    })
}

fn state_of(x: &DVector<f64>) -> State {
    State::from_slice(&x.as_slice()[..STATE_DIM])
}

impl InspectionProblem<'_> {
    pub fn is_flyby(&self) -> bool {
        matches!(self.kind, Kind::Flyby { .. })
    }

    fn box_constraints(&self, x: &DVector<f64>, offset: usize, limit: f64, screen: f64, tag: ConstraintTag, out: &mut Vec<ConstraintEval>) {
        let nx = self.nx();
        for i in 0..3 {
            for sign in [1.0, -1.0] {
                let mut g = DVector::zeros(nx);
                g[offset + i] = -sign;
                out.push(ConstraintEval {
                    screen,
                    ..ConstraintEval::hard(limit - sign * x[offset + i], Some(g), None, tag)
                });
            }
        }
    }

    /// Cold-start guess: hold the initial state with zero input.
    pub fn cold_guess(&self) -> Trajectory {
        Trajectory {
            xs: vec![self.x0.clone(); self.horizon() + 1],
            us: vec![DVector::zeros(self.nu()); self.horizon()],
        }
    }
}

impl ShootingProblem for InspectionProblem<'_> {
    fn nx(&self) -> usize {
        STATE_DIM + usize::from(self.is_flyby())
    }

    fn nu(&self) -> usize {
        self.model.num_thrusters() + usize::from(self.is_flyby())
    }

    fn horizon(&self) -> usize {
        self.params.horizon
    }

    fn step(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>, jacobian: bool) -> Step {
        let m = self.model.num_thrusters();
        let xs = StateVector::from_column_slice(&x.as_slice()[..STATE_DIM]);
        let (next, jac) = rk4_step_jacobian(&xs, &u.as_slice()[..m], self.params.dt, self.model, self.mask, jacobian);
        if !self.is_flyby() {
            return Step {
                next: DVector::from_column_slice(next.as_slice()),
                jacobians: jac.map(|(a, b)| {
                    (
                        DMatrix::from_column_slice(STATE_DIM, STATE_DIM, a.as_slice()),
                        DMatrix::from_column_slice(STATE_DIM, m, b.as_slice()),
                    )
                }),
            };
        }
        let dt = self.params.dt;
        let mut out = DVector::zeros(STATE_DIM + 1);
        out.rows_mut(0, STATE_DIM).copy_from(&next);
        out[PROGRESS] = x[PROGRESS] + u[m] * dt;
        let jacobians = jac.map(|(a, b)| {
            let mut aa = DMatrix::zeros(STATE_DIM + 1, STATE_DIM + 1);
            aa.view_mut((0, 0), (STATE_DIM, STATE_DIM)).copy_from(&a);
            aa[(PROGRESS, PROGRESS)] = 1.0;
            let mut bb = DMatrix::zeros(STATE_DIM + 1, m + 1);
            bb.view_mut((0, 0), (STATE_DIM, m)).copy_from(&b);
            bb[(PROGRESS, m)] = dt;
            (aa, bb)
        });
        Step { next: out, jacobians }
    }

    fn stage_model(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> QuadraticModel {
        let m = self.model.num_thrusters();
        match &self.kind {
            Kind::Linger { refs, .. } => linger_stage_model(&state_of(x), u, &refs[k], &self.params.linger.q, Some(&self.params.linger.r)),
            Kind::Flyby { path } => {
                let uu = u.rows(0, m).into_owned();
                flyby_stage_model(&state_of(x), x[PROGRESS], Some((&uu, u[m])), path, &self.params.flyby, self.params.dt).0
            }
        }
    }

    fn terminal_model(&self, x: &DVector<f64>) -> QuadraticModel {
        match &self.kind {
            Kind::Linger { refs, .. } => linger_stage_model(&state_of(x), &DVector::zeros(0), &refs[self.horizon()], &self.params.linger.q_n, None),
            Kind::Flyby { path } => flyby_stage_model(&state_of(x), x[PROGRESS], None, path, &self.params.flyby, self.params.dt).0,
        }
    }

    fn input_bounds(&self, _k: usize) -> (DVector<f64>, DVector<f64>) {
        let m = self.model.num_thrusters();
        if self.is_flyby() {
            let mut ub = DVector::zeros(m + 1);
            ub.rows_mut(0, m).copy_from(&self.max_thrust);
            ub[m] = self.params.progress_rate_max;
            (DVector::zeros(m + 1), ub)
        } else {
            (DVector::zeros(m), self.max_thrust.clone())
        }
    }

    fn constraints(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>) -> Vec<ConstraintEval> {
        let p = self.params;
        let nx = self.nx();
        let mut out = Vec::with_capacity(20);
        self.box_constraints(x, VEL, p.v_max, 0.5 * p.v_max, ConstraintTag::Velocity, &mut out);
        self.box_constraints(x, RATE, p.w_max, 0.5 * p.w_max, ConstraintTag::AngularRate, &mut out);

        let pos = Vector3::new(x[POS], x[POS + 1], x[POS + 2]);
        let soft = |value: f64, grad: Vector3<f64>, tag| {
            let mut g = DVector::zeros(nx);
            g.rows_mut(POS, 3).copy_from(&grad);
            ConstraintEval {
                value,
                grad_x: Some(g),
                grad_u: None,
                soft: true,
                screen: p.screen_margin,
                tag,
            }
        };
        let (cm, _, cg) = self.fs.corridor().margin_with_gradient(&pos, self.fs.body_radius());
        out.push(soft(cm, cg, ConstraintTag::Corridor));
        if let Some((km, _, kg)) = self.fs.nearest_keepout(&pos) {
            out.push(soft(km, kg, ConstraintTag::KeepOut));
        }

        match &self.kind {
            Kind::Linger { terminal, .. } => {
                if let (Some(c), true) = (terminal, k == self.horizon()) {
                    let d = pos - c;
                    let mut g = DVector::zeros(nx);
                    g.rows_mut(POS, 3).copy_from(&(-d * 2.0));
                    out.push(ConstraintEval::hard(
                        p.terminal_radius * p.terminal_radius - d.norm_squared(),
                        Some(g),
                        None,
                        ConstraintTag::TerminalBall,
                    ));
                    let before = out.len();
                    self.box_constraints(x, VEL, p.terminal_speed, f64::INFINITY, ConstraintTag::TerminalVelocity, &mut out);
                    debug_assert_eq!(out.len(), before + 6);
                }
            }
            Kind::Flyby { path } => {
                let length = path.length();
                let mut gs = DVector::zeros(nx);
                gs[PROGRESS] = -1.0;
                out.push(ConstraintEval::hard(length - x[PROGRESS], Some(gs.clone()), None, ConstraintTag::Progress));
                if let Some(u) = u {
                    let m = self.model.num_thrusters();
                    let mut gu = DVector::zeros(m + 1);
                    gu[m] = -p.approach_time;
                    let value = length + p.approach_time * p.approach_speed - x[PROGRESS] - p.approach_time * u[m];
                    out.push(ConstraintEval::hard(value, Some(gs), Some(gu), ConstraintTag::Approach));
                }
            }
        }
        out
    }
}

/// Slack usage of the soft free-space constraints.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlackSummary {
    pub max: f64,
    pub total: f64,
    /// Number of strictly positive slacks.
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Planned inputs `u_0 .. u_{N-1}`, always inside the thrust box.
    pub inputs: Vec<ControlInput>,
    /// Predicted states `x_1 .. x_N`.
    pub states: Vec<State>,
    /// Flyby progress `s_0 .. s_N`; empty in linger mode.
    pub progress: Vec<f64>,
    /// Flyby progress rate `v_s,0 .. v_s,N-1`; empty in linger mode.
    pub progress_rate: Vec<f64>,
    pub status: SolveStatus,
    pub kkt: f64,
    pub kkt_detail: KktResidual,
    pub iterations: usize,
    /// Wall-clock solve time [s]; the only nondeterministic field.
    pub solve_time: f64,
    pub slack: SlackSummary,
    pub solution: SqpSolution,
}

impl PlanResult {
    /// Copy with the wall-clock time cleared, for determinism checks.
    pub fn without_timing(&self) -> Self {
        Self {
            solve_time: 0.0,
            ..self.clone()
        }
    }

    /// Sum of the commanded net force magnitude over the plan times `dt`.
    pub fn planned_impulse(&self, model: &VehicleModel, dt: f64) -> f64 {
        self.inputs
            .iter()
            .map(|u| (model.wrench_map().rows(0, 3) * &u.0).norm() * dt)
            .sum()
    }
}

/// Shifts a trajectory by `steps` stages, repeating the last state and input.
pub fn shift_trajectory(traj: &Trajectory, steps: usize) -> Trajectory {
    let n = traj.us.len();
    let xs = (0..=n).map(|k| traj.xs[(k + steps).min(n)].clone()).collect();
    let us = (0..n).map(|k| traj.us[(k + steps).min(n - 1)].clone()).collect();
    Trajectory { xs, us }
}

/// Warm start for the next control period. The first state is re-pinned by
/// the solver to the new measurement.
pub fn shift_warm_start(prev: &PlanResult, params: &PlannerParams) -> Trajectory {
    let _ = params;
    shift_trajectory(&prev.solution.trajectory, 1)
}

fn finish(problem: &InspectionProblem, sol: SqpSolution, started: Instant) -> PlanResult {
    let m = problem.model.num_thrusters();
    let flyby = problem.is_flyby();
    let inputs = sol
        .trajectory
        .us
        .iter()
        .map(|u| ControlInput(u.rows(0, m).into_owned()).clamped(problem.model))
        .collect();
    let states = sol.trajectory.xs[1..].iter().map(state_of).collect();
    let (progress, progress_rate) = if flyby {
        (
            sol.trajectory.xs.iter().map(|x| x[PROGRESS]).collect(),
            sol.trajectory.us.iter().map(|u| u[m]).collect(),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let slack = SlackSummary {
        max: sol.max_slack(),
        total: sol.slacks.iter().sum(),
        active: sol.slacks.iter().filter(|s| **s > 0.0).count(),
    };
    PlanResult {
        inputs,
        states,
        progress,
        progress_rate,
        status: sol.status,
        kkt: sol.kkt.total(),
        kkt_detail: sol.kkt,
        iterations: sol.iterations,
        solve_time: started.elapsed().as_secs_f64(),
        slack,
        solution: sol,
    }
}

/// Solves one planning problem from the given guess (cold if `None`).
pub fn plan_with_guess(
    x0: &State,
    targets: Targets,
    fs: &FreeSpace,
    model: &VehicleModel,
    mask: &FaultMask,
    params: &PlannerParams,
    guess: Option<&Trajectory>,
) -> Result<PlanResult, PlannerError> {
    let started = Instant::now();
    let problem = transcribe(x0, targets, fs, model, mask, params)?;
    let cold = problem.cold_guess();
    let guess = match guess {
        Some(g) if g.xs.len() == params.horizon + 1 && g.xs[0].len() == problem.nx() && g.us[0].len() == problem.nu() => g,
        _ => &cold,
    };
    let nlp = NlpInstance::new(&problem, problem.x0.clone(), params.sqp.rho, guess);
    let sol = sqp_solve(&nlp, guess, &params.sqp);
    Ok(finish(&problem, sol, started))
}

/// Cold-start plan with the nominal vehicle model.
pub fn plan(targets: Targets, fs: &FreeSpace, x0: &State, model: &VehicleModel, params: &PlannerParams) -> Result<PlanResult, PlannerError> {
    let mask = FaultMask::nominal(model.num_thrusters());
    plan_with_guess(x0, targets, fs, model, &mask, params, None)
}

/// Stateful receding-horizon planner with warm starting and monotone progress.
#[derive(Debug, Clone)]
pub struct Planner {
    params: PlannerParams,
    model: VehicleModel,
    mask: FaultMask,
    warm: Option<Trajectory>,
    s_prev: f64,
}

impl Planner {
    /// Planner using the nominal model.
    pub fn new(params: PlannerParams, model: VehicleModel) -> Result<Self, PlannerError> {
        params.validate(model.num_thrusters())?;
        let mask = FaultMask::nominal(model.num_thrusters());
        Ok(Self {
            params,
            model,
            mask,
            warm: None,
            s_prev: 0.0,
        })
    }

    /// Replaces the planner's internal actuator model, for ablations.
    pub fn with_mask(mut self, mask: FaultMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn set_mask(&mut self, mask: FaultMask) {
        self.mask = mask;
    }

    pub fn params(&self) -> &PlannerParams {
        &self.params
    }

    pub fn progress(&self) -> f64 {
        self.s_prev
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.s_prev = 0.0;
    }

    fn targets<'a>(&self, targets: Targets<'a>) -> Targets<'a> {
        match targets {
            Targets::Flyby { path, s_hint } => Targets::Flyby {
                path,
                s_hint: s_hint.max(self.s_prev),
            },
            t => t,
        }
    }

    pub fn plan(&mut self, x0: &State, targets: Targets, fs: &FreeSpace) -> Result<PlanResult, PlannerError> {
        let targets = self.targets(targets);
        let res = plan_with_guess(x0, targets, fs, &self.model, &self.mask, &self.params, self.warm.as_ref())?;
        if let Some(s0) = res.progress.first() {
            self.s_prev = *s0;
        }
        self.warm = (res.status != SolveStatus::Failed).then(|| shift_warm_start(&res, &self.params));
        Ok(res)
    }

    /// Plans without touching the warm start, for paired comparisons.
    pub fn plan_cold(&self, x0: &State, targets: Targets, fs: &FreeSpace) -> Result<PlanResult, PlannerError> {
        plan_with_guess(x0, self.targets(targets), fs, &self.model, &self.mask, &self.params, None)
    }
}
