//! Acceptance checks shared by the property suites and the acceptance runner.
//! Each returns a verdict with a one-line detail instead of panicking.

use std::path::{Path, PathBuf};
use std::time::Instant;

use freeflyer::dynamics::{make_default_vehicle, quat_to_rotmat, rk4_step, ControlInput, FaultMask, State, VehicleModel};
use freeflyer::geometry::{build_path, project_to_path, free_space_margin, FreeSpace, InspectionPoint, Interpolation, KeepInCorridor, KeepOutEllipsoid};
use freeflyer::mission::{export_run, parse_mission, Mission};
use freeflyer::objective::{
    flyby_stage_cost, flyby_stage_gradient, linger_stage_cost, linger_stage_gradient, linger_terminal_cost,
    linger_terminal_gradient, AugmentedState, FlybyWeights, LingerWeights,
};
use freeflyer::ocp::{sqp_solve, NlpInstance, SolveStatus, SqpSettings};
use freeflyer::sim::{
    compute_metrics, detect_violation, propellant_from_impulse, run, run_mission, FaultEvent, FaultSchedule, Metrics,
    SimLog, SolveStats, Termination,
};
use nalgebra::{DVector, Matrix3, Quaternion, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{trajectory_distance, DoubleIntegrator};

#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(id: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("[{}] criterion {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.detail)
    }

    /// Panics with the detail when the verdict failed.
    pub fn require(&self) {
        assert!(self.passed, "{}", self.line());
    }
}

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn fixture(name: &str) -> Mission {
    parse_mission(fixture_path(name)).expect("shipped fixture parses").0
}

// ---------------------------------------------------------------- 1

pub fn propellant_anchor() -> Verdict {
    let m = propellant_from_impulse(40.0, 40.0);
    let rel = (m - 0.1).abs() / 0.1;
    Verdict::new("1", rel <= 0.05, format!("40 N s at Isp 40 s -> {m:.5} kg ({:.1}% from 100 g)", rel * 100.0))
}

// ---------------------------------------------------------------- 2

pub struct MissionRun {
    pub mission: Mission,
    pub log: SimLog,
    pub metrics: Metrics,
    pub wall: f64,
}

pub fn run_fixture(name: &str) -> MissionRun {
    let mission = fixture(name);
    let t0 = Instant::now();
    let log = run(&mission).expect("fixture runs");
    let wall = t0.elapsed().as_secs_f64();
    let metrics = compute_metrics(&log, &mission.path(), &mission.vehicle);
    MissionRun {
        mission,
        log,
        metrics,
        wall,
    }
}

pub struct Gateway {
    pub flyby: MissionRun,
    pub linger: MissionRun,
    pub one_fail: MissionRun,
    pub four_fail: MissionRun,
}

impl Gateway {
    pub fn run() -> Self {
        Self {
            flyby: run_fixture("gateway_flyby.json"),
            linger: run_fixture("gateway_linger.json"),
            one_fail: run_fixture("gateway_1fail.json"),
            four_fail: run_fixture("gateway_4fail.json"),
        }
    }

    pub fn wall(&self) -> f64 {
        self.flyby.wall + self.linger.wall + self.one_fail.wall + self.four_fail.wall
    }
}

fn min_margin(log: &SimLog) -> f64 {
    log.records.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min)
}

pub fn flyby_nominal(g: &Gateway) -> Verdict {
    let r = &g.flyby;
    let length = r.mission.path().length();
    let violation = detect_violation(&r.log, &r.mission.free_space());
    let lat = r.metrics.avg_lateral_dev;
    let passed = r.metrics.completed && lat <= 0.1 && violation.is_none() && min_margin(&r.log) >= 0.0;
    Verdict::new(
        "2a",
        passed,
        format!(
            "flyby over {length:.2} m path: {}, lateral {lat:.4} m, min margin {:.3} m, violation {:?}",
            r.log.termination,
            min_margin(&r.log),
            violation.map(|v| v.constraint.to_string())
        ),
    )
}

pub fn linger_costs_more(g: &Gateway) -> Verdict {
    let (f, l) = (&g.flyby.metrics, &g.linger.metrics);
    let passed = match (f.total_translational_impulse, l.total_translational_impulse, f.inspect_time, l.inspect_time) {
        (Some(fi), Some(li), Some(ft), Some(lt)) => li > fi && lt > ft,
        _ => false,
    };
    Verdict::new(
        "2b",
        passed,
        format!(
            "impulse linger {:?} vs flyby {:?} N s, time linger {:?} vs flyby {:?} s",
            l.total_translational_impulse, f.total_translational_impulse, l.inspect_time, f.inspect_time
        ),
    )
}

pub fn single_failure(g: &Gateway) -> Verdict {
    let nominal = g.flyby.metrics.avg_lateral_dev;
    let m = &g.one_fail.metrics;
    let ratio = m.avg_lateral_dev / nominal;
    let passed = m.completed && m.avg_lateral_dev > nominal && ratio <= 5.0;
    Verdict::new(
        "2c",
        passed,
        format!(
            "one thruster failed: {}, lateral {:.4} m vs nominal {nominal:.4} m (ratio {ratio:.1}, required (1, 5])",
            g.one_fail.log.termination, m.avg_lateral_dev
        ),
    )
}

pub fn four_failures(g: &Gateway) -> Verdict {
    let r = &g.four_fail;
    let violation = detect_violation(&r.log, &r.mission.free_space());
    let passed = !r.metrics.completed && violation.is_some() && r.log.termination == Termination::Collision;
    Verdict::new(
        "2d",
        passed,
        format!(
            "four thrusters failed: {}, violation {}",
            r.log.termination,
            violation.map_or("none".to_string(), |v| format!("{} at t = {} s", v.constraint, v.t))
        ),
    )
}

pub fn gateway_runtime(g: &Gateway) -> Verdict {
    let wall = g.wall();
    Verdict::new("2-runtime", wall <= 120.0, format!("four closed-loop runs took {wall:.1} s (limit 120 s)"))
}

// ---------------------------------------------------------------- 3

pub fn solver_correctness() -> Verdict {
    let x0 = DVector::from_vec(vec![1.0, -0.5, 0.2, 0.1]);
    let mut di = DoubleIntegrator::new(2, 12, 0.5);
    di.u_max = 0.15;
    di.v_max = Some(0.25);
    let nlp = NlpInstance::new(&di, x0.clone(), 1e3, &di.zero_guess());
    let sol = sqp_solve(&nlp, &di.zero_guess(), &SqpSettings::default());
    let dist = trajectory_distance(&sol.trajectory, &di.dense_oracle(&x0));
    let dense = nlp.dense_kkt(&sol.trajectory, &sol.slacks, &sol.multipliers);
    let kkt_gap = (dense.total() - sol.kkt.total())
        .abs()
        .max((dense.stationarity - sol.kkt.stationarity).abs())
        .max((dense.feasibility - sol.kkt.feasibility).abs())
        .max((dense.complementarity - sol.kkt.complementarity).abs());
    let passed = sol.status == SolveStatus::Converged && dist <= 1e-6 && kkt_gap <= 1e-10;
    Verdict::new(
        "3",
        passed,
        format!("{:?}, distance to dense oracle {dist:.1e}, KKT recomputation gap {kkt_gap:.1e}", sol.status),
    )
}

// ---------------------------------------------------------------- 4

pub fn real_time(g: &Gateway) -> Verdict {
    let times: Vec<f64> = g.flyby.log.solve_times.iter().chain(&g.linger.log.solve_times).copied().collect();
    let Some(stats) = SolveStats::from_times(&times) else {
        return Verdict::new("4", false, "no planner calls recorded");
    };
    let horizon = g.flyby.mission.params.horizon;
    Verdict::new(
        "4",
        horizon == 20 && stats.median <= 0.05,
        format!(
            "N = {horizon}, {} solves, median {:.2} ms ({:.0} Hz), p95 {:.2} ms",
            stats.count,
            stats.median * 1e3,
            stats.median_rate(),
            stats.p95 * 1e3
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Default thruster layout on an asymmetric, non-principal body.
pub fn tumbling_vehicle() -> VehicleModel {
    let base = make_default_vehicle();
    let j = Matrix3::new(0.30, 0.02, -0.01, 0.02, 0.24, 0.015, -0.01, 0.015, 0.18);
    VehicleModel::new(base.mass(), j, base.thrusters().to_vec(), base.body_radius(), base.isp()).unwrap()
}

pub fn tumbling_state() -> State {
    State {
        position: Vector3::new(0.5, -0.2, 0.1),
        attitude: Quaternion::new(0.9, 0.1, -0.3, 0.2).normalize(),
        velocity: Vector3::new(0.01, 0.02, -0.01),
        angular_rate: Vector3::new(0.4, -0.6, 0.5),
    }
}

fn inertial_momentum(x: &State, j: &Matrix3<f64>) -> Vector3<f64> {
    quat_to_rotmat(&x.attitude).unwrap() * (j * x.angular_rate)
}

pub struct Conservation {
    pub momentum_drift: f64,
    pub energy_drift: f64,
    pub norm_error: f64,
}

pub fn torque_free_conservation(steps: usize, dt: f64) -> Conservation {
    let model = tumbling_vehicle();
    let mask = FaultMask::nominal(12);
    let u = ControlInput::zeros(12);
    let j = *model.inertia();
    let mut x = tumbling_state();
    let h0 = inertial_momentum(&x, &j);
    let e = |x: &State| 0.5 * x.angular_rate.dot(&(j * x.angular_rate));
    let e0 = e(&x);
    let mut out = Conservation {
        momentum_drift: 0.0,
        energy_drift: 0.0,
        norm_error: 0.0,
    };
    for _ in 0..steps {
        x = rk4_step(&x, &u, dt, &model, &mask).unwrap();
        out.momentum_drift = out.momentum_drift.max((inertial_momentum(&x, &j) - h0).norm() / h0.norm());
        out.energy_drift = out.energy_drift.max((e(&x) - e0).abs() / e0);
        out.norm_error = out.norm_error.max((x.attitude.norm() - 1.0).abs());
    }
    out
}

fn state_distance(a: &State, b: &State) -> f64 {
    let dq = (a.attitude.coords - b.attitude.coords).norm().min((a.attitude.coords + b.attitude.coords).norm());
    ((a.position - b.position).norm_squared()
        + dq * dq
        + (a.velocity - b.velocity).norm_squared()
        + (a.angular_rate - b.angular_rate).norm_squared())
    .sqrt()
}

fn integrate(x0: &State, u: &ControlInput, t: f64, steps: usize, model: &VehicleModel) -> State {
    let mask = FaultMask::nominal(model.num_thrusters());
    let dt = t / steps as f64;
    (0..steps).fold(*x0, |x, _| rk4_step(&x, u, dt, model, &mask).unwrap())
}

/// Observed orders from successive halvings of the step, coarse to fine.
pub fn rk4_orders() -> Vec<f64> {
    let model = tumbling_vehicle();
    let mut u = ControlInput::zeros(12);
    // net force plus torque about all axes
    for (i, v) in [(0, 0.2), (5, 0.15), (8, 0.1), (11, 0.05)] {
        u.0[i] = v;
    }
    let x0 = tumbling_state();
    let t = 4.0;
    let reference = integrate(&x0, &u, t, 2560, &model);
    let errors: Vec<f64> = [10, 20, 40, 80]
        .iter()
        .map(|&n| state_distance(&integrate(&x0, &u, t, n, &model), &reference))
        .collect();
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}

pub fn dynamics_suite() -> Verdict {
    let c = torque_free_conservation(10_000, 0.01);
    let orders = rk4_orders();
    let order = orders.iter().copied().fold(f64::INFINITY, f64::min);
    let passed = c.momentum_drift <= 1e-4 && c.energy_drift <= 1e-4 && c.norm_error <= 1e-9 && order >= 3.9;
    Verdict::new(
        "5",
        passed,
        format!(
            "1e4 steps: |dH|/|H| {:.1e}, |dE|/E {:.1e}, | |q|-1 | {:.1e}; RK4 order {order:.3}",
            c.momentum_drift, c.energy_drift, c.norm_error
        ),
    )
}

// ---------------------------------------------------------------- 6

fn random_unit_quat(rng: &mut impl Rng) -> Quaternion<f64> {
    Quaternion::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        .normalize()
}

fn random_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.gen_range(-scale..scale))
}

fn random_state(rng: &mut impl Rng) -> State {
    State {
        position: random_vec(rng, 2.0),
        attitude: random_unit_quat(rng),
        velocity: random_vec(rng, 0.3),
        angular_rate: random_vec(rng, 0.3),
    }
}

fn random_input(rng: &mut impl Rng) -> ControlInput {
    ControlInput(DVector::from_fn(12, |_, _| rng.gen_range(0.0..0.2)))
}

/// Central difference of `f` along each coordinate of `x`.
fn fd_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * (1.0 + x[i].abs());
            y[i] = x[i] + h;
            let fp = f(&y);
            y[i] = x[i] - h;
            let fm = f(&y);
            y[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `|g - g_fd| / max(|g_fd|, 1e-3)`, the floor keeping near-zero gradients from
/// dominating on round-off.
fn relative_error(analytic: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(1e-3)
}

/// Worst relative error over `n` random linger points, stage and terminal.
pub fn linger_gradient_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LingerWeights::default_for(12);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let x = random_state(&mut rng);
        let x_ref = random_state(&mut rng);
        let u = random_input(&mut rng);
        let mut z: Vec<f64> = x.to_vector().iter().copied().collect();
        z.extend(u.0.iter());
        let fd = fd_gradient(&z, |z| {
            linger_stage_cost(&State::from_slice(&z[..13]), &ControlInput(DVector::from_column_slice(&z[13..])), &x_ref, &w)
        });
        let g = linger_stage_gradient(&x, &u, &x_ref, &w);
        let mut ga: Vec<f64> = g.x.iter().copied().collect();
        ga.extend(g.u.iter());
        worst = worst.max(relative_error(&ga, &fd));

        let fd = fd_gradient(&z[..13], |z| linger_terminal_cost(&State::from_slice(z), &x_ref, &w));
        let ga: Vec<f64> = linger_terminal_gradient(&x, &x_ref, &w).iter().copied().collect();
        worst = worst.max(relative_error(&ga, &fd));
    }
    worst
}

pub fn gateway_points() -> Vec<InspectionPoint> {
    fixture("gateway_flyby.json").points
}

/// Worst relative error over `n` random flyby points on both interpolations.
pub fn flyby_gradient_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = FlybyWeights::default_for(12);
    let dt = 0.2;
    let points = gateway_points();
    let paths = [
        build_path(&points, Interpolation::Linear).unwrap(),
        build_path(&points, Interpolation::Cubic).unwrap(),
    ];
    let mut worst: f64 = 0.0;
    let mut evaluated = 0;
    while evaluated < n {
        let path = &paths[evaluated % 2];
        let s = rng.gen_range(0.05..path.length() - 0.05);
        let near_knot = path.knots().iter().any(|k| (k - s).abs() < 1e-3);
        if near_knot {
            continue;
        }
        let mut x = random_state(&mut rng);
        x.position = path.position(s) + random_vec(&mut rng, 0.5);
        let xa = AugmentedState {
            state: x,
            s,
            v_s: rng.gen_range(0.0..0.25),
        };
        let u = random_input(&mut rng);
        let mut z: Vec<f64> = x.to_vector().iter().copied().collect();
        z.push(xa.s);
        z.extend(u.0.iter());
        z.push(xa.v_s);
        let cost = |z: &[f64]| {
            let xa = AugmentedState {
                state: State::from_slice(&z[..13]),
                s: z[13],
                v_s: z[26],
            };
            flyby_stage_cost(&xa, &ControlInput(DVector::from_column_slice(&z[14..26])), path, &w, dt)
        };
        let fd = fd_gradient(&z, cost);
        let g = flyby_stage_gradient(&xa, &u, path, &w, dt);
        let mut ga: Vec<f64> = g.x.iter().copied().collect();
        ga.push(g.s);
        ga.extend(g.u.iter());
        ga.push(g.v_s);
        worst = worst.max(relative_error(&ga, &fd));
        evaluated += 1;
    }
    worst
}

pub fn gradient_suite() -> Verdict {
    let linger = linger_gradient_error(100, 11);
    let flyby = flyby_gradient_error(100, 12);
    Verdict::new(
        "6",
        linger <= 1e-5 && flyby <= 1e-5,
        format!("worst relative FD error over 100 points: linger {linger:.1e}, flyby {flyby:.1e}"),
    )
}

// ---------------------------------------------------------------- 7

/// A tapered, bent corridor with a rotated keep-out straddling it.
pub fn tapered_scene() -> (Vec<InspectionPoint>, FreeSpace, Matrix3<f64>) {
    let q = Quaternion::identity();
    let points = vec![
        InspectionPoint::new(Vector3::new(0.0, 0.0, 0.0), q, 1.2),
        InspectionPoint::new(Vector3::new(6.0, 0.0, 0.0), q, 0.8),
        InspectionPoint::new(Vector3::new(9.0, 4.0, 1.0), q, 1.0),
        InspectionPoint::new(Vector3::new(9.0, 9.0, 0.0), q, 0.9),
    ];
    let rot = *Rotation3::from_euler_angles(0.3, -0.2, 0.7).matrix();
    let keepouts = vec![
        KeepOutEllipsoid::from_semi_axes("panel", Vector3::new(3.0, 1.4, 0.0), Vector3::new(1.5, 0.6, 0.4), rot).unwrap(),
        KeepOutEllipsoid::from_semi_axes("tank", Vector3::new(10.2, 6.5, 0.5), Vector3::new(0.8, 0.8, 0.8), Matrix3::identity()).unwrap(),
    ];
    let corridor = KeepInCorridor::from_points(&points).unwrap();
    (points, FreeSpace::unchecked(corridor, keepouts, 0.3).unwrap(), rot)
}

/// Membership of the encasing sphere in free space, decided without the
/// library's margin code. `None` when the point sits within `band` of a
/// boundary and the sampled oracle cannot decide.
fn membership_oracle(p: &Vector3<f64>, points: &[InspectionPoint], keepouts: &[(Vector3<f64>, Vector3<f64>, Matrix3<f64>)], body: f64, band: f64) -> Option<bool> {
    // keep-in: some sampled capsule cross-section contains the sphere
    let mut best = f64::NEG_INFINITY;
    for w in points.windows(2) {
        let (a, b) = (w[0].position, w[1].position);
        for i in 0..=4000 {
            let l = i as f64 / 4000.0;
            let r = (1.0 - l) * w[0].corridor_radius + l * w[1].corridor_radius;
            best = best.max(r - body - (p - (a + (b - a) * l)).norm());
        }
    }
    // sampling underestimates the margin by at most the chord error
    if best.abs() < band {
        return None;
    }
    let inside_corridor = best > 0.0;
    let mut outside_keepouts = true;
    for (c, axes, rot) in keepouts {
        let d = rot.transpose() * (p - c);
        let level: f64 = (0..3).map(|i| (d[i] / (axes[i] + body)).powi(2)).sum();
        if (level - 1.0).abs() < band {
            return None;
        }
        if level <= 1.0 {
            outside_keepouts = false;
        }
    }
    Some(inside_corridor && outside_keepouts)
}

/// `(agreements, disagreements, undecided)` over `n` points sampled in the
/// scene's bounding box.
pub fn membership_agreement(n: usize, seed: u64) -> (usize, usize, usize) {
    let (points, fs, rot) = tapered_scene();
    let keepouts = vec![
        (Vector3::new(3.0, 1.4, 0.0), Vector3::new(1.5, 0.6, 0.4), rot),
        (Vector3::new(10.2, 6.5, 0.5), Vector3::new(0.8, 0.8, 0.8), Matrix3::identity()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut agree, mut disagree, mut undecided) = (0, 0, 0);
    for _ in 0..n {
        let p = Vector3::new(rng.gen_range(-1.5..11.0), rng.gen_range(-1.5..10.5), rng.gen_range(-1.5..2.5));
        match membership_oracle(&p, &points, &keepouts, fs.body_radius(), 1e-3) {
            None => undecided += 1,
            Some(inside) if inside == (free_space_margin(&p, &fs) > 0.0) => agree += 1,
            Some(_) => disagree += 1,
        }
    }
    (agree, disagree, undecided)
}

/// Largest `|corridor margin - (r_i - body)|` over the waypoints of both scenes.
pub fn waypoint_margin_error() -> f64 {
    let gateway = fixture("gateway_flyby.json");
    let scenes = [(gateway.points.clone(), gateway.free_space()), {
        let (p, fs, _) = tapered_scene();
        (p, fs)
    }];
    let mut worst: f64 = 0.0;
    for (points, fs) in &scenes {
        for p in points {
            worst = worst.max((fs.corridor_margin(&p.position) - (p.corridor_radius - fs.body_radius())).abs());
        }
    }
    worst
}

/// Worst amount by which a sampled path point beats the projection.
pub fn projection_dominance(n: usize, seed: u64) -> f64 {
    let points = gateway_points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = f64::NEG_INFINITY;
    for interp in [Interpolation::Linear, Interpolation::Cubic] {
        let path = build_path(&points, interp).unwrap();
        let samples: Vec<(f64, Vector3<f64>)> = (0..=4000)
            .map(|i| {
                let s = path.length() * i as f64 / 4000.0;
                (s, path.position(s))
            })
            .collect();
        for _ in 0..n / 2 {
            let s0 = rng.gen_range(0.0..path.length());
            let p = path.position(s0) + random_vec(&mut rng, 0.8);
            let (s_best, d_best) = samples
                .iter()
                .map(|(s, q)| (*s, (p - q).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let proj = project_to_path(&p, &path, s_best);
            worst = worst.max(proj.lateral - d_best);
            // the reported point is on the path and at the reported distance
            worst = worst.max(((p - proj.point).norm() - proj.lateral).abs());
        }
    }
    worst
}

pub fn geometry_suite() -> Verdict {
    let (agree, disagree, undecided) = membership_agreement(10_000, 21);
    let wp = waypoint_margin_error();
    let dom = projection_dominance(1000, 22);
    let passed = disagree == 0 && undecided < 100 && wp == 0.0 && dom <= 1e-9;
    Verdict::new(
        "7",
        passed,
        format!(
            "membership {agree} agree / {disagree} disagree / {undecided} within 1 mm of a boundary; waypoint margin error {wp:e}; projection excess {dom:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 8

pub fn all_ones_schedule(n_u: usize) -> FaultSchedule {
    FaultSchedule::new(
        (0..n_u)
            .map(|i| FaultEvent {
                time: 0.0,
                thruster: i,
                scale: 1.0,
            })
            .collect(),
        n_u,
    )
    .unwrap()
}

/// Exports two independent runs and compares every file byte for byte.
pub fn export_is_byte_stable(mission: &Mission) -> Result<usize, String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut files = Vec::new();
    for dir in &dirs {
        let log = run(mission).map_err(|e| e.to_string())?;
        let metrics = compute_metrics(&log, &mission.path(), &mission.vehicle);
        files.push(export_run(&mission.name, &log, &metrics, dir.path()).map_err(|e| e.to_string())?);
    }
    for (a, b) in files[0].iter().zip(&files[1]) {
        if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
            return Err(format!("{} differs", a.file_name().unwrap().to_string_lossy()));
        }
    }
    Ok(files[0].len())
}

pub fn determinism() -> Verdict {
    let mission = fixture("straight_corridor.json");
    let stable = export_is_byte_stable(&mission);
    let nominal = run(&mission).unwrap();
    let ones = run_mission(&mission, &mission.params, &all_ones_schedule(12), &mission.sim).unwrap();
    let same = nominal.same_run(&ones);
    Verdict::new(
        "8",
        stable.is_ok() && same,
        format!(
            "repeated export: {}; all-ones fault schedule bit-identical to nominal: {same}",
            match &stable {
                Ok(n) => format!("{n} files identical"),
                Err(e) => e.clone(),
            }
        ),
    )
}
