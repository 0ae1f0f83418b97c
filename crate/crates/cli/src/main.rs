use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use freeflyer::mission::{export_run, metrics_text, parse_faults, parse_mission, Mission, MissionError};
use freeflyer::sim::{compute_metrics, run_batch, run_mission, Metrics, SimLog, SolveStats, Termination};

/// Required planner update rate for low-level control [Hz].
const REQUIRED_RATE: f64 = 5.0;

#[derive(Parser)]
#[command(name = "freeflyer", version, about = "Free-flyer inspection planning and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and geometrically validate a mission file
    Validate { mission: PathBuf },
    /// Simulate a mission in closed loop
    Run {
        mission: PathBuf,
        /// Fault schedule overriding the mission's own
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Directory for trajectory.csv, metrics.txt and summary.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run two missions and print their metrics side by side
    Compare { mission_a: PathBuf, mission_b: PathBuf },
    /// Report planner solve-time statistics over a closed-loop run
    Bench { mission: PathBuf },
}

/// A failure with its exit code and machine-readable kind.
struct Failure {
    code: u8,
    kind: &'static str,
    detail: String,
}

impl From<MissionError> for Failure {
    fn from(e: MissionError) -> Self {
        let code = match e {
            MissionError::Io { .. } => 1,
            _ => 2,
        };
        Failure {
            code,
            kind: e.kind(),
            detail: e.to_string(),
        }
    }
}

fn load(path: &PathBuf) -> Result<Mission, Failure> {
    let (mission, warnings) = parse_mission(path)?;
    for w in warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(mission)
}

fn simulate(mission: &Mission) -> Result<SimLog, Failure> {
    run_mission(mission, &mission.params, &mission.faults, &mission.sim).map_err(|e| Failure {
        code: 2,
        kind: "schema",
        detail: e.to_string(),
    })
}

fn termination_failure(log: &SimLog) -> Option<Failure> {
    let t = log.records.last().map_or(0.0, |r| r.t);
    match log.termination {
        Termination::Completed => None,
        Termination::Collision => {
            let detail = match &log.violation {
                Some(v) => format!(
                    "run terminated by collision with {} at t = {} s (step {}, margin {:.4} m)",
                    v.constraint, v.t, v.step, v.margin
                ),
                None => format!("run terminated by collision at t = {t} s"),
            };
            Some(Failure {
                code: 3,
                kind: "collision",
                detail,
            })
        }
        Termination::PlannerFailed => Some(Failure {
            code: 3,
            kind: "planner_failed",
            detail: format!("planner failed at t = {t} s"),
        }),
        Termination::Timeout => Some(Failure {
            code: 4,
            kind: "timeout",
            detail: format!("mission not completed within {t} s"),
        }),
    }
}

fn cmd_run(mission: PathBuf, faults: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut m = load(&mission)?;
    if let Some(f) = faults {
        m.faults = parse_faults(&f, m.vehicle.num_thrusters())?;
    }
    let log = simulate(&m)?;
    let metrics = compute_metrics(&log, &m.path(), &m.vehicle);
    print!("{}", metrics_text(&log, &metrics));
    if let Some(dir) = out {
        export_run(&m.name, &log, &metrics, &dir)?;
    }
    termination_failure(&log).map_or(Ok(()), Err)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("---".to_string(), |v| format!("{v:.digits$}"))
}

fn comparison_table(names: [&str; 2], metrics: [&Metrics; 2], logs: [&SimLog; 2]) -> String {
    let rows: [(&str, [String; 2]); 6] = [
        ("Average Lateral Dev. [m]", metrics.map(|m| format!("{:.4}", m.avg_lateral_dev))),
        ("Total Translational Impulse [N s]", metrics.map(|m| fmt_opt(m.total_translational_impulse, 2))),
        ("Inspect Time [s]", metrics.map(|m| fmt_opt(m.inspect_time, 1))),
        ("Propellant [kg]", metrics.map(|m| fmt_opt(m.propellant_mass, 4))),
        ("Max Corridor Violation [m]", metrics.map(|m| format!("{:.4}", m.max_corridor_violation))),
        ("Termination", logs.map(|l| l.termination.to_string())),
    ];
    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let w = [0, 1].map(|i| rows.iter().map(|r| r.1[i].len()).chain([names[i].len()]).max().unwrap_or(0));
    let mut out = format!("{:<w0$}  {:>a$}  {:>b$}\n", "", names[0], names[1], a = w[0], b = w[1]);
    for (label, v) in &rows {
        out += &format!("{label:<w0$}  {:>a$}  {:>b$}\n", v[0], v[1], a = w[0], b = w[1]);
    }
    out
}

fn cmd_compare(a: PathBuf, b: PathBuf) -> Result<(), Failure> {
    let missions = [load(&a)?, load(&b)?];
    let logs = run_batch(&missions)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure {
            code: 2,
            kind: "schema",
            detail: e.to_string(),
        })?;
    let metrics: Vec<Metrics> = missions
        .iter()
        .zip(&logs)
        .map(|(m, l)| compute_metrics(l, &m.path(), &m.vehicle))
        .collect();
    let name = |m: &Mission, p: &PathBuf| {
        if m.name.is_empty() {
            p.display().to_string()
        } else {
            m.name.clone()
        }
    };
    print!(
        "{}",
        comparison_table(
            [&name(&missions[0], &a), &name(&missions[1], &b)],
            [&metrics[0], &metrics[1]],
            [&logs[0], &logs[1]]
        )
    );
    Ok(())
}

fn cmd_bench(mission: PathBuf) -> Result<(), Failure> {
    let m = load(&mission)?;
    let log = simulate(&m)?;
    let Some(stats) = SolveStats::from_times(&log.solve_times) else {
        return Err(Failure {
            code: 3,
            kind: "no_samples",
            detail: "the run finished before the first planner call".into(),
        });
    };
    let rate = stats.median_rate();
    println!("termination = {}", log.termination);
    println!("solves = {}", stats.count);
    println!("mean_ms = {:.3}", stats.mean * 1e3);
    println!("median_ms = {:.3}", stats.median * 1e3);
    println!("p95_ms = {:.3}", stats.p95 * 1e3);
    println!("max_ms = {:.3}", stats.max * 1e3);
    println!("median_rate_hz = {rate:.1}");
    println!(
        "requirement_{REQUIRED_RATE}hz = {}",
        if rate >= REQUIRED_RATE { "met" } else { "not met" }
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Validate { mission } => load(&mission).map(|m| {
            println!(
                "ok: {} ({} inspection points, {} keep-outs, {} mode)",
                mission.display(),
                m.points.len(),
                m.keepouts.len(),
                m.mode()
            );
        }),
        Command::Run { mission, faults, out } => cmd_run(mission, faults, out),
        Command::Compare { mission_a, mission_b } => cmd_compare(mission_a, mission_b),
        Command::Bench { mission } => cmd_bench(mission),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, f.detail.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
