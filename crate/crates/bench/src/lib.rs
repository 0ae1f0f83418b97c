//! Shared setup for the planner benchmarks.

use std::path::{Path, PathBuf};

use freeflyer::dynamics::State;
use freeflyer::mission::{parse_mission, Mission};
use freeflyer::sim::run;

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn load_fixture(name: &str) -> Mission {
    parse_mission(fixture_path(name)).expect("shipped fixture parses").0
}

/// Every `stride`-th state visited by a closed-loop run, with its time and
/// planner progress.
pub fn recorded_states(mission: &Mission, stride: usize) -> Vec<(f64, State, f64)> {
    let log = run(mission).expect("fixture runs");
    log.records
        .iter()
        .step_by(stride.max(1))
        .map(|r| (r.t, r.state, r.progress))
        .collect()
}
