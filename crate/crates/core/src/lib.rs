//! Inspection autonomy for a thruster-actuated free-flyer: rigid-body
//! dynamics, keep-in/keep-out geometry, a receding-horizon SQP planner with
//! linger and flyby objectives, a closed-loop simulator with thruster faults,
//! and mission file I/O.

pub mod dynamics;
pub mod geometry;
pub mod mission;
pub mod objective;
pub mod ocp;
pub mod planner;
pub mod qp;
pub mod sim;

pub use dynamics::{make_default_vehicle, ControlInput, FaultMask, State, Thruster, VehicleModel};
pub use geometry::{ConstraintId, FreeSpace, InspectionPoint, Interpolation, KeepInCorridor, KeepOutEllipsoid, ReferencePath};
pub use mission::{Mission, MissionError};
pub use objective::{FlybyWeights, LingerWeights};
pub use ocp::{SolveStatus, SqpSettings};
pub use planner::{Mode, PlanResult, Planner, PlannerParams, Targets};
pub use sim::{FaultEvent, FaultSchedule, Metrics, SimLog, SimSettings, Termination};
