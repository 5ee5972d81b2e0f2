//! Autonomous docking for a twin azimuth thruster surface vessel.
//!
//! The stack has three layers:
//!
//! * [`ocp`] plans collision-free docking trajectories by direct collocation,
//!   solved with the SQP method in [`nlp`], inside a convex free-space region
//!   extracted from the harbor map by [`geometry`];
//! * [`dp`] tracks the planned pose, velocity and acceleration with PID
//!   feedback and model-based feed-forward, and [`allocation`] turns the
//!   commanded force into azimuth angles and propeller speeds;
//! * [`sim`] closes the loop on the plant model from [`vessel`] with a 10 Hz
//!   controller and a 0.1 Hz replanner.

// Small fixed-size numeric loops read better indexed; the negated float
// comparisons are deliberate so that NaN fails validation.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod dp;
pub mod geometry;
pub mod nlp;
pub mod ocp;
pub mod sim;
pub mod vessel;

pub use allocation::{allocate, allocate_full, allocate_reversible, Allocation};
pub use dp::{control, ControllerState, DpGains};
pub use geometry::{
    extract_convex_region, extract_convex_region_toward, ConvexRegion, Footprint, HarborMap,
};
pub use nlp::{NlpProblem, SolveOptions, SolveStatus};
pub use ocp::{
    plan, plan_with_options, DockingSpec, PlanError, PlannedTrajectory, TrajectorySample,
};
pub use sim::{check_collision_free, run, summarize, RunLog, RunSummary, Scenario};
pub use vessel::{
    ActuatorCommands, ActuatorState, BodyVelocity, ModelParams, Pose, ThrusterForces, VesselState,
};

/// Appends `values` as comma-separated fields in shortest round-trip form,
/// so tiny values print with an exponent instead of dozens of zeros.
pub(crate) fn push_csv_fields(out: &mut String, values: &[f64]) {
    let mut buf = ryu::Buffer::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(buf.format(*v));
    }
}
