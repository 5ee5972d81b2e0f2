//! Closed-loop docking simulation.
//!
//! The plant is integrated with fixed-step RK4 at 100 Hz. The DP controller
//! and thrust allocation run at 10 Hz with commands held between ticks, and
//! a new plan is requested every replan period from the measured state. In
//! `measured` latency mode a plan becomes active at the first controller
//! tick after its own solve time has elapsed; in `zero` mode it is active
//! immediately, which keeps runs bitwise reproducible.

use crate::allocation::{allocate_full, allocate_reversible};
use crate::dp::{control, pose_error, ControllerState, DpGains};
use crate::geometry::{
    extract_convex_region_toward, footprint_vertices, point_in_polygon, ConvexRegion, Footprint,
    GeometryError, HarborMap,
};
use crate::nlp::{SolveOptions, SolveStatus};
use crate::ocp::{plan_with_options, DockingSpec, PlanError, PlannedTrajectory, TrajectorySample};
use crate::vessel::{
    simulation_dynamics, wrap_to_pi, ActuatorCommands, ActuatorState, BodyVelocity, ModelParams,
    ParamError, Pose, ThrusterForces, VesselState,
};
use nalgebra::{Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PLANT_STEP: f64 = 0.01;
pub const CONTROL_PERIOD: f64 = 0.1;
const STEPS_PER_TICK: usize = 10;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse scenario {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    #[default]
    Zero,
    Measured,
}

/// Body-frame wind force: a constant part plus a sinusoidal gust with a
/// seeded phase.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindModel {
    /// Constant surge and sway force in newtons.
    pub force: [f64; 2],
    pub gust_amplitude: f64,
    /// Gust period in seconds.
    pub gust_period: f64,
}

/// Standard deviations of additive Gaussian measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementNoise {
    pub position: f64,
    pub heading: f64,
    pub velocity: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: f64,
    pub intervals: usize,
    pub edge_budget: usize,
    pub replan_period: f64,
    /// Clearance subtracted from every row of the extracted region, meters.
    pub region_margin: f64,
    /// Rank region cuts by how much of the way to the berth they keep.
    pub goal_directed_region: bool,
    pub max_iterations: usize,
}

/// How the commanded force is turned into actuator commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationMode {
    /// Azimuth along the thruster force, forward propeller speed only.
    Forward,
    /// Reverse a propeller instead of slewing its azimuth more than 90 degrees.
    #[default]
    Reversible,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 120.0,
            intervals: 60,
            edge_budget: 8,
            replan_period: 10.0,
            region_margin: 0.25,
            goal_directed_region: true,
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub position_tolerance: f64,
    /// Radians.
    pub heading_tolerance: f64,
    pub max_solve_time: f64,
}

impl Default for Acceptance {
    fn default() -> Self {
        Self {
            position_tolerance: 0.5,
            heading_tolerance: 5.0_f64.to_radians(),
            max_solve_time: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub map: HarborMap,
    pub params: ModelParams,
    pub initial: VesselState,
    pub spec: DockingSpec,
    pub gains: DpGains,
    pub planner: PlannerConfig,
    pub wind: WindModel,
    pub noise: Option<MeasurementNoise>,
    pub duration: f64,
    pub seed: u64,
    pub latency: LatencyMode,
    pub allocation: AllocationMode,
    pub acceptance: Acceptance,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    north: f64,
    east: f64,
    #[serde(default)]
    heading_deg: f64,
}

impl PoseFile {
    fn pose(&self) -> Pose {
        Pose::new(self.north, self.east, self.heading_deg.to_radians())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VelocityFile {
    surge: f64,
    sway: f64,
    yaw_rate_deg: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseFile {
    position: f64,
    heading_deg: f64,
    velocity: f64,
    yaw_rate_deg: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AcceptanceFile {
    position_tolerance: f64,
    heading_tolerance_deg: f64,
    max_solve_time: f64,
}

impl Default for AcceptanceFile {
    fn default() -> Self {
        let a = Acceptance::default();
        Self {
            position_tolerance: a.position_tolerance,
            heading_tolerance_deg: a.heading_tolerance.to_degrees(),
            max_solve_time: a.max_solve_time,
        }
    }
}

/// On-disk scenario. Angles are in degrees; paths are relative to the
/// scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    map: PathBuf,
    #[serde(default)]
    params: Option<PathBuf>,
    initial_pose: PoseFile,
    #[serde(default)]
    initial_velocity: VelocityFile,
    docking_pose: PoseFile,
    duration: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    plan_latency: LatencyMode,
    #[serde(default)]
    allocation: AllocationMode,
    #[serde(default)]
    wind: WindModel,
    #[serde(default)]
    measurement_noise: Option<NoiseFile>,
    #[serde(default)]
    gains: DpGains,
    #[serde(default)]
    planner: PlannerConfig,
    #[serde(default)]
    acceptance: AcceptanceFile,
}

impl Scenario {
    /// Calm-water scenario with default gains, planner and acceptance settings.
    pub fn new(
        name: &str,
        map: HarborMap,
        params: ModelParams,
        initial: VesselState,
        docking_pose: Pose,
    ) -> Self {
        let spec = DockingSpec::new(docking_pose, &params);
        Self {
            name: name.to_string(),
            map,
            params,
            initial,
            spec,
            gains: DpGains::default(),
            planner: PlannerConfig::default(),
            wind: WindModel::default(),
            noise: None,
            duration: 200.0,
            seed: 0,
            latency: LatencyMode::Zero,
            allocation: AllocationMode::default(),
            acceptance: Acceptance::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|source| SimError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let (map, _) = HarborMap::load(dir.join(&file.map))?;
        let params = match &file.params {
            Some(p) => ModelParams::load(dir.join(p))?,
            None => ModelParams::default(),
        };
        let v = file.initial_velocity;
        let initial = VesselState::new(
            file.initial_pose.pose(),
            BodyVelocity::new(v.surge, v.sway, v.yaw_rate_deg.to_radians()),
        );
        let mut scenario = Self::new(&file.name, map, params, initial, file.docking_pose.pose());
        scenario.gains = file.gains;
        scenario.planner = file.planner;
        scenario.wind = file.wind;
        scenario.noise = file.measurement_noise.map(|n| MeasurementNoise {
            position: n.position,
            heading: n.heading_deg.to_radians(),
            velocity: n.velocity,
            yaw_rate: n.yaw_rate_deg.to_radians(),
        });
        scenario.duration = file.duration;
        scenario.seed = file.seed;
        scenario.latency = file.plan_latency;
        scenario.allocation = file.allocation;
        scenario.acceptance = Acceptance {
            position_tolerance: file.acceptance.position_tolerance,
            heading_tolerance: file.acceptance.heading_tolerance_deg.to_radians(),
            max_solve_time: file.acceptance.max_solve_time,
        };
        scenario.apply_planner_config();
        scenario.validate()?;
        Ok(scenario)
    }

    /// Copies horizon and interval count from the planner config into `spec`.
    pub fn apply_planner_config(&mut self) {
        self.spec.horizon = self.planner.horizon;
        self.spec.intervals = self.planner.intervals;
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |msg: String| Err(SimError::ScenarioInvalid(msg));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return invalid(format!("duration must be positive, got {}", self.duration));
        }
        self.params.validate()?;
        self.spec
            .validate()
            .map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
        self.gains.validate().map_err(SimError::ScenarioInvalid)?;
        let p = &self.planner;
        if !(p.replan_period >= CONTROL_PERIOD) {
            return invalid(format!("replan_period must be at least {CONTROL_PERIOD} s"));
        }
        if p.edge_budget < 3 {
            return invalid("edge_budget must be at least 3".into());
        }
        if !(p.region_margin >= 0.0) {
            return invalid("region_margin must be nonnegative".into());
        }
        if self.wind.gust_amplitude != 0.0 && !(self.wind.gust_period > 0.0) {
            return invalid("gust_period must be positive when gusts are enabled".into());
        }
        if let Some(n) = &self.noise {
            if [n.position, n.heading, n.velocity, n.yaw_rate]
                .iter()
                .any(|s| !(*s >= 0.0 && s.is_finite()))
            {
                return invalid("noise standard deviations must be nonnegative".into());
            }
        }
        let x = self.initial.to_vector();
        if !x.iter().all(|v| v.is_finite()) {
            return invalid("initial state must be finite".into());
        }
        if !self
            .map
            .world_bounds
            .contains(&self.initial.pose.position())
        {
            return invalid("initial position is outside the world bounds".into());
        }
        Ok(())
    }
}

struct WindField {
    base: Vector2<f64>,
    gust_direction: Vector2<f64>,
    amplitude: f64,
    omega: f64,
    phase: f64,
}

impl WindField {
    fn new(model: &WindModel, rng: &mut ChaCha8Rng) -> Self {
        let phase = rng.random_range(0.0..2.0 * PI);
        let angle = rng.random_range(-PI..PI);
        let base = Vector2::new(model.force[0], model.force[1]);
        let gust_direction = if base.norm() > 0.0 {
            base.normalize()
        } else {
            Vector2::new(angle.cos(), angle.sin())
        };
        Self {
            base,
            gust_direction,
            amplitude: model.gust_amplitude,
            omega: if model.gust_period > 0.0 {
                2.0 * PI / model.gust_period
            } else {
                0.0
            },
            phase,
        }
    }

    fn force(&self, t: f64) -> Vector3<f64> {
        let f = self.base
            + self.gust_direction * (self.amplitude * (self.omega * t + self.phase).sin());
        Vector3::new(f[0], f[1], 0.0)
    }
}

type PlantState = (Vector6<f64>, [f64; 4]);

fn plant_derivative(
    x: &PlantState,
    commands: &ActuatorCommands,
    params: &ModelParams,
    disturbance: &Vector3<f64>,
) -> PlantState {
    let state = VesselState::from_vector(&x.0);
    let act = ActuatorState {
        azimuth_angles: [x.1[0], x.1[1]],
        propeller_speeds: [x.1[2], x.1[3]],
    };
    let (dx, rates) = simulation_dynamics(&state, &act, commands, params, disturbance);
    (
        dx,
        [
            rates.azimuth_rates[0],
            rates.azimuth_rates[1],
            rates.propeller_accelerations[0],
            rates.propeller_accelerations[1],
        ],
    )
}

fn axpy(x: &PlantState, a: f64, d: &PlantState) -> PlantState {
    (x.0 + d.0 * a, std::array::from_fn(|i| x.1[i] + a * d.1[i]))
}

/// One classical RK4 step of vessel and actuator dynamics.
pub fn rk4_step(
    state: &VesselState,
    actuators: &ActuatorState,
    commands: &ActuatorCommands,
    params: &ModelParams,
    wind: impl Fn(f64) -> Vector3<f64>,
    t: f64,
    dt: f64,
) -> (VesselState, ActuatorState) {
    let x: PlantState = (
        state.to_vector(),
        [
            actuators.azimuth_angles[0],
            actuators.azimuth_angles[1],
            actuators.propeller_speeds[0],
            actuators.propeller_speeds[1],
        ],
    );
    let k1 = plant_derivative(&x, commands, params, &wind(t));
    let k2 = plant_derivative(
        &axpy(&x, 0.5 * dt, &k1),
        commands,
        params,
        &wind(t + 0.5 * dt),
    );
    let k3 = plant_derivative(
        &axpy(&x, 0.5 * dt, &k2),
        commands,
        params,
        &wind(t + 0.5 * dt),
    );
    let k4 = plant_derivative(&axpy(&x, dt, &k3), commands, params, &wind(t + dt));
    let next: PlantState = (
        x.0 + (k1.0 + k2.0 * 2.0 + k3.0 * 2.0 + k4.0) * (dt / 6.0),
        std::array::from_fn(|i| {
            x.1[i] + dt / 6.0 * (k1.1[i] + 2.0 * k2.1[i] + 2.0 * k3.1[i] + k4.1[i])
        }),
    );
    (
        VesselState::from_vector(&next.0),
        ActuatorState {
            azimuth_angles: [wrap_to_pi(next.1[0]), wrap_to_pi(next.1[1])],
            propeller_speeds: [next.1[2], next.1[3]],
        },
    )
}

fn measure(
    truth: &VesselState,
    noise: Option<&MeasurementNoise>,
    rng: &mut ChaCha8Rng,
) -> VesselState {
    let mut m = *truth;
    if let Some(n) = noise {
        let mut draw = |std: f64| {
            if std > 0.0 {
                Normal::new(0.0, std).expect("validated").sample(rng)
            } else {
                0.0
            }
        };
        m.pose.north += draw(n.position);
        m.pose.east += draw(n.position);
        m.pose.heading += draw(n.heading);
        m.velocity.surge += draw(n.velocity);
        m.velocity.sway += draw(n.velocity);
        m.velocity.yaw_rate += draw(n.yaw_rate);
    }
    m.pose.heading = wrap_to_pi(m.pose.heading);
    m
}

/// Region rows pulled inward by `margin`.
fn shrink(region: &ConvexRegion, margin: f64) -> ConvexRegion {
    let mut out = region.clone();
    for o in out.offsets.iter_mut() {
        *o -= margin;
    }
    if margin > 0.0 && !out.is_empty() {
        let rows: Vec<([f64; 2], f64)> = out
            .normals
            .iter()
            .copied()
            .zip(out.offsets.iter().copied())
            .collect();
        if let Ok(r) = ConvexRegion::from_halfplanes(&rows) {
            out.vertices = r.vertices;
        }
    }
    out
}

/// Box from which [`random_start`] draws initial poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartBox {
    pub north: [f64; 2],
    pub east: [f64; 2],
    /// Heading range in radians.
    pub heading: [f64; 2],
}

impl Default for StartBox {
    /// Roughly 40 m south of the default harbor berth.
    fn default() -> Self {
        Self {
            north: [-45.0, -32.0],
            east: [-12.0, 12.0],
            heading: [-0.6, 0.6],
        }
    }
}

/// Draws a start pose at rest whose whole footprint lies inside the first
/// planning region, pulled in by the configured margin. Gives up after 1000
/// draws.
pub fn random_start(
    map: &HarborMap,
    docking_pose: &Pose,
    params: &ModelParams,
    planner: &PlannerConfig,
    bounds: &StartBox,
    rng: &mut impl Rng,
) -> Option<VesselState> {
    let footprint = Footprint::from_params(params);
    let goal = docking_pose.position();
    for _ in 0..1000 {
        let pose = Pose::new(
            rng.random_range(bounds.north[0]..=bounds.north[1]),
            rng.random_range(bounds.east[0]..=bounds.east[1]),
            rng.random_range(bounds.heading[0]..=bounds.heading[1]),
        );
        let target = planner.goal_directed_region.then_some(&goal);
        let Ok(region) =
            extract_convex_region_toward(map, &pose.position(), target, planner.edge_budget)
        else {
            continue;
        };
        let inside = footprint_vertices(&pose, &footprint)
            .iter()
            .all(|c| region.max_violation(c) <= -planner.region_margin);
        if inside {
            return Some(VesselState::at_rest(pose));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub time: f64,
    pub state: VesselState,
    pub measured: VesselState,
    pub reference_pose: Pose,
    pub reference_velocity: BodyVelocity,
    pub reference_acceleration: [f64; 3],
    pub tau: [f64; 3],
    pub integral: [f64; 3],
    pub actuators: ActuatorState,
    pub commands: ActuatorCommands,
    pub forces: ThrusterForces,
    pub saturated: bool,
    /// Index of the plan in effect, if any.
    pub plan: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEvent {
    pub index: usize,
    pub time: f64,
    pub accepted: bool,
    pub status: Option<SolveStatus>,
    pub reason: Option<String>,
    pub iterations: usize,
    pub solve_time: f64,
    pub activation_time: Option<f64>,
    pub max_slack: f64,
    pub max_defect: f64,
    /// Planned position at the start of the plan minus the position
    /// reference it replaces, at activation.
    pub reference_jump: Option<f64>,
    /// Measured position minus the replaced reference, at activation.
    pub tracking_error: Option<f64>,
    pub region_rows: usize,
}

#[derive(Debug, Clone)]
pub struct PlanRecord {
    pub index: usize,
    pub region: ConvexRegion,
    pub trajectory: PlannedTrajectory,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub scenario: String,
    pub docking_pose: Pose,
    pub rows: Vec<LogRow>,
    pub events: Vec<PlanEvent>,
    pub plans: Vec<PlanRecord>,
    pub wall_time: f64,
}

fn hold_sample(pose: Pose, time: f64) -> TrajectorySample {
    TrajectorySample {
        time,
        pose,
        velocity: BodyVelocity::default(),
        acceleration: Vector3::zeros(),
        input: ThrusterForces::default(),
    }
}

struct Pending {
    index: usize,
    activation: f64,
    trajectory: PlannedTrajectory,
}

/// The region the planner gets at `position`: extracted from the map, cut
/// toward the berth when so configured, then pulled in by the region margin.
pub fn planning_region(
    scenario: &Scenario,
    position: &Vector2<f64>,
) -> Result<ConvexRegion, GeometryError> {
    let cfg = &scenario.planner;
    let goal = scenario.spec.docking_pose.position();
    let target = cfg.goal_directed_region.then_some(&goal);
    let region = extract_convex_region_toward(&scenario.map, position, target, cfg.edge_budget)?;
    Ok(shrink(&region, cfg.region_margin))
}

/// Solver options the simulator uses for every plan.
pub fn solve_options(scenario: &Scenario) -> SolveOptions {
    SolveOptions {
        max_iterations: scenario.planner.max_iterations,
        ..SolveOptions::default()
    }
}

/// Runs the closed loop for the scenario duration. Planner failures are
/// logged as rejected plans; the previous plan, or station keeping at the
/// initial pose when there is none, stays in effect.
pub fn run(scenario: &Scenario) -> Result<RunLog, SimError> {
    scenario.validate()?;
    let started = std::time::Instant::now();
    let params = &scenario.params;
    let cfg = &scenario.planner;
    let ticks = (scenario.duration / CONTROL_PERIOD).round() as usize;
    let replan_every = ((cfg.replan_period / CONTROL_PERIOD).round() as usize).max(1);
    let options = solve_options(scenario);

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let wind = WindField::new(&scenario.wind, &mut rng);
    let mut truth = scenario.initial;
    let mut actuators = ActuatorState::default();
    let mut controller = ControllerState::default();
    let mut active: Option<(usize, PlannedTrajectory)> = None;
    let mut pending: Option<Pending> = None;
    let hold = scenario.initial.pose;

    let mut rows = Vec::with_capacity(ticks + 1);
    let mut events: Vec<PlanEvent> = Vec::new();
    let mut plans = Vec::new();

    for k in 0..=ticks {
        let t = k as f64 * CONTROL_PERIOD;
        let measured = measure(&truth, scenario.noise.as_ref(), &mut rng);

        if k % replan_every == 0 && k < ticks {
            let index = events.len();
            let mut event = PlanEvent {
                index,
                time: t,
                accepted: false,
                status: None,
                reason: None,
                iterations: 0,
                solve_time: 0.0,
                activation_time: None,
                max_slack: 0.0,
                max_defect: 0.0,
                reference_jump: None,
                tracking_error: None,
                region_rows: 0,
            };
            match planning_region(scenario, &measured.pose.position()) {
                Err(e) => event.reason = Some(e.to_string()),
                Ok(region) => {
                    event.region_rows = region.len();
                    let warm = pending
                        .as_ref()
                        .map(|p| &p.trajectory)
                        .or(active.as_ref().map(|(_, tr)| tr));
                    let result = plan_with_options(
                        &measured,
                        t,
                        &region,
                        &scenario.spec,
                        params,
                        warm,
                        &options,
                    );
                    match result {
                        Ok(traj) => {
                            let s = &traj.solve_stats;
                            event.accepted = true;
                            event.status = Some(s.status);
                            event.iterations = s.iterations;
                            event.solve_time = s.solve_time;
                            event.max_slack = traj.slack_summary.max();
                            event.max_defect = s.max_defect;
                            let activation = match scenario.latency {
                                LatencyMode::Zero => t,
                                LatencyMode::Measured => {
                                    t + (s.solve_time / CONTROL_PERIOD).ceil() * CONTROL_PERIOD
                                }
                            };
                            event.activation_time = Some(activation);
                            plans.push(PlanRecord {
                                index,
                                region: region.clone(),
                                trajectory: traj.clone(),
                            });
                            pending = Some(Pending {
                                index,
                                activation,
                                trajectory: traj,
                            });
                        }
                        Err(PlanError::SolverNotConverged { best, status, .. }) => {
                            event.status = Some(status);
                            event.iterations = best.solve_stats.iterations;
                            event.solve_time = best.solve_stats.solve_time;
                            event.reason = Some(format!("solver stopped with {status:?}"));
                        }
                        Err(e) => event.reason = Some(e.to_string()),
                    }
                }
            }
            if !event.accepted {
                log::warn!("plan {index} at t = {t:.1} s rejected: {:?}", event.reason);
            }
            events.push(event);
        }

        if pending.as_ref().is_some_and(|p| p.activation <= t + 1e-9) {
            let p = pending.take().expect("checked");
            let old = active
                .as_ref()
                .map_or(hold_sample(hold, t), |(_, tr)| tr.sample_at(t));
            let new = p.trajectory.sample_at(t);
            let event = &mut events[p.index];
            event.reference_jump = Some((new.pose.position() - old.pose.position()).norm());
            event.tracking_error = Some((measured.pose.position() - old.pose.position()).norm());
            if scenario.gains.reset_integral_on_replan {
                controller.reset_integral();
            }
            active = Some((p.index, p.trajectory));
        }

        let reference = active
            .as_ref()
            .map_or(hold_sample(hold, t), |(_, tr)| tr.sample_at(t));
        let (tau, next) = control(
            &measured,
            &reference,
            &controller,
            &scenario.gains,
            params,
            CONTROL_PERIOD,
        );
        let allocation = match scenario.allocation {
            AllocationMode::Forward => allocate_full(&tau, params),
            AllocationMode::Reversible => {
                allocate_reversible(&tau, params, &actuators.azimuth_angles)
            }
        };
        rows.push(LogRow {
            time: t,
            state: truth,
            measured,
            reference_pose: reference.pose,
            reference_velocity: reference.velocity,
            reference_acceleration: reference.acceleration.into(),
            tau: tau.into(),
            integral: controller.integral.into(),
            actuators,
            commands: allocation.commands,
            forces: allocation.forces,
            saturated: allocation.saturated,
            plan: active.as_ref().map(|(i, _)| *i),
        });
        controller = next;

        if k == ticks {
            break;
        }
        for s in 0..STEPS_PER_TICK {
            let ts = t + s as f64 * PLANT_STEP;
            (truth, actuators) = rk4_step(
                &truth,
                &actuators,
                &allocation.commands,
                params,
                |tt| wind.force(tt),
                ts,
                PLANT_STEP,
            );
        }
    }

    Ok(RunLog {
        scenario: scenario.name.clone(),
        docking_pose: scenario.spec.docking_pose,
        rows,
        events,
        plans,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

pub const RUNLOG_COLUMNS: &str = "time,north,east,heading,surge,sway,yaw_rate,\
meas_north,meas_east,meas_heading,meas_surge,meas_sway,meas_yaw_rate,\
ref_north,ref_east,ref_heading,ref_surge,ref_sway,ref_yaw_rate,\
ref_surge_dot,ref_sway_dot,ref_yaw_rate_dot,tau_x,tau_y,tau_n,\
integral_x,integral_y,integral_n,azimuth_1,azimuth_2,speed_1,speed_2,\
azimuth_cmd_1,azimuth_cmd_2,speed_cmd_1,speed_cmd_2,f_x1,f_y1,f_x2,f_y2,saturated,plan";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(400 * (self.rows.len() + 1));
        out.push_str(RUNLOG_COLUMNS);
        out.push('\n');
        for r in &self.rows {
            let s = &r.state;
            let m = &r.measured;
            let values = [
                r.time,
                s.pose.north,
                s.pose.east,
                s.pose.heading,
                s.velocity.surge,
                s.velocity.sway,
                s.velocity.yaw_rate,
                m.pose.north,
                m.pose.east,
                m.pose.heading,
                m.velocity.surge,
                m.velocity.sway,
                m.velocity.yaw_rate,
                r.reference_pose.north,
                r.reference_pose.east,
                r.reference_pose.heading,
                r.reference_velocity.surge,
                r.reference_velocity.sway,
                r.reference_velocity.yaw_rate,
                r.reference_acceleration[0],
                r.reference_acceleration[1],
                r.reference_acceleration[2],
                r.tau[0],
                r.tau[1],
                r.tau[2],
                r.integral[0],
                r.integral[1],
                r.integral[2],
                r.actuators.azimuth_angles[0],
                r.actuators.azimuth_angles[1],
                r.actuators.propeller_speeds[0],
                r.actuators.propeller_speeds[1],
                r.commands.azimuth_commands[0],
                r.commands.azimuth_commands[1],
                r.commands.speed_commands[0],
                r.commands.speed_commands[1],
                r.forces.f_x1,
                r.forces.f_y1,
                r.forces.f_x2,
                r.forces.f_y2,
            ];
            crate::push_csv_fields(&mut out, &values);
            let plan = r.plan.map_or(-1, |p| p as i64);
            let _ = writeln!(out, ",{},{plan}", u8::from(r.saturated));
        }
        out
    }

    pub fn final_row(&self) -> &LogRow {
        self.rows.last().expect("a run logs at least one row")
    }

    /// Final position error (m) and absolute heading error (rad) of the true
    /// state with respect to the docking pose.
    pub fn final_error(&self) -> (f64, f64) {
        let e = pose_error(&self.final_row().state.pose, &self.docking_pose);
        (e.fixed_rows::<2>(0).norm(), e[2].abs())
    }

    pub fn max_abs_integral(&self) -> [f64; 3] {
        let mut m = [0.0f64; 3];
        for r in &self.rows {
            for i in 0..3 {
                m[i] = m[i].max(r.integral[i].abs());
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionViolation {
    pub time: f64,
    pub obstacle: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionReport {
    pub poses_checked: usize,
    pub violations: usize,
    pub first: Option<CollisionViolation>,
}

/// Checks every logged true pose: a pose violates when a footprint corner
/// lies inside an obstacle or an obstacle corner lies inside the footprint.
pub fn check_collision_free(
    log: &RunLog,
    map: &HarborMap,
    footprint: &Footprint,
) -> CollisionReport {
    let mut report = CollisionReport {
        poses_checked: 0,
        violations: 0,
        first: None,
    };
    for row in &log.rows {
        report.poses_checked += 1;
        let corners = footprint_vertices(&row.state.pose, footprint);
        let hit = map.obstacles.iter().find(|o| {
            corners.iter().any(|c| point_in_polygon(c, &o.vertices))
                || o.vertices.iter().any(|v| point_in_polygon(v, &corners))
        });
        if let Some(o) = hit {
            report.violations += 1;
            if report.first.is_none() {
                report.first = Some(CollisionViolation {
                    time: row.time,
                    obstacle: o.name.clone(),
                });
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveTimeStats {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub bin_width: f64,
    /// Counts per `bin_width` bucket starting at zero.
    pub histogram: Vec<usize>,
}

impl SolveTimeStats {
    pub fn from_times(times: &[f64], bin_width: f64) -> Self {
        if times.is_empty() {
            return Self {
                count: 0,
                min: 0.0,
                mean: 0.0,
                max: 0.0,
                bin_width,
                histogram: Vec::new(),
            };
        }
        let max = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut histogram = vec![0; (max / bin_width).floor() as usize + 1];
        for t in times {
            histogram[(t / bin_width).floor() as usize] += 1;
        }
        Self {
            count: times.len(),
            min: times.iter().copied().fold(f64::INFINITY, f64::min),
            mean: times.iter().sum::<f64>() / times.len() as f64,
            max,
            bin_width,
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub final_position_error: f64,
    pub final_heading_error_deg: f64,
    pub collision: CollisionReport,
    pub plans_attempted: usize,
    pub plans_accepted: usize,
    pub solve_time: SolveTimeStats,
    pub max_slack: f64,
    pub max_defect: f64,
    pub max_abs_integral: [f64; 3],
    pub max_reference_jump: f64,
    pub wall_time: f64,
    pub passed: bool,
}

pub fn summarize(log: &RunLog, scenario: &Scenario) -> RunSummary {
    let (pos, heading) = log.final_error();
    let collision = check_collision_free(
        log,
        &scenario.map,
        &Footprint::from_params(&scenario.params),
    );
    let accepted: Vec<&PlanEvent> = log.events.iter().filter(|e| e.accepted).collect();
    let times: Vec<f64> = accepted.iter().map(|e| e.solve_time).collect();
    let solve_time = SolveTimeStats::from_times(&times, 0.1);
    let a = &scenario.acceptance;
    let passed = pos <= a.position_tolerance
        && heading <= a.heading_tolerance
        && collision.violations == 0
        && solve_time.max <= a.max_solve_time;
    RunSummary {
        scenario: log.scenario.clone(),
        final_position_error: pos,
        final_heading_error_deg: heading.to_degrees(),
        collision,
        plans_attempted: log.events.len(),
        plans_accepted: accepted.len(),
        solve_time,
        max_slack: accepted.iter().map(|e| e.max_slack).fold(0.0, f64::max),
        max_defect: accepted.iter().map(|e| e.max_defect).fold(0.0, f64::max),
        max_abs_integral: log.max_abs_integral(),
        max_reference_jump: accepted
            .iter()
            .filter_map(|e| e.reference_jump)
            .fold(0.0, f64::max),
        wall_time: log.wall_time,
        passed,
    }
}

/// Writes `runlog.csv`, `plans/plan_<k>.csv`, `events.json` and
/// `summary.json` into `dir`.
pub fn write_outputs(log: &RunLog, summary: &RunSummary, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir.join("plans"))?;
    std::fs::write(dir.join("runlog.csv"), log.to_csv())?;
    for p in &log.plans {
        std::fs::write(
            dir.join("plans").join(format!("plan_{}.csv", p.index)),
            p.trajectory.to_csv(),
        )?;
    }
    let events = serde_json::to_string_pretty(&log.events).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("events.json"), events)?;
    let summary = serde_json::to_string_pretty(summary).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("summary.json"), summary)
}
