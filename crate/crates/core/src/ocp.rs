//! Docking trajectory planning.
//!
//! The optimal control problem
//!
//! ```text
//! min  int_0^T F(x(t), u(t)) + k_s' s(t) dt
//! s.t. x_dot = f(x, u),  h(x, u) <= s,  s >= 0,  x(0) = x_measured
//! ```
//!
//! is transcribed by direct collocation: on each of `N` intervals the state
//! is a cubic through the interval start and three Legendre-Gauss points,
//! and the thruster forces are constant. Collision and velocity rows are
//! imposed at interval boundaries, thruster norm rows per interval, each
//! softened by its own slack variable.

use crate::geometry::ConvexRegion;
use crate::nlp::{self, IterationRecord, NlpError, NlpProblem, SolveOptions, SolveStatus};
use crate::vessel::{
    planning_dynamics_jacobian, planning_dynamics_vec, planning_dynamics_weighted_hessian,
    BodyVelocity, ModelParams, Pose, ThrusterForces, VesselState,
};
use nalgebra::{DMatrix, Matrix2, Vector2, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Interval start followed by the degree-3 Legendre-Gauss points on `[0, 1]`.
pub const COLLOCATION_POINTS: [f64; 4] =
    [0.0, 0.112_701_665_379_258_3, 0.5, 0.887_298_334_620_741_7];
/// Gauss quadrature weights of the three collocation points.
pub const QUADRATURE_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

/// Lagrange basis on [`COLLOCATION_POINTS`] evaluated at `tau`.
pub fn lagrange_basis(tau: f64) -> [f64; 4] {
    let t = COLLOCATION_POINTS;
    let mut out = [1.0; 4];
    for k in 0..4 {
        for m in 0..4 {
            if m != k {
                out[k] *= (tau - t[m]) / (t[k] - t[m]);
            }
        }
    }
    out
}

/// Derivatives of the Lagrange basis at `tau`.
pub fn lagrange_basis_derivative(tau: f64) -> [f64; 4] {
    let t = COLLOCATION_POINTS;
    let mut out = [0.0; 4];
    for k in 0..4 {
        for m in 0..4 {
            if m == k {
                continue;
            }
            let mut term = 1.0 / (t[k] - t[m]);
            for q in 0..4 {
                if q != k && q != m {
                    term *= (tau - t[q]) / (t[k] - t[q]);
                }
            }
            out[k] += term;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackWeights {
    pub collision: f64,
    pub velocity: f64,
    pub thrust: f64,
}

impl Default for SlackWeights {
    fn default() -> Self {
        Self {
            collision: 1.0e3,
            velocity: 1.0e3,
            thrust: 1.0e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DockingSpec {
    pub docking_pose: Pose,
    /// Planning horizon in seconds.
    pub horizon: f64,
    pub intervals: usize,
    /// Magnitude limits on surge and sway (m/s) and yaw rate (rad/s).
    pub velocity_bounds: [f64; 3],
    /// Per-thruster force norm limit in newtons.
    pub f_max: f64,
    pub slack_weights: SlackWeights,
    /// Pseudo-Huber transition length in meters.
    pub huber_delta: f64,
    pub heading_weight: f64,
    pub sway_weight: f64,
    pub yaw_rate_weight: f64,
    /// Spacing of the reported trajectory samples in seconds.
    pub sample_period: f64,
}

impl Default for DockingSpec {
    fn default() -> Self {
        Self {
            docking_pose: Pose::default(),
            horizon: 120.0,
            intervals: 60,
            velocity_bounds: [1.0, 1.0, 5.0_f64.to_radians()],
            f_max: 500.0,
            slack_weights: SlackWeights::default(),
            huber_delta: 10.0,
            heading_weight: 20.0,
            sway_weight: 10.0,
            yaw_rate_weight: 10.0,
            sample_period: 0.1,
        }
    }
}

impl DockingSpec {
    pub fn new(docking_pose: Pose, params: &ModelParams) -> Self {
        Self {
            docking_pose,
            f_max: params.f_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let positive = [
            ("horizon", self.horizon),
            ("f_max", self.f_max),
            ("huber_delta", self.huber_delta),
            ("heading_weight", self.heading_weight),
            ("sway_weight", self.sway_weight),
            ("yaw_rate_weight", self.yaw_rate_weight),
            ("sample_period", self.sample_period),
            ("slack_weights.collision", self.slack_weights.collision),
            ("slack_weights.velocity", self.slack_weights.velocity),
            ("slack_weights.thrust", self.slack_weights.thrust),
            ("velocity_bounds[0]", self.velocity_bounds[0]),
            ("velocity_bounds[1]", self.velocity_bounds[1]),
            ("velocity_bounds[2]", self.velocity_bounds[2]),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(PlanError::InvalidSpec(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.intervals == 0 {
            return Err(PlanError::InvalidSpec(
                "intervals must be at least 1".into(),
            ));
        }
        let pose = self.docking_pose;
        if !(pose.north.is_finite() && pose.east.is_finite() && pose.heading.is_finite()) {
            return Err(PlanError::InvalidSpec("docking pose must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("permissible region is empty or malformed")]
    InvalidRegion,
    #[error("invalid docking spec: {0}")]
    InvalidSpec(String),
    #[error("solver failed: {0}")]
    Solver(#[from] NlpError),
    #[error("solver stopped with {status:?}, constraint violation {violation:.3e}")]
    SolverNotConverged {
        best: Box<PlannedTrajectory>,
        violation: f64,
        status: SolveStatus,
    },
}

/// `delta^2 (sqrt(1 + a'a / delta^2) - 1)`.
pub fn pseudo_huber(a: &Vector2<f64>, delta: f64) -> f64 {
    let q = a.norm_squared() / (delta * delta);
    // q / (sqrt(1 + q) + 1) avoids cancellation near zero
    delta * delta * q / ((1.0 + q).sqrt() + 1.0)
}

fn state_cost(x: &Vector6<f64>, spec: &DockingSpec) -> f64 {
    let d = &spec.docking_pose;
    let a = Vector2::new(x[0] - d.north, x[1] - d.east);
    pseudo_huber(&a, spec.huber_delta)
        + spec.heading_weight * (1.0 - (x[2] - d.heading).cos())
        + spec.sway_weight * x[4] * x[4]
        + spec.yaw_rate_weight * x[5] * x[5]
}

fn state_cost_gradient(x: &Vector6<f64>, spec: &DockingSpec) -> Vector6<f64> {
    let d = &spec.docking_pose;
    let a = Vector2::new(x[0] - d.north, x[1] - d.east);
    let s = (1.0 + a.norm_squared() / (spec.huber_delta * spec.huber_delta)).sqrt();
    Vector6::new(
        a[0] / s,
        a[1] / s,
        spec.heading_weight * (x[2] - d.heading).sin(),
        0.0,
        2.0 * spec.sway_weight * x[4],
        2.0 * spec.yaw_rate_weight * x[5],
    )
}

fn state_cost_hessian(x: &Vector6<f64>, spec: &DockingSpec) -> Matrix2<f64> {
    let d = &spec.docking_pose;
    let a = Vector2::new(x[0] - d.north, x[1] - d.east);
    let d2 = spec.huber_delta * spec.huber_delta;
    let s = (1.0 + a.norm_squared() / d2).sqrt();
    Matrix2::identity() / s - a * a.transpose() / (d2 * s * s * s)
}

/// Running cost `F(x, u)` of the docking problem.
pub fn cost_to_go(
    state: &VesselState,
    input: &ThrusterForces,
    spec: &DockingSpec,
    params: &ModelParams,
) -> f64 {
    let u = input.to_vector();
    state_cost(&state.to_vector(), spec) + u.norm_squared() / (params.m11 * params.m11)
}

/// Collocation matrices: `C[j][k] = l_k'(tau_{j+1})`, `D[k] = l_k(1)`.
#[derive(Debug, Clone)]
struct Collocation {
    c: [[f64; 4]; 3],
    d: [f64; 4],
}

impl Collocation {
    fn new() -> Self {
        let mut c = [[0.0; 4]; 3];
        for (j, row) in c.iter_mut().enumerate() {
            *row = lagrange_basis_derivative(COLLOCATION_POINTS[j + 1]);
        }
        Self {
            c,
            d: lagrange_basis(1.0),
        }
    }
}

const INTERVAL_STRIDE: usize = 28;

/// The transcribed docking problem.
///
/// Variable layout per interval `i`: boundary state, three collocation
/// states, then the four thruster forces; the final boundary state follows
/// the last interval, then all slack variables in inequality-row order.
#[derive(Debug, Clone)]
pub struct DockingOcp {
    spec: DockingSpec,
    params: ModelParams,
    measured: Vector6<f64>,
    normals: Vec<Vector2<f64>>,
    offsets: Vec<f64>,
    footprint: Vec<Vector2<f64>>,
    intervals: usize,
    h: f64,
    colloc: Collocation,
}

/// Builds the NLP for one replanning instant.
pub fn build_ocp(
    measured_state: &VesselState,
    region: &ConvexRegion,
    spec: &DockingSpec,
    params: &ModelParams,
) -> Result<DockingOcp, PlanError> {
    spec.validate()?;
    if region.normals.len() != region.offsets.len() {
        return Err(PlanError::InvalidRegion);
    }
    if !region.is_empty() {
        let rows: Vec<([f64; 2], f64)> = region
            .normals
            .iter()
            .copied()
            .zip(region.offsets.iter().copied())
            .collect();
        ConvexRegion::from_halfplanes(&rows).map_err(|_| PlanError::InvalidRegion)?;
    }
    let x = measured_state.to_vector();
    if !x.iter().all(|v| v.is_finite()) {
        return Err(PlanError::InvalidSpec(
            "measured state must be finite".into(),
        ));
    }
    let normals = (0..region.len())
        .map(|k| region.normal(k).normalize())
        .collect();
    let offsets = (0..region.len())
        .map(|k| region.offsets[k] / region.normal(k).norm())
        .collect();
    Ok(DockingOcp {
        spec: spec.clone(),
        params: *params,
        measured: x,
        normals,
        offsets,
        footprint: params.footprint_vertices(),
        intervals: spec.intervals,
        h: spec.horizon / spec.intervals as f64,
        colloc: Collocation::new(),
    })
}

/// Rows of the inequality block, in slack order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IneqRow {
    Collision {
        node: usize,
        vertex: usize,
        row: usize,
    },
    Velocity {
        node: usize,
        component: usize,
        upper: bool,
    },
    Thrust {
        interval: usize,
        thruster: usize,
    },
}

impl DockingOcp {
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn interval_length(&self) -> f64 {
        self.h
    }

    /// Index of state `k` (0 = boundary, 1..=3 collocation) of interval `i`;
    /// `state_index(N, 0)` is the final boundary state.
    pub fn state_index(&self, i: usize, k: usize) -> usize {
        INTERVAL_STRIDE * i + 6 * k
    }

    pub fn input_index(&self, i: usize) -> usize {
        INTERVAL_STRIDE * i + 24
    }

    fn node_index(&self, node: usize) -> usize {
        self.state_index(node, 0)
    }

    pub fn num_state_variables(&self) -> usize {
        6 * (4 * self.intervals + 1)
    }

    pub fn num_input_variables(&self) -> usize {
        4 * self.intervals
    }

    /// Collocation and continuity rows, excluding the initial condition.
    pub fn num_defect_rows(&self) -> usize {
        24 * self.intervals
    }

    fn num_primal(&self) -> usize {
        INTERVAL_STRIDE * self.intervals + 6
    }

    fn collision_rows(&self) -> usize {
        (self.intervals + 1) * self.footprint.len() * self.normals.len()
    }

    fn velocity_rows(&self) -> usize {
        (self.intervals + 1) * 6
    }

    fn thrust_rows(&self) -> usize {
        2 * self.intervals
    }

    pub fn num_slacks(&self) -> usize {
        self.collision_rows() + self.velocity_rows() + self.thrust_rows()
    }

    /// Variable index of the slack for inequality row `row`.
    pub fn slack_index(&self, row: usize) -> usize {
        self.num_primal() + row
    }

    fn ineq_row(&self, q: usize) -> IneqRow {
        let per_node = self.footprint.len() * self.normals.len();
        if q < self.collision_rows() {
            let node = q / per_node;
            let rest = q % per_node;
            IneqRow::Collision {
                node,
                vertex: rest / self.normals.len(),
                row: rest % self.normals.len(),
            }
        } else if q < self.collision_rows() + self.velocity_rows() {
            let r = q - self.collision_rows();
            IneqRow::Velocity {
                node: r / 6,
                component: (r % 6) / 2,
                upper: r.is_multiple_of(2),
            }
        } else {
            let r = q - self.collision_rows() - self.velocity_rows();
            IneqRow::Thrust {
                interval: r / 2,
                thruster: r % 2,
            }
        }
    }

    fn slack_weight(&self, q: usize) -> f64 {
        let w = &self.spec.slack_weights;
        match self.ineq_row(q) {
            IneqRow::Collision { .. } => w.collision,
            IneqRow::Velocity { .. } => w.velocity,
            IneqRow::Thrust { .. } => w.thrust,
        }
    }

    fn state(&self, x: &[f64], idx: usize) -> Vector6<f64> {
        Vector6::from_column_slice(&x[idx..idx + 6])
    }

    fn input(&self, x: &[f64], i: usize) -> Vector4<f64> {
        let idx = self.input_index(i);
        Vector4::from_column_slice(&x[idx..idx + 4])
    }

    /// `a . (R(psi) v + p) - b` for one collision row.
    fn collision_value(&self, x: &[f64], node: usize, vertex: usize, row: usize) -> f64 {
        let idx = self.node_index(node);
        let (s, c) = x[idx + 2].sin_cos();
        let v = self.footprint[vertex];
        let world = Vector2::new(
            x[idx] + c * v[0] - s * v[1],
            x[idx + 1] + s * v[0] + c * v[1],
        );
        self.normals[row].dot(&world) - self.offsets[row]
    }

    /// Inequality row value without its slack.
    fn ineq_value(&self, x: &[f64], q: usize) -> f64 {
        match self.ineq_row(q) {
            IneqRow::Collision { node, vertex, row } => self.collision_value(x, node, vertex, row),
            IneqRow::Velocity {
                node,
                component,
                upper,
            } => {
                let val = x[self.node_index(node) + 3 + component];
                let sign = if upper { 1.0 } else { -1.0 };
                sign * val - self.spec.velocity_bounds[component]
            }
            IneqRow::Thrust { interval, thruster } => {
                let idx = self.input_index(interval) + 2 * thruster;
                let fmax2 = self.spec.f_max * self.spec.f_max;
                (x[idx] * x[idx] + x[idx + 1] * x[idx + 1]) / fmax2 - 1.0
            }
        }
    }

    /// Initial iterate: a shifted previous plan when given, otherwise the
    /// measured state held over the horizon with zero input. The first node
    /// always equals the measured state and slacks start at their smallest
    /// feasible values.
    pub fn initial_guess(&self, t0: f64, warm_start: Option<&PlannedTrajectory>) -> Vec<f64> {
        let mut x = vec![0.0; self.num_primal() + self.num_slacks()];
        let goal = self.spec.docking_pose;
        let heading_shift = warm_start.map_or(0.0, |w| {
            let psi = w.state_at(t0)[2];
            2.0 * PI * ((self.measured[2] - psi) / (2.0 * PI)).round()
        });
        let warm_state = |t: f64| -> Vector6<f64> {
            let Some(w) = warm_start else {
                return self.measured;
            };
            if t <= w.end_time() {
                let mut s = w.state_at(t);
                s[2] += heading_shift;
                return s;
            }
            let last = w.state_at(w.end_time())[2] + heading_shift;
            let heading = goal.heading + 2.0 * PI * ((last - goal.heading) / (2.0 * PI)).round();
            Vector6::new(goal.north, goal.east, heading, 0.0, 0.0, 0.0)
        };
        for i in 0..=self.intervals {
            let points = if i == self.intervals { 1 } else { 4 };
            for k in 0..points {
                let t = t0 + (i as f64 + COLLOCATION_POINTS[k]) * self.h;
                let idx = self.state_index(i, k);
                x[idx..idx + 6].copy_from_slice(warm_state(t).as_slice());
            }
            if i < self.intervals {
                let u = warm_start.map_or(Vector4::zeros(), |w| {
                    let t = t0 + (i as f64 + 0.5) * self.h;
                    if t <= w.end_time() {
                        w.input_at(t)
                    } else {
                        Vector4::zeros()
                    }
                });
                let idx = self.input_index(i);
                x[idx..idx + 4].copy_from_slice(u.as_slice());
            }
        }
        x[..6].copy_from_slice(self.measured.as_slice());
        for q in 0..self.num_slacks() {
            x[self.slack_index(q)] = self.ineq_value(&x, q).max(0.0);
        }
        x
    }

    /// Converts a solution vector into a sampled trajectory.
    pub fn trajectory(&self, x: &[f64], t0: f64, stats: SolveStats) -> PlannedTrajectory {
        let mut knots = Vec::with_capacity(4 * self.intervals + 1);
        let mut inputs = Vec::with_capacity(self.intervals);
        for i in 0..self.intervals {
            for k in 0..4 {
                knots.push(self.state(x, self.state_index(i, k)));
            }
            inputs.push(self.input(x, i));
        }
        knots.push(self.state(x, self.state_index(self.intervals, 0)));

        let mut slack = SlackSummary::default();
        for q in 0..self.num_slacks() {
            let s = x[self.slack_index(q)];
            let entry = match self.ineq_row(q) {
                IneqRow::Collision { .. } => &mut slack.collision,
                IneqRow::Velocity { .. } => &mut slack.velocity,
                IneqRow::Thrust { .. } => &mut slack.thrust,
            };
            *entry = entry.max(s);
        }

        let mut traj = PlannedTrajectory {
            t0,
            horizon: self.spec.horizon,
            samples: Vec::new(),
            slack_summary: slack,
            solve_stats: stats,
            interval_length: self.h,
            knots,
            inputs,
            params: self.params,
        };
        let count = (self.spec.horizon / self.spec.sample_period).round() as usize;
        traj.samples = (0..=count)
            .map(|n| {
                let t = if n == count {
                    t0 + self.spec.horizon
                } else {
                    t0 + n as f64 * self.spec.sample_period
                };
                traj.sample_at(t)
            })
            .collect();
        traj
    }
}

impl NlpProblem for DockingOcp {
    fn num_variables(&self) -> usize {
        self.num_primal() + self.num_slacks()
    }

    fn num_eq(&self) -> usize {
        6 + self.num_defect_rows()
    }

    fn num_ineq(&self) -> usize {
        self.num_slacks()
    }

    fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_variables();
        let mut lb = vec![f64::NEG_INFINITY; n];
        for v in lb.iter_mut().skip(self.num_primal()) {
            *v = 0.0;
        }
        (lb, vec![f64::INFINITY; n])
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let m11 = self.params.m11;
        let mut total = 0.0;
        for i in 0..self.intervals {
            for j in 0..3 {
                let xs = self.state(x, self.state_index(i, j + 1));
                total += self.h * QUADRATURE_WEIGHTS[j] * state_cost(&xs, &self.spec);
            }
            total += self.h * self.input(x, i).norm_squared() / (m11 * m11);
        }
        for q in 0..self.num_slacks() {
            total += self.h * self.slack_weight(q) * x[self.slack_index(q)];
        }
        total
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
        let m11 = self.params.m11;
        for i in 0..self.intervals {
            for j in 0..3 {
                let idx = self.state_index(i, j + 1);
                let g = state_cost_gradient(&self.state(x, idx), &self.spec);
                for r in 0..6 {
                    grad[idx + r] += self.h * QUADRATURE_WEIGHTS[j] * g[r];
                }
            }
            let idx = self.input_index(i);
            for c in 0..4 {
                grad[idx + c] = 2.0 * self.h * x[idx + c] / (m11 * m11);
            }
        }
        for q in 0..self.num_slacks() {
            grad[self.slack_index(q)] = self.h * self.slack_weight(q);
        }
    }

    fn eq_constraints(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..6 {
            out[r] = x[r] - self.measured[r];
        }
        for i in 0..self.intervals {
            let base = 6 + 24 * i;
            let u = self.input(x, i);
            let xs: [Vector6<f64>; 4] =
                std::array::from_fn(|k| self.state(x, self.state_index(i, k)));
            for j in 0..3 {
                let f = planning_dynamics_vec(&xs[j + 1], &u, &self.params);
                let mut poly = Vector6::zeros();
                for k in 0..4 {
                    poly += self.colloc.c[j][k] * xs[k];
                }
                let defect = poly - self.h * f;
                out[base + 6 * j..base + 6 * j + 6].copy_from_slice(defect.as_slice());
            }
            let mut end = -self.state(x, self.state_index(i + 1, 0));
            for k in 0..4 {
                end += self.colloc.d[k] * xs[k];
            }
            out[base + 18..base + 24].copy_from_slice(end.as_slice());
        }
    }

    fn eq_jacobian_structure(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::new();
        for r in 0..6 {
            s.push((r, r));
        }
        for i in 0..self.intervals {
            let base = 6 + 24 * i;
            for j in 1..4 {
                for r in 0..6 {
                    let row = base + 6 * (j - 1) + r;
                    for k in (0..4).filter(|&k| k != j) {
                        s.push((row, self.state_index(i, k) + r));
                    }
                    for c in 0..6 {
                        s.push((row, self.state_index(i, j) + c));
                    }
                    if r >= 3 {
                        for c in 0..4 {
                            s.push((row, self.input_index(i) + c));
                        }
                    }
                }
            }
            for r in 0..6 {
                let row = base + 18 + r;
                for k in 0..4 {
                    s.push((row, self.state_index(i, k) + r));
                }
                s.push((row, self.state_index(i + 1, 0) + r));
            }
        }
        s
    }

    fn eq_jacobian_values(&self, x: &[f64], v: &mut [f64]) {
        let mut n = 0;
        let mut push = |val: f64| {
            v[n] = val;
            n += 1;
        };
        for _ in 0..6 {
            push(1.0);
        }
        for i in 0..self.intervals {
            for j in 1..4 {
                let (jx, ju) = planning_dynamics_jacobian(
                    &self.state(x, self.state_index(i, j)),
                    &self.params,
                );
                let cj = &self.colloc.c[j - 1];
                for r in 0..6 {
                    for k in (0..4).filter(|&k| k != j) {
                        push(cj[k]);
                    }
                    for c in 0..6 {
                        let diag = if r == c { cj[j] } else { 0.0 };
                        push(diag - self.h * jx[(r, c)]);
                    }
                    if r >= 3 {
                        for c in 0..4 {
                            push(-self.h * ju[(r, c)]);
                        }
                    }
                }
            }
            for _ in 0..6 {
                for k in 0..4 {
                    push(self.colloc.d[k]);
                }
                push(-1.0);
            }
        }
    }

    fn ineq_constraints(&self, x: &[f64], out: &mut [f64]) {
        for (q, o) in out.iter_mut().enumerate() {
            *o = self.ineq_value(x, q) - x[self.slack_index(q)];
        }
    }

    fn ineq_jacobian_structure(&self) -> Vec<(usize, usize)> {
        let mut s = Vec::new();
        for q in 0..self.num_slacks() {
            match self.ineq_row(q) {
                IneqRow::Collision { node, .. } => {
                    let idx = self.node_index(node);
                    s.extend([(q, idx), (q, idx + 1), (q, idx + 2)]);
                }
                IneqRow::Velocity {
                    node, component, ..
                } => {
                    s.push((q, self.node_index(node) + 3 + component));
                }
                IneqRow::Thrust { interval, thruster } => {
                    let idx = self.input_index(interval) + 2 * thruster;
                    s.extend([(q, idx), (q, idx + 1)]);
                }
            }
            s.push((q, self.slack_index(q)));
        }
        s
    }

    fn ineq_jacobian_values(&self, x: &[f64], v: &mut [f64]) {
        let mut n = 0;
        let fmax2 = self.spec.f_max * self.spec.f_max;
        for q in 0..self.num_slacks() {
            match self.ineq_row(q) {
                IneqRow::Collision { node, vertex, row } => {
                    let idx = self.node_index(node);
                    let (s, c) = x[idx + 2].sin_cos();
                    let p = self.footprint[vertex];
                    let a = self.normals[row];
                    v[n] = a[0];
                    v[n + 1] = a[1];
                    v[n + 2] = a[0] * (-s * p[0] - c * p[1]) + a[1] * (c * p[0] - s * p[1]);
                    n += 3;
                }
                IneqRow::Velocity { upper, .. } => {
                    v[n] = if upper { 1.0 } else { -1.0 };
                    n += 1;
                }
                IneqRow::Thrust { interval, thruster } => {
                    let idx = self.input_index(interval) + 2 * thruster;
                    v[n] = 2.0 * x[idx] / fmax2;
                    v[n + 1] = 2.0 * x[idx + 1] / fmax2;
                    n += 2;
                }
            }
            v[n] = -1.0;
            n += 1;
        }
    }

    fn hessian_blocks(&self) -> Vec<Vec<usize>> {
        let mut blocks = Vec::new();
        for i in 0..self.intervals {
            for j in 1..4 {
                let idx = self.state_index(i, j);
                blocks.push((idx..idx + 6).collect());
            }
        }
        for node in 0..=self.intervals {
            blocks.push(vec![self.node_index(node) + 2]);
        }
        for i in 0..self.intervals {
            let idx = self.input_index(i);
            blocks.push((idx..idx + 4).collect());
        }
        blocks
    }

    fn hessian_block_values(
        &self,
        x: &[f64],
        obj_factor: f64,
        lambda_eq: &[f64],
        lambda_ineq: &[f64],
        blocks: &mut [DMatrix<f64>],
    ) {
        let mut b = 0;
        for i in 0..self.intervals {
            for j in 1..4 {
                let xs = self.state(x, self.state_index(i, j));
                let row = 6 + 24 * i + 6 * (j - 1);
                let weights = Vector6::from_column_slice(&lambda_eq[row..row + 6]) * -self.h;
                let mut h = planning_dynamics_weighted_hessian(&xs, &weights, &self.params);
                let w = obj_factor * self.h * QUADRATURE_WEIGHTS[j - 1];
                let hub = state_cost_hessian(&xs, &self.spec);
                for r in 0..2 {
                    for c in 0..2 {
                        h[(r, c)] += w * hub[(r, c)];
                    }
                }
                let d = &self.spec;
                h[(2, 2)] += w * d.heading_weight * (xs[2] - d.docking_pose.heading).cos();
                h[(4, 4)] += w * 2.0 * d.sway_weight;
                h[(5, 5)] += w * 2.0 * d.yaw_rate_weight;
                blocks[b].copy_from(&h);
                b += 1;
            }
        }
        let per_node = self.footprint.len() * self.normals.len();
        for node in 0..=self.intervals {
            let idx = self.node_index(node);
            let (s, c) = x[idx + 2].sin_cos();
            let mut total = 0.0;
            for vertex in 0..self.footprint.len() {
                let p = self.footprint[vertex];
                let rotated = Vector2::new(c * p[0] - s * p[1], s * p[0] + c * p[1]);
                for row in 0..self.normals.len() {
                    let q = node * per_node + vertex * self.normals.len() + row;
                    total -= lambda_ineq[q] * self.normals[row].dot(&rotated);
                }
            }
            blocks[b][(0, 0)] = total;
            b += 1;
        }
        let m11 = self.params.m11;
        let fmax2 = self.spec.f_max * self.spec.f_max;
        let thrust0 = self.collision_rows() + self.velocity_rows();
        for i in 0..self.intervals {
            let block = &mut blocks[b];
            block.fill(0.0);
            for t in 0..2 {
                let curvature = obj_factor * 2.0 * self.h / (m11 * m11)
                    + lambda_ineq[thrust0 + 2 * i + t] * 2.0 / fmax2;
                block[(2 * t, 2 * t)] = curvature;
                block[(2 * t + 1, 2 * t + 1)] = curvature;
            }
            b += 1;
        }
    }
}

/// Largest slack per constraint family.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SlackSummary {
    pub collision: f64,
    pub velocity: f64,
    pub thrust: f64,
}

impl SlackSummary {
    pub fn max(&self) -> f64 {
        self.collision.max(self.velocity).max(self.thrust)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub solve_time: f64,
    pub converged: bool,
    pub status: SolveStatus,
    pub objective: f64,
    pub primal_infeasibility: f64,
    pub kkt_residual: f64,
    /// Largest absolute collocation or continuity residual at the solution.
    pub max_defect: f64,
    #[serde(skip)]
    pub log: Vec<IterationRecord>,
}

/// One reference sample for the tracking controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub time: f64,
    pub pose: Pose,
    pub velocity: BodyVelocity,
    /// Body-frame acceleration `nu_dot`.
    pub acceleration: Vector3<f64>,
    pub input: ThrusterForces,
}

/// A solved plan, sampled at the controller rate and evaluable at any time
/// through its collocation polynomials.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrajectory {
    pub t0: f64,
    pub horizon: f64,
    pub samples: Vec<TrajectorySample>,
    pub slack_summary: SlackSummary,
    pub solve_stats: SolveStats,
    interval_length: f64,
    knots: Vec<Vector6<f64>>,
    inputs: Vec<Vector4<f64>>,
    params: ModelParams,
}

impl PlannedTrajectory {
    pub fn end_time(&self) -> f64 {
        self.t0 + self.horizon
    }

    /// Interval index and local time in `[0, 1]`, clamped to the horizon.
    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.inputs.len();
        let s = ((t - self.t0) / self.interval_length).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        (i, s - i as f64)
    }

    pub fn state_at(&self, t: f64) -> Vector6<f64> {
        let (i, tau) = self.locate(t);
        let l = lagrange_basis(tau);
        (0..4).map(|k| l[k] * self.knots[4 * i + k]).sum()
    }

    pub fn input_at(&self, t: f64) -> Vector4<f64> {
        self.inputs[self.locate(t).0]
    }

    /// Reference at time `t`; the acceleration is the planning model
    /// evaluated at the interpolated state and the interval's input.
    pub fn sample_at(&self, t: f64) -> TrajectorySample {
        let x = self.state_at(t);
        let u = self.input_at(t);
        let xdot = planning_dynamics_vec(&x, &u, &self.params);
        TrajectorySample {
            time: t,
            pose: Pose::new(x[0], x[1], x[2]),
            velocity: BodyVelocity::new(x[3], x[4], x[5]),
            acceleration: Vector3::new(xdot[3], xdot[4], xdot[5]),
            input: ThrusterForces::from_vector(&u),
        }
    }

    pub fn final_pose(&self) -> Pose {
        let x = self.knots[self.knots.len() - 1];
        Pose::new(x[0], x[1], x[2])
    }

    /// The trajectory samples as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "time,north,east,heading,surge,sway,yaw_rate,surge_dot,sway_dot,yaw_rate_dot,f_x1,f_y1,f_x2,f_y2\n",
        );
        for s in &self.samples {
            crate::push_csv_fields(
                &mut out,
                &[
                    s.time,
                    s.pose.north,
                    s.pose.east,
                    s.pose.heading,
                    s.velocity.surge,
                    s.velocity.sway,
                    s.velocity.yaw_rate,
                    s.acceleration[0],
                    s.acceleration[1],
                    s.acceleration[2],
                    s.input.f_x1,
                    s.input.f_y1,
                    s.input.f_x2,
                    s.input.f_y2,
                ],
            );
            out.push('\n');
        }
        out
    }
}

/// Plans from `measured_state` at time `t0` with default solver options.
pub fn plan(
    measured_state: &VesselState,
    t0: f64,
    region: &ConvexRegion,
    spec: &DockingSpec,
    params: &ModelParams,
    warm_start: Option<&PlannedTrajectory>,
) -> Result<PlannedTrajectory, PlanError> {
    plan_with_options(
        measured_state,
        t0,
        region,
        spec,
        params,
        warm_start,
        &SolveOptions::default(),
    )
}

pub fn plan_with_options(
    measured_state: &VesselState,
    t0: f64,
    region: &ConvexRegion,
    spec: &DockingSpec,
    params: &ModelParams,
    warm_start: Option<&PlannedTrajectory>,
    options: &SolveOptions,
) -> Result<PlannedTrajectory, PlanError> {
    let ocp = build_ocp(measured_state, region, spec, params)?;
    let x0 = ocp.initial_guess(t0, warm_start);
    let result = nlp::solve(&ocp, &x0, options)?;
    let mut eq = vec![0.0; ocp.num_eq()];
    ocp.eq_constraints(&result.x, &mut eq);
    let max_defect = eq[6..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let stats = SolveStats {
        iterations: result.iterations,
        solve_time: result.solve_wall_time,
        converged: result.converged(),
        status: result.status,
        objective: result.objective,
        primal_infeasibility: result.primal_infeasibility,
        kkt_residual: result.kkt_residual,
        max_defect,
        log: result.log.clone(),
    };
    let traj = ocp.trajectory(&result.x, t0, stats);
    if result.converged() {
        Ok(traj)
    } else {
        Err(PlanError::SolverNotConverged {
            best: Box::new(traj),
            violation: result.primal_infeasibility,
            status: result.status,
        })
    }
}
