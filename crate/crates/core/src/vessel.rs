//! Three-degree-of-freedom vessel models.
//!
//! All models share the kinematics `eta_dot = R(psi) * nu` with
//! `eta = [north, east, heading]` and `nu = [surge, sway, yaw_rate]`.
//! The kinetics differ per use:
//!
//! * simulation: `M nu_dot + C(nu) nu + D(nu) nu = tau(alpha, n)` with
//!   optional sway/yaw couplings and first-order actuator dynamics,
//! * planning: `S M_p nu_dot + C_p(nu) nu + D_p(nu) nu = tau_p(u)` with
//!   diagonal inertia and damping and thruster forces as inputs,
//! * tracking feed-forward: `tau_ff = M_p nu_dot + D_p(nu) nu`.

use nalgebra::{Matrix3, Matrix3x4, Matrix6, Matrix6x4, Vector2, Vector3, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_to_pi(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Earth-fixed pose. Heading is kept unwrapped; use [`wrap_to_pi`] when comparing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub north: f64,
    pub east: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(north: f64, east: f64, heading: f64) -> Self {
        Self {
            north,
            east,
            heading,
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.north, self.east)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.north, self.east, self.heading)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Body-fixed velocities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyVelocity {
    pub surge: f64,
    pub sway: f64,
    pub yaw_rate: f64,
}

impl BodyVelocity {
    pub fn new(surge: f64, sway: f64, yaw_rate: f64) -> Self {
        Self {
            surge,
            sway,
            yaw_rate,
        }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.surge, self.sway, self.yaw_rate)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Full vessel state `x = [eta; nu]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VesselState {
    pub pose: Pose,
    pub velocity: BodyVelocity,
}

impl VesselState {
    pub fn new(pose: Pose, velocity: BodyVelocity) -> Self {
        Self { pose, velocity }
    }

    /// State at rest in the given pose.
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            pose,
            velocity: BodyVelocity::default(),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let p = self.pose;
        let v = self.velocity;
        Vector6::new(p.north, p.east, p.heading, v.surge, v.sway, v.yaw_rate)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            pose: Pose::new(x[0], x[1], x[2]),
            velocity: BodyVelocity::new(x[3], x[4], x[5]),
        }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            pose: Pose::new(x[0], x[1], x[2]),
            velocity: BodyVelocity::new(x[3], x[4], x[5]),
        }
    }
}

/// Thruster forces decomposed along the body axes, `u_p = [f_x1, f_y1, f_x2, f_y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThrusterForces {
    pub f_x1: f64,
    pub f_y1: f64,
    pub f_x2: f64,
    pub f_y2: f64,
}

impl ThrusterForces {
    pub fn new(f_x1: f64, f_y1: f64, f_x2: f64, f_y2: f64) -> Self {
        Self {
            f_x1,
            f_y1,
            f_x2,
            f_y2,
        }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.f_x1, self.f_y1, self.f_x2, self.f_y2)
    }

    pub fn from_vector(u: &Vector4<f64>) -> Self {
        Self::new(u[0], u[1], u[2], u[3])
    }

    /// Force magnitude of thruster 1 and 2.
    pub fn norms(&self) -> [f64; 2] {
        [self.f_x1.hypot(self.f_y1), self.f_x2.hypot(self.f_y2)]
    }
}

/// Azimuth angles (rad) and propeller speeds (rev/s) of the two thrusters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActuatorState {
    pub azimuth_angles: [f64; 2],
    pub propeller_speeds: [f64; 2],
}

/// Commanded azimuth angles (rad) and propeller speeds (rev/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActuatorCommands {
    pub azimuth_commands: [f64; 2],
    pub speed_commands: [f64; 2],
}

/// Time derivative of [`ActuatorState`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorRates {
    pub azimuth_rates: [f64; 2],
    pub propeller_accelerations: [f64; 2],
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("invalid parameter `{name}`: {reason}")]
    Invalid { name: &'static str, reason: String },
    #[error("failed to read parameter file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse parameter file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Model parameters in SI units.
///
/// The hydrodynamic coefficients follow the usual sign convention: the
/// damping derivatives (`x_u`, `y_v`, ...) are negative so that the diagonal
/// damping terms `d11(u) = -x_u - x_abs_u_u |u| - x_u3 u^2` are positive.
///
/// The defaults are surrogate values for a 5 m, roughly 2 t ferry. They are
/// physically plausible but not identified from a real hull.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Surge inertia (kg).
    pub m11: f64,
    /// Sway inertia (kg).
    pub m22: f64,
    /// Yaw inertia (kg m^2).
    pub m33: f64,
    pub x_u: f64,
    pub x_abs_u_u: f64,
    pub x_u3: f64,
    pub y_v: f64,
    pub y_abs_v_v: f64,
    pub y_v3: f64,
    pub n_r: f64,
    pub n_abs_r_r: f64,
    /// Inertia amplification used by the planning model, `S = diag(s)`.
    pub s_diag: [f64; 3],
    /// Longitudinal thruster positions (m); positive is forward of the origin.
    pub l1: f64,
    pub l2: f64,
    /// Maximum force per thruster (N).
    pub f_max: f64,
    pub footprint_length: f64,
    pub footprint_width: f64,
    /// Propeller thrust law `F = k_t n |n|` (N s^2).
    pub thrust_coefficient: f64,
    /// Maximum propeller speed magnitude (rev/s).
    pub max_propeller_speed: f64,
    /// Azimuth slew rate limit (rad/s).
    pub azimuth_rate_limit: f64,
    /// Azimuth servo time constant (s).
    pub azimuth_time_constant: f64,
    /// Propeller speed time constant (s).
    pub propeller_time_constant: f64,
    /// Sway/yaw added-mass coupling of the simulation model (kg m).
    #[serde(default)]
    pub m23: f64,
    /// Linear sway-from-yaw damping coupling of the simulation model.
    #[serde(default)]
    pub d23: f64,
    /// Linear yaw-from-sway damping coupling of the simulation model.
    #[serde(default)]
    pub d32: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            m11: 2400.0,
            m22: 2600.0,
            m33: 4500.0,
            x_u: -80.0,
            x_abs_u_u: -140.0,
            x_u3: -40.0,
            y_v: -220.0,
            y_abs_v_v: -400.0,
            y_v3: -120.0,
            n_r: -900.0,
            n_abs_r_r: -1600.0,
            s_diag: [2.5, 2.5, 5.0],
            l1: 1.8,
            l2: -1.8,
            f_max: 500.0,
            footprint_length: 5.0,
            footprint_width: 2.8,
            thrust_coefficient: 2.0,
            max_propeller_speed: 16.0,
            azimuth_rate_limit: 60f64.to_radians(),
            azimuth_time_constant: 0.2,
            propeller_time_constant: 0.5,
            m23: 0.0,
            d23: 0.0,
            d32: 0.0,
        }
    }
}

/// `a + b s + c s^2 > 0` for every `s >= 0`.
fn positive_on_half_line(a: f64, b: f64, c: f64) -> bool {
    a > 0.0 && c >= 0.0 && (b >= 0.0 || (c > 0.0 && b * b < 4.0 * a * c))
}

impl ModelParams {
    pub fn from_json(text: &str) -> Result<Self, ParamError> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ParamError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        fn check(ok: bool, name: &'static str, reason: &str) -> Result<(), ParamError> {
            if ok {
                Ok(())
            } else {
                Err(ParamError::Invalid {
                    name,
                    reason: reason.to_string(),
                })
            }
        }
        let all = [
            self.m11,
            self.m22,
            self.m33,
            self.x_u,
            self.x_abs_u_u,
            self.x_u3,
            self.y_v,
            self.y_abs_v_v,
            self.y_v3,
            self.n_r,
            self.n_abs_r_r,
            self.l1,
            self.l2,
            self.f_max,
            self.m23,
            self.d23,
            self.d32,
        ];
        check(
            all.iter().all(|v| v.is_finite()),
            "params",
            "non-finite value",
        )?;
        check(self.m11 > 0.0, "m11", "must be positive")?;
        check(self.m22 > 0.0, "m22", "must be positive")?;
        check(self.m33 > 0.0, "m33", "must be positive")?;
        check(
            self.m22 * self.m33 > self.m23 * self.m23,
            "m23",
            "simulation inertia must stay positive definite",
        )?;
        check(
            positive_on_half_line(-self.x_u, -self.x_abs_u_u, -self.x_u3),
            "x_u",
            "surge damping d11(u) must be positive for all u",
        )?;
        check(
            positive_on_half_line(-self.y_v, -self.y_abs_v_v, -self.y_v3),
            "y_v",
            "sway damping d22(v) must be positive for all v",
        )?;
        check(
            positive_on_half_line(-self.n_r, -self.n_abs_r_r, 0.0),
            "n_r",
            "yaw damping d33(r) must be positive for all r",
        )?;
        check(
            self.s_diag.iter().all(|s| s.is_finite() && *s >= 1.0),
            "s_diag",
            "components must be >= 1",
        )?;
        check(
            self.l1 != self.l2,
            "l1",
            "thrusters must be at distinct positions",
        )?;
        check(self.f_max > 0.0, "f_max", "must be positive")?;
        check(
            self.footprint_length > 0.0 && self.footprint_width > 0.0,
            "footprint_length",
            "footprint dimensions must be positive",
        )?;
        check(
            self.thrust_coefficient > 0.0,
            "thrust_coefficient",
            "must be positive",
        )?;
        check(
            self.max_propeller_speed > 0.0,
            "max_propeller_speed",
            "must be positive",
        )?;
        check(
            self.azimuth_rate_limit > 0.0,
            "azimuth_rate_limit",
            "must be positive",
        )?;
        check(
            self.azimuth_time_constant > 0.0,
            "azimuth_time_constant",
            "must be positive",
        )?;
        check(
            self.propeller_time_constant > 0.0,
            "propeller_time_constant",
            "must be positive",
        )?;
        Ok(())
    }

    pub fn d11(&self, u: f64) -> f64 {
        -self.x_u - self.x_abs_u_u * u.abs() - self.x_u3 * u * u
    }

    pub fn d22(&self, v: f64) -> f64 {
        -self.y_v - self.y_abs_v_v * v.abs() - self.y_v3 * v * v
    }

    pub fn d33(&self, r: f64) -> f64 {
        -self.n_r - self.n_abs_r_r * r.abs()
    }

    pub fn inertia_planning(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(self.m11, self.m22, self.m33))
    }

    /// `M_p nu`-style diagonal of `S M_p`.
    pub fn amplified_inertia(&self) -> Vector3<f64> {
        Vector3::new(
            self.s_diag[0] * self.m11,
            self.s_diag[1] * self.m22,
            self.s_diag[2] * self.m33,
        )
    }

    /// `D_p(nu) = diag(d11(u), d22(v), d33(r))`.
    pub fn damping_planning(&self, nu: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            self.d11(nu[0]),
            self.d22(nu[1]),
            self.d33(nu[2]),
        ))
    }

    /// Coriolis and centripetal matrix of the planning model.
    pub fn coriolis_planning(&self, nu: &Vector3<f64>) -> Matrix3<f64> {
        let (u, v) = (nu[0], nu[1]);
        Matrix3::new(
            0.0,
            0.0,
            -self.m22 * v,
            0.0,
            0.0,
            self.m11 * u,
            self.m22 * v,
            -self.m11 * u,
            0.0,
        )
    }

    /// Linear map `tau_p(u)` from decomposed thruster forces to surge/sway/yaw.
    pub fn thrust_map(&self) -> Matrix3x4<f64> {
        Matrix3x4::new(
            1.0, 0.0, 1.0, 0.0, //
            0.0, 1.0, 0.0, 1.0, //
            0.0, self.l1, 0.0, self.l2,
        )
    }

    /// Body-frame vertices of the rectangular footprint, counterclockwise in
    /// (north, east) coordinates.
    pub fn footprint_vertices(&self) -> Vec<Vector2<f64>> {
        let (hl, hw) = (0.5 * self.footprint_length, 0.5 * self.footprint_width);
        vec![
            Vector2::new(hl, hw),
            Vector2::new(-hl, hw),
            Vector2::new(-hl, -hw),
            Vector2::new(hl, -hw),
        ]
    }

    /// Inertia matrix of the simulation model.
    pub fn inertia_simulation(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.m11, 0.0, 0.0, //
            0.0, self.m22, self.m23, //
            0.0, self.m23, self.m33,
        )
    }
}

/// Kinematic rotation matrix `R(psi)`.
pub fn rotation_matrix(heading: f64) -> Matrix3<f64> {
    let (s, c) = heading.sin_cos();
    Matrix3::new(
        c, -s, 0.0, //
        s, c, 0.0, //
        0.0, 0.0, 1.0,
    )
}

/// Planning model right-hand side `f(x_p, u_p)`.
pub fn planning_dynamics(
    state: &VesselState,
    input: &ThrusterForces,
    params: &ModelParams,
) -> Vector6<f64> {
    planning_dynamics_vec(&state.to_vector(), &input.to_vector(), params)
}

pub(crate) fn planning_dynamics_vec(
    x: &Vector6<f64>,
    u: &Vector4<f64>,
    params: &ModelParams,
) -> Vector6<f64> {
    let nu = Vector3::new(x[3], x[4], x[5]);
    let eta_dot = rotation_matrix(x[2]) * nu;
    let force = -params.coriolis_planning(&nu) * nu - params.damping_planning(&nu) * nu
        + params.thrust_map() * u;
    let nu_dot = force.component_div(&params.amplified_inertia());
    Vector6::new(
        eta_dot[0], eta_dot[1], eta_dot[2], nu_dot[0], nu_dot[1], nu_dot[2],
    )
}

/// Jacobians of [`planning_dynamics`] with respect to state and input.
pub fn planning_dynamics_jacobian(
    x: &Vector6<f64>,
    params: &ModelParams,
) -> (Matrix6<f64>, Matrix6x4<f64>) {
    let (psi, u, v, r) = (x[2], x[3], x[4], x[5]);
    let (s, c) = psi.sin_cos();
    let p = params;
    let mi = p.amplified_inertia();

    let mut jx = Matrix6::zeros();
    jx[(0, 2)] = -s * u - c * v;
    jx[(0, 3)] = c;
    jx[(0, 4)] = -s;
    jx[(1, 2)] = c * u - s * v;
    jx[(1, 3)] = s;
    jx[(1, 4)] = c;
    jx[(2, 5)] = 1.0;

    // surge: (m22 v r - d11(u) u + tau1) / (s1 m11)
    let g1u = -p.x_u - 2.0 * p.x_abs_u_u * u.abs() - 3.0 * p.x_u3 * u * u;
    jx[(3, 3)] = -g1u / mi[0];
    jx[(3, 4)] = p.m22 * r / mi[0];
    jx[(3, 5)] = p.m22 * v / mi[0];
    // sway: (-m11 u r - d22(v) v + tau2) / (s2 m22)
    let g2v = -p.y_v - 2.0 * p.y_abs_v_v * v.abs() - 3.0 * p.y_v3 * v * v;
    jx[(4, 3)] = -p.m11 * r / mi[1];
    jx[(4, 4)] = -g2v / mi[1];
    jx[(4, 5)] = -p.m11 * u / mi[1];
    // yaw: ((m11 - m22) u v - d33(r) r + tau3) / (s3 m33)
    let g3r = -p.n_r - 2.0 * p.n_abs_r_r * r.abs();
    jx[(5, 3)] = (p.m11 - p.m22) * v / mi[2];
    jx[(5, 4)] = (p.m11 - p.m22) * u / mi[2];
    jx[(5, 5)] = -g3r / mi[2];

    let b = p.thrust_map();
    let mut ju = Matrix6x4::zeros();
    for row in 0..3 {
        for col in 0..4 {
            ju[(3 + row, col)] = b[(row, col)] / mi[row];
        }
    }
    (jx, ju)
}

/// Weighted sum of state Hessians, `sum_k w_k d^2 f_k / dx^2`. The planning
/// model is linear in the input, so no input terms appear.
pub fn planning_dynamics_weighted_hessian(
    x: &Vector6<f64>,
    weights: &Vector6<f64>,
    params: &ModelParams,
) -> Matrix6<f64> {
    let (psi, u, v, r) = (x[2], x[3], x[4], x[5]);
    let (s, c) = psi.sin_cos();
    let p = params;
    let mi = p.amplified_inertia();
    let mut h = Matrix6::zeros();

    // north rate: c u - s v
    let w = weights[0];
    h[(2, 2)] += w * (-c * u + s * v);
    h[(2, 3)] += w * -s;
    h[(2, 4)] += w * -c;
    // east rate: s u + c v
    let w = weights[1];
    h[(2, 2)] += w * (-s * u - c * v);
    h[(2, 3)] += w * c;
    h[(2, 4)] += w * -s;

    let w = weights[3] / mi[0];
    let g1uu = -2.0 * p.x_abs_u_u * u.signum() * (u != 0.0) as u8 as f64 - 6.0 * p.x_u3 * u;
    h[(3, 3)] += w * -g1uu;
    h[(4, 5)] += w * p.m22;

    let w = weights[4] / mi[1];
    let g2vv = -2.0 * p.y_abs_v_v * v.signum() * (v != 0.0) as u8 as f64 - 6.0 * p.y_v3 * v;
    h[(4, 4)] += w * -g2vv;
    h[(3, 5)] += w * -p.m11;

    let w = weights[5] / mi[2];
    let g3rr = -2.0 * p.n_abs_r_r * r.signum() * (r != 0.0) as u8 as f64;
    h[(5, 5)] += w * -g3rr;
    h[(3, 4)] += w * (p.m11 - p.m22);

    // mirror the strictly upper entries
    for i in 0..6 {
        for j in (i + 1)..6 {
            let val = h[(i, j)] + h[(j, i)];
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    h
}

/// Generalized force produced by the thrusters at their actual azimuth
/// angles and propeller speeds, using the quadratic thrust law.
pub fn thruster_generalized_force(actuators: &ActuatorState, params: &ModelParams) -> Vector3<f64> {
    let lever = [params.l1, params.l2];
    let mut tau = Vector3::zeros();
    for i in 0..2 {
        let n = actuators.propeller_speeds[i];
        let thrust = params.thrust_coefficient * n * n.abs();
        let (s, c) = actuators.azimuth_angles[i].sin_cos();
        let (fx, fy) = (thrust * c, thrust * s);
        tau[0] += fx;
        tau[1] += fy;
        tau[2] += lever[i] * fy;
    }
    tau
}

/// Simulation plant: full kinetics plus actuator dynamics.
///
/// `disturbance` is an external body-frame generalized force (wind).
pub fn simulation_dynamics(
    state: &VesselState,
    actuators: &ActuatorState,
    commands: &ActuatorCommands,
    params: &ModelParams,
    disturbance: &Vector3<f64>,
) -> (Vector6<f64>, ActuatorRates) {
    let p = params;
    let nu = state.velocity.to_vector();
    let (u, v, r) = (nu[0], nu[1], nu[2]);
    let eta_dot = rotation_matrix(state.pose.heading) * nu;

    let m = p.inertia_simulation();
    let coriolis = Matrix3::new(
        0.0,
        0.0,
        -p.m22 * v - p.m23 * r,
        0.0,
        0.0,
        p.m11 * u,
        p.m22 * v + p.m23 * r,
        -p.m11 * u,
        0.0,
    );
    let mut damping = p.damping_planning(&nu);
    damping[(1, 2)] += p.d23;
    damping[(2, 1)] += p.d32;

    let tau = thruster_generalized_force(actuators, p) + disturbance;
    let rhs = tau - coriolis * nu - damping * nu;
    // m is symmetric positive definite by validation
    let nu_dot = m
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| rhs.component_div(&m.diagonal()));

    let mut rates = ActuatorRates::default();
    for i in 0..2 {
        let err = wrap_to_pi(commands.azimuth_commands[i] - actuators.azimuth_angles[i]);
        rates.azimuth_rates[i] =
            (err / p.azimuth_time_constant).clamp(-p.azimuth_rate_limit, p.azimuth_rate_limit);
        let n_cmd = commands.speed_commands[i].clamp(-p.max_propeller_speed, p.max_propeller_speed);
        rates.propeller_accelerations[i] =
            (n_cmd - actuators.propeller_speeds[i]) / p.propeller_time_constant;
    }

    (
        Vector6::new(
            eta_dot[0], eta_dot[1], eta_dot[2], nu_dot[0], nu_dot[1], nu_dot[2],
        ),
        rates,
    )
}

/// DP feed-forward `M_p nu_dot_p + D_p(nu_p) nu_p`. Neither the Coriolis
/// matrix nor the planning inertia amplification enter here.
pub fn tracking_feedforward(
    planned_velocity: &BodyVelocity,
    planned_acceleration: &Vector3<f64>,
    params: &ModelParams,
) -> Vector3<f64> {
    let nu = planned_velocity.to_vector();
    params.inertia_planning() * planned_acceleration + params.damping_planning(&nu) * nu
}
