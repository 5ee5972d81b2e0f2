//! Trajectory-tracking dynamic positioning controller.
//!
//! `tau_c = tau_ff + tau_fb` where the feed-forward is the tracking model
//! evaluated on the planned velocity and acceleration, and
//!
//! ```text
//! tau_fb = -R(psi)' (Kp e + I + Kd (R(psi) nu - R(psi_p) nu_p))
//! ```
//!
//! with `e` the Earth-frame pose error and `I` the clamped integral of
//! `Ki e`.

use crate::ocp::TrajectorySample;
use crate::vessel::{
    rotation_matrix, tracking_feedforward, wrap_to_pi, ModelParams, Pose, VesselState,
};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpGains {
    pub kp: [f64; 3],
    pub ki: [f64; 3],
    pub kd: [f64; 3],
    /// Bound on each component of the integral contribution (N, N, N m).
    pub antiwindup_limit: [f64; 3],
    /// Zero the integral whenever a new plan is adopted.
    pub reset_integral_on_replan: bool,
}

impl Default for DpGains {
    fn default() -> Self {
        Self {
            kp: [100.0, 100.0, 200.0],
            ki: [10.0, 10.0, 20.0],
            kd: [1000.0, 1000.0, 1500.0],
            antiwindup_limit: [150.0, 150.0, 200.0],
            reset_integral_on_replan: false,
        }
    }
}

impl DpGains {
    pub fn validate(&self) -> Result<(), String> {
        for (name, values) in [
            ("kp", self.kp),
            ("ki", self.ki),
            ("kd", self.kd),
            ("antiwindup_limit", self.antiwindup_limit),
        ] {
            if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(format!("{name} entries must be positive, got {values:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerState {
    /// Accumulated `Ki e dt`, in force and moment units.
    pub integral: Vector3<f64>,
    /// Time of the reference sample used in the last update.
    pub last_update: Option<f64>,
}

impl ControllerState {
    pub fn reset_integral(&mut self) {
        self.integral = Vector3::zeros();
    }
}

/// `eta - eta_p` with the heading difference wrapped to `(-pi, pi]`.
pub fn pose_error(measured: &Pose, planned: &Pose) -> Vector3<f64> {
    Vector3::new(
        measured.north - planned.north,
        measured.east - planned.east,
        wrap_to_pi(measured.heading - planned.heading),
    )
}

/// One controller update. Returns the commanded body-frame generalized force
/// and the next controller state. The integral in effect during this step is
/// the one accumulated so far; it is advanced afterwards and clamped.
pub fn control(
    measured: &VesselState,
    reference: &TrajectorySample,
    state: &ControllerState,
    gains: &DpGains,
    params: &ModelParams,
    dt: f64,
) -> (Vector3<f64>, ControllerState) {
    debug_assert!(dt > 0.0);
    let error = pose_error(&measured.pose, &reference.pose);
    let rot = rotation_matrix(measured.pose.heading);
    let error_rate = rot * measured.velocity.to_vector()
        - rotation_matrix(reference.pose.heading) * reference.velocity.to_vector();
    let kp = Matrix3::from_diagonal(&Vector3::from(gains.kp));
    let kd = Matrix3::from_diagonal(&Vector3::from(gains.kd));
    let feedback = -rot.transpose() * (kp * error + state.integral + kd * error_rate);
    let feedforward = tracking_feedforward(&reference.velocity, &reference.acceleration, params);

    let limit = Vector3::from(gains.antiwindup_limit);
    let ki = Vector3::from(gains.ki);
    let advanced = state.integral + ki.component_mul(&error) * dt;
    let integral = Vector3::from_fn(|i, _| advanced[i].clamp(-limit[i], limit[i]));
    (
        feedforward + feedback,
        ControllerState {
            integral,
            last_update: Some(reference.time),
        },
    )
}
