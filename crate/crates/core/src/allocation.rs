//! Thrust allocation for the two azimuth thrusters.
//!
//! The commanded generalized force is distributed over the extended thrust
//! vector `(f_x1, f_y1, f_x2, f_y2)` with the minimum-norm pseudo-inverse of
//! the thrust map, each thruster is clipped to its force limit, and each
//! force vector is converted to an azimuth angle and a propeller speed.

use crate::vessel::{wrap_to_pi, ActuatorCommands, ModelParams, ThrusterForces};
use nalgebra::{Vector3, Vector4};
use std::f64::consts::{FRAC_PI_2, PI};

/// Result of allocating one generalized force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    pub forces: ThrusterForces,
    pub commands: ActuatorCommands,
    /// True when at least one thruster was clipped to its force limit.
    pub saturated: bool,
}

/// Minimum-norm thruster forces producing `tau`, clipped to `f_max` per
/// thruster. The second value reports whether clipping occurred.
pub fn allocate_forces(tau: &Vector3<f64>, params: &ModelParams) -> (ThrusterForces, bool) {
    let t = params.thrust_map();
    let gram = t * t.transpose();
    let pinv = t.transpose()
        * gram
            .try_inverse()
            .expect("thrust map has full row rank for distinct lever arms");
    let mut f: Vector4<f64> = pinv * tau;
    let mut saturated = false;
    for i in 0..2 {
        let norm = f[2 * i].hypot(f[2 * i + 1]);
        if norm > params.f_max {
            let scale = params.f_max / norm;
            f[2 * i] *= scale;
            f[2 * i + 1] *= scale;
            saturated = true;
        }
    }
    (ThrusterForces::from_vector(&f), saturated)
}

/// Propeller speed producing thrust `force` under `F = k_t n |n|`, limited
/// to the configured maximum speed.
pub fn speed_for_thrust(force: f64, params: &ModelParams) -> f64 {
    let n = force.signum() * (force.abs() / params.thrust_coefficient).sqrt();
    n.clamp(-params.max_propeller_speed, params.max_propeller_speed)
}

/// Full allocation including azimuth angles and propeller speeds. A thruster
/// with zero force gets azimuth zero.
pub fn allocate_full(tau: &Vector3<f64>, params: &ModelParams) -> Allocation {
    let (forces, saturated) = allocate_forces(tau, params);
    if saturated {
        log::debug!("thrust allocation saturated for tau = {tau:?}");
    }
    let pairs = [(forces.f_x1, forces.f_y1), (forces.f_x2, forces.f_y2)];
    let mut commands = ActuatorCommands::default();
    for (i, (fx, fy)) in pairs.into_iter().enumerate() {
        commands.azimuth_commands[i] = fy.atan2(fx);
        commands.speed_commands[i] = speed_for_thrust(fx.hypot(fy), params);
    }
    Allocation {
        forces,
        commands,
        saturated,
    }
}

/// Like [`allocate_full`], but a thruster whose commanded azimuth is more
/// than 90 degrees away from its current azimuth is turned the other way
/// round and run in reverse. The force vectors are the same; only the
/// azimuth slew needed to produce them shrinks.
pub fn allocate_reversible(
    tau: &Vector3<f64>,
    params: &ModelParams,
    current_azimuths: &[f64; 2],
) -> Allocation {
    let mut a = allocate_full(tau, params);
    for i in 0..2 {
        let alpha = a.commands.azimuth_commands[i];
        if wrap_to_pi(alpha - current_azimuths[i]).abs() > FRAC_PI_2 {
            a.commands.azimuth_commands[i] = wrap_to_pi(alpha + PI);
            a.commands.speed_commands[i] = -a.commands.speed_commands[i];
        }
    }
    a
}

/// Azimuth and speed commands for the generalized force `tau`.
pub fn allocate(tau: &Vector3<f64>, params: &ModelParams) -> ActuatorCommands {
    allocate_full(tau, params).commands
}
