use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dock_core::ocp::TrajectorySample;
use dock_core::sim::rk4_step;
use dock_core::vessel::{ActuatorCommands, ActuatorState, BodyVelocity};
use dock_core::{
    allocate_full, allocate_reversible, control, ControllerState, DpGains, ModelParams, Pose,
    VesselState,
};
use nalgebra::Vector3;

fn controller_tick(c: &mut Criterion) {
    let params = ModelParams::default();
    let gains = DpGains::default();
    let measured = VesselState::new(
        Pose::new(-10.2, 0.3, 0.05),
        BodyVelocity::new(0.6, 0.05, 0.01),
    );
    let reference = TrajectorySample {
        time: 30.0,
        pose: Pose::new(-10.0, 0.0, 0.0),
        velocity: BodyVelocity::new(0.65, 0.0, 0.0),
        acceleration: Vector3::new(-0.01, 0.0, 0.0),
        input: Default::default(),
    };
    let state = ControllerState::default();
    c.bench_function("dp_control", |b| {
        b.iter(|| {
            control(
                black_box(&measured),
                &reference,
                &state,
                &gains,
                &params,
                0.1,
            )
        })
    });
    let tau = Vector3::new(250.0, -120.0, 300.0);
    c.bench_function("allocate_full", |b| {
        b.iter(|| allocate_full(black_box(&tau), &params))
    });
    c.bench_function("allocate_reversible", |b| {
        b.iter(|| allocate_reversible(black_box(&tau), &params, &[0.3, -2.8]))
    });
}

fn plant_step(c: &mut Criterion) {
    let params = ModelParams::default();
    let state = VesselState::new(
        Pose::new(-10.0, 0.0, 0.1),
        BodyVelocity::new(0.6, 0.05, 0.01),
    );
    let actuators = ActuatorState::default();
    let commands = ActuatorCommands {
        azimuth_commands: [0.2, -0.1],
        speed_commands: [8.0, 7.5],
    };
    c.bench_function("rk4_plant_step", |b| {
        b.iter(|| {
            rk4_step(
                black_box(&state),
                &actuators,
                &commands,
                &params,
                |_| Vector3::zeros(),
                0.0,
                0.01,
            )
        })
    });
}

criterion_group!(benches, controller_tick, plant_step);
criterion_main!(benches);
