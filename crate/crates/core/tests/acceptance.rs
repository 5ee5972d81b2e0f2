//! Acceptance suite. Built without the libtest harness: the criteria run
//! one after another so solve-time measurements are not disturbed by
//! parallel tests, one PASS/FAIL line is printed per criterion, and the
//! process exits nonzero if any criterion fails.

use dock_core::geometry::{extract_convex_region_toward, footprint_vertices};
use dock_core::nlp::{check_derivatives, solve, HessianMode, NlpProblem, SolveOptions};
use dock_core::ocp::{
    build_ocp, cost_to_go, plan, pseudo_huber, DockingOcp, DockingSpec, PlannedTrajectory,
};
use dock_core::sim::{
    check_collision_free, random_start, run, summarize, write_outputs, RunLog, Scenario,
    SolveTimeStats, StartBox,
};
use dock_core::{ConvexRegion, Footprint, ModelParams, Pose, ThrusterForces, VesselState};
use nalgebra::{DMatrix, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::PathBuf;
use std::time::Instant;

fn data(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(path)
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Run {
    scenario: Scenario,
    log: RunLog,
    wall: f64,
}

fn run_timed(scenario: Scenario) -> Run {
    let start = Instant::now();
    let log = run(&scenario).expect("scenario runs");
    Run {
        scenario,
        log,
        wall: start.elapsed().as_secs_f64(),
    }
}

/// Nominal run, measured-latency run and five seeded random starts.
fn closed_loop_runs() -> Vec<Run> {
    let nominal = Scenario::load(data("scenarios/nominal.json")).unwrap();
    let latency = Scenario::load(data("scenarios/nominal_measured_latency.json")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(nominal.seed);
    let mut scenarios = vec![nominal.clone(), latency];
    for k in 0..5 {
        let mut s = nominal.clone();
        s.name = format!("random_start_{k}");
        s.initial = random_start(
            &s.map,
            &s.spec.docking_pose,
            &s.params,
            &s.planner,
            &StartBox::default(),
            &mut rng,
        )
        .expect("start pose found");
        scenarios.push(s);
    }
    scenarios.into_iter().map(run_timed).collect()
}

fn nominal_docking(nominal: &Run) -> Outcome {
    let (pos, heading) = nominal.log.final_error();
    let end = nominal.log.final_row().time;
    let ok = pos <= 0.5 && heading.to_degrees() <= 5.0 && end <= 200.0 && nominal.wall <= 60.0;
    outcome(
        ok,
        format!(
            "final error {pos:.3} m / {:.2} deg at t = {end} s, wall {:.1} s",
            heading.to_degrees(),
            nominal.wall
        ),
    )
}

fn collision_freedom(runs: &[Run]) -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for r in runs {
        let report = check_collision_free(
            &r.log,
            &r.scenario.map,
            &Footprint::from_params(&r.scenario.params),
        );
        ok &= report.violations == 0;
        detail.push(format!("{} {}", r.scenario.name, report.violations));
    }
    outcome(ok, format!("violations: {}", detail.join(", ")))
}

/// Worst bound excess of a plan at its collocation nodes, where the speed
/// and thrust constraints are imposed, in the units of the softened rows
/// (thrust as `|f|^2 / f_max^2 - 1`).
fn plan_bound_excess(traj: &PlannedTrajectory, spec: &DockingSpec) -> f64 {
    let h = traj.horizon / spec.intervals as f64;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..=spec.intervals {
        let x = traj.state_at(traj.t0 + i as f64 * h);
        for c in 0..3 {
            worst = worst.max(x[3 + c].abs() - spec.velocity_bounds[c]);
        }
        if i < spec.intervals {
            let u = ThrusterForces::from_vector(&traj.input_at(traj.t0 + (i as f64 + 0.5) * h));
            for n in u.norms() {
                worst = worst.max(n * n / (spec.f_max * spec.f_max) - 1.0);
            }
        }
    }
    worst
}

/// How far the plan's initial state, which is the measured state, already
/// violates the speed bounds or the region. Positive values force slack.
fn initial_infeasibility(
    traj: &PlannedTrajectory,
    region: &ConvexRegion,
    spec: &DockingSpec,
    params: &ModelParams,
) -> f64 {
    let x = traj.state_at(traj.t0);
    let speed = (0..3)
        .map(|c| x[3 + c].abs() - spec.velocity_bounds[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let pose = Pose::new(x[0], x[1], x[2]);
    let outside = footprint_vertices(&pose, &Footprint::from_params(params))
        .iter()
        .map(|c| region.max_violation(c))
        .fold(f64::NEG_INFINITY, f64::max);
    speed.max(outside)
}

/// Solves made before any closed-loop disturbance, from rest, must need no
/// slack; every accepted plan must respect the bounds up to its slack.
/// Replans start from the measured state, so tracking error can force slack
/// there; those are counted but not gated.
fn plan_constraints(runs: &[Run]) -> Outcome {
    let mut nominal_slack: f64 = 0.0;
    let mut beyond_slack = f64::NEG_INFINITY;
    let (mut replans, mut softened, mut infeasible_start) = (0, 0, 0);
    let mut replan_slack: f64 = 0.0;
    for r in runs {
        let s = &r.scenario;
        for p in &r.log.plans {
            let slack = p.trajectory.slack_summary.max();
            beyond_slack = beyond_slack.max(plan_bound_excess(&p.trajectory, &s.spec) - slack);
            if p.trajectory.t0 == 0.0 {
                nominal_slack = nominal_slack.max(slack);
                continue;
            }
            replans += 1;
            if slack > 1e-6 {
                softened += 1;
                replan_slack = replan_slack.max(slack);
                if initial_infeasibility(&p.trajectory, &p.region, &s.spec, &s.params) > 0.0 {
                    infeasible_start += 1;
                }
            }
        }
    }
    outcome(
        nominal_slack <= 1e-6 && beyond_slack <= 1e-6,
        format!(
            "{} solves from rest, max slack {nominal_slack:.1e}; worst bound excess beyond slack {beyond_slack:.1e}; \
             informational: {softened} of {replans} replans softened (max slack {replan_slack:.2}), \
             {infeasible_start} of them from a measured state already outside the bounds",
            runs.len()
        ),
    )
}

fn collocation_defects(runs: &[Run]) -> Outcome {
    let accepted: Vec<f64> = runs
        .iter()
        .flat_map(|r| {
            r.log
                .events
                .iter()
                .filter(|e| e.accepted)
                .map(|e| e.max_defect)
        })
        .collect();
    let worst = accepted.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-6,
        format!(
            "{} accepted solutions, max defect {worst:.2e}",
            accepted.len()
        ),
    )
}

fn random_point(ocp: &DockingOcp, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = ocp.initial_guess(0.0, None);
    for i in 0..=ocp.intervals() {
        let points = if i == ocp.intervals() { 1 } else { 4 };
        for k in 0..points {
            let idx = ocp.state_index(i, k);
            x[idx] = rng.random_range(-40.0..0.0);
            x[idx + 1] = rng.random_range(-10.0..10.0);
            x[idx + 2] = rng.random_range(-PI..PI);
            x[idx + 3] = rng.random_range(-1.2..1.2);
            x[idx + 4] = rng.random_range(-1.2..1.2);
            x[idx + 5] = rng.random_range(-0.1..0.1);
        }
        if i < ocp.intervals() {
            let idx = ocp.input_index(i);
            for c in 0..4 {
                x[idx + c] = rng.random_range(-500.0..500.0);
            }
        }
    }
    for q in 0..ocp.num_slacks() {
        x[ocp.slack_index(q)] = rng.random_range(0.0..1.0);
    }
    x
}

fn derivative_check(nominal: &Scenario) -> Outcome {
    let goal = nominal.spec.docking_pose;
    let region = extract_convex_region_toward(
        &nominal.map,
        &nominal.initial.pose.position(),
        Some(&goal.position()),
        8,
    )
    .unwrap();
    let ocp = build_ocp(&nominal.initial, &region, &nominal.spec, &nominal.params).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(nominal.seed);
    let mut worst: f64 = 0.0;
    let mut undeclared = 0;
    for trial in 0..10 {
        let x = random_point(&ocp, &mut rng);
        let report = check_derivatives(&ocp, &x, trial).unwrap();
        worst = worst.max(report.max_relative_error());
        undeclared +=
            report.eq_jacobian.undeclared_nonzeros + report.ineq_jacobian.undeclared_nonzeros;
    }
    outcome(
        worst <= 1e-5 && undeclared == 0,
        format!(
            "N = {}, {} variables, 10 points, max relative error {worst:.2e}, undeclared nonzeros {undeclared}",
            ocp.intervals(),
            ocp.num_variables()
        ),
    )
}

struct Quadratic;

const Q: [[f64; 3]; 3] = [[4.0, 1.0, 0.0], [1.0, 3.0, -0.5], [0.0, -0.5, 2.0]];
const C: [f64; 3] = [-1.0, 2.0, 0.5];

impl NlpProblem for Quadratic {
    fn num_variables(&self) -> usize {
        3
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (0..3)
            .map(|i| C[i] * x[i] + (0..3).map(|j| 0.5 * x[i] * Q[i][j] * x[j]).sum::<f64>())
            .sum()
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        for i in 0..3 {
            g[i] = C[i] + (0..3).map(|j| Q[i][j] * x[j]).sum::<f64>();
        }
    }
    fn hessian_blocks(&self) -> Vec<Vec<usize>> {
        vec![vec![0, 1, 2]]
    }
    fn hessian_block_values(
        &self,
        _x: &[f64],
        w: f64,
        _: &[f64],
        _: &[f64],
        blocks: &mut [DMatrix<f64>],
    ) {
        blocks[0] = DMatrix::from_fn(3, 3, |i, j| w * Q[i][j]);
    }
}

struct Rosenbrock;

impl NlpProblem for Rosenbrock {
    fn num_variables(&self) -> usize {
        2
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
        g[1] = 200.0 * (x[1] - x[0] * x[0]);
    }
    fn hessian_blocks(&self) -> Vec<Vec<usize>> {
        vec![vec![0, 1]]
    }
    fn hessian_block_values(
        &self,
        x: &[f64],
        w: f64,
        _: &[f64],
        _: &[f64],
        blocks: &mut [DMatrix<f64>],
    ) {
        let off = -400.0 * x[0] * w;
        blocks[0] = DMatrix::from_row_slice(
            2,
            2,
            &[
                w * (2.0 - 400.0 * x[1] + 1200.0 * x[0] * x[0]),
                off,
                off,
                w * 200.0,
            ],
        );
    }
}

/// min (x - 2)^2 + (y - 1)^2 + z^2  s.t.  x + y <= 2,  y - z = 0.
/// By hand: the inequality is active, x = 5/3, y = z = 1/3, and both
/// multipliers are 2/3.
struct KktQp;

impl NlpProblem for KktQp {
    fn num_variables(&self) -> usize {
        3
    }
    fn num_eq(&self) -> usize {
        1
    }
    fn num_ineq(&self) -> usize {
        1
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2) + x[2] * x[2]
    }
    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        g[0] = 2.0 * (x[0] - 2.0);
        g[1] = 2.0 * (x[1] - 1.0);
        g[2] = 2.0 * x[2];
    }
    fn eq_constraints(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1] - x[2];
    }
    fn eq_jacobian_structure(&self) -> Vec<(usize, usize)> {
        vec![(0, 1), (0, 2)]
    }
    fn eq_jacobian_values(&self, _x: &[f64], v: &mut [f64]) {
        v.copy_from_slice(&[1.0, -1.0]);
    }
    fn ineq_constraints(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0] + x[1] - 2.0;
    }
    fn ineq_jacobian_structure(&self) -> Vec<(usize, usize)> {
        vec![(0, 0), (0, 1)]
    }
    fn ineq_jacobian_values(&self, _x: &[f64], v: &mut [f64]) {
        v.copy_from_slice(&[1.0, 1.0]);
    }
    fn hessian_blocks(&self) -> Vec<Vec<usize>> {
        vec![vec![0], vec![1], vec![2]]
    }
    fn hessian_block_values(
        &self,
        _x: &[f64],
        w: f64,
        _: &[f64],
        _: &[f64],
        blocks: &mut [DMatrix<f64>],
    ) {
        for b in blocks.iter_mut() {
            b[(0, 0)] = 2.0 * w;
        }
    }
}

fn max_error(x: &[f64], expected: &[f64]) -> f64 {
    x.iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn solver_suite() -> Outcome {
    let opts = SolveOptions::default();
    let q = nalgebra::Matrix3::from_fn(|i, j| Q[i][j]);
    let q_opt = q
        .lu()
        .solve(&-nalgebra::Vector3::from_column_slice(&C))
        .unwrap();
    let quad = solve(&Quadratic, &[5.0, -3.0, 2.0], &opts).unwrap();
    let e_quad = max_error(&quad.x, q_opt.as_slice());

    let mut e_rosen: f64 = 0.0;
    let mut rosen_ok = true;
    for mode in [HessianMode::Exact, HessianMode::DampedBfgs] {
        let res = solve(
            &Rosenbrock,
            &[-1.2, 1.0],
            &SolveOptions {
                hessian_mode: mode,
                ..opts.clone()
            },
        )
        .unwrap();
        rosen_ok &= res.converged();
        e_rosen = e_rosen.max(max_error(&res.x, &[1.0, 1.0]));
    }

    let kkt = solve(&KktQp, &[0.0, 0.0, 0.0], &opts).unwrap();
    let third = 1.0 / 3.0;
    let e_kkt = max_error(&kkt.x, &[5.0 * third, third, third])
        .max((kkt.lambda_ineq[0] - 2.0 * third).abs())
        .max((kkt.lambda_eq[0] - 2.0 * third).abs());

    let ok = quad.converged()
        && rosen_ok
        && kkt.converged()
        && e_quad <= 1e-6
        && e_rosen <= 1e-6
        && e_kkt <= 1e-6;
    outcome(
        ok,
        format!("errors: quadratic {e_quad:.1e}, Rosenbrock {e_rosen:.1e}, KKT QP {e_kkt:.1e}"),
    )
}

fn cost_values() -> Outcome {
    let params = ModelParams::default();
    let goal = Pose::new(-0.5, 0.0, 0.3);
    let spec = DockingSpec::new(goal, &params);
    let huber = pseudo_huber(&Vector2::new(10.0, 0.0), 10.0);
    let e_huber = (huber - 100.0 * (2f64.sqrt() - 1.0)).abs();
    let zero = ThrusterForces::default();
    let flipped = VesselState::at_rest(Pose::new(goal.north, goal.east, goal.heading + PI));
    let heading = cost_to_go(&flipped, &zero, &spec, &params);
    let at_goal = cost_to_go(&VesselState::at_rest(goal), &zero, &spec, &params);
    outcome(
        e_huber <= 1e-9 && heading == 40.0 && at_goal == 0.0,
        format!("pseudo-Huber error {e_huber:.1e}, heading term at pi {heading}, cost at goal {at_goal}"),
    )
}

fn anti_windup(runs: &[Run]) -> Outcome {
    let limit = runs[0].scenario.gains.antiwindup_limit;
    let mut worst = [0.0f64; 3];
    for r in runs {
        let m = r.log.max_abs_integral();
        for i in 0..3 {
            worst[i] = worst[i].max(m[i]);
        }
    }
    outcome(
        (0..3).all(|i| worst[i] <= limit[i]),
        format!(
            "max |I| = ({:.1}, {:.1}, {:.1}) vs limit {limit:?}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn determinism(first: &Run) -> Outcome {
    let second = run_timed(first.scenario.clone());
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (r, dir) in [first, &second].into_iter().zip(&dirs) {
        write_outputs(&r.log, &summarize(&r.log, &r.scenario), dir.path()).unwrap();
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("runlog.csv")).unwrap();
    let (a, b) = (read(&dirs[0]), read(&dirs[1]));
    outcome(
        a == b && !a.is_empty(),
        format!("runlog.csv {} bytes, identical: {}", a.len(), a == b),
    )
}

fn solve_times(runs: &[Run]) -> Outcome {
    let times: Vec<f64> = runs
        .iter()
        .flat_map(|r| {
            r.log
                .events
                .iter()
                .filter(|e| e.accepted)
                .map(|e| e.solve_time)
        })
        .collect();
    let stats = SolveTimeStats::from_times(&times, 0.1);
    outcome(
        stats.max <= 2.0,
        format!(
            "{} solves, min {:.2} s, mean {:.2} s, max {:.2} s, histogram (0.1 s bins) {:?}",
            stats.count, stats.min, stats.mean, stats.max, stats.histogram
        ),
    )
}

fn goal_inside_obstacle(nominal: &Scenario) -> Outcome {
    // berth side-on, 0.2 m inside the north quay face
    let goal = Pose::new(3.2, 0.0, FRAC_PI_2);
    let spec = DockingSpec {
        docking_pose: goal,
        ..nominal.spec.clone()
    };
    let start = VesselState::at_rest(Pose::new(-15.0, 0.0, 0.0));
    let region = extract_convex_region_toward(
        &nominal.map,
        &start.pose.position(),
        Some(&goal.position()),
        8,
    )
    .unwrap();
    let traj = match plan(&start, 0.0, &region, &spec, &nominal.params, None) {
        Ok(t) => t,
        Err(e) => return outcome(false, format!("planner failed: {e}")),
    };
    let end = traj.final_pose();
    let footprint = Footprint::from_params(&nominal.params);
    let boundary_gap = footprint_vertices(&end, &footprint)
        .iter()
        .map(|c| region.max_violation(c))
        .fold(f64::NEG_INFINITY, f64::max);
    let distance = (end.position() - goal.position()).norm();
    let slack = traj.slack_summary.max();
    outcome(
        slack <= 1e-6 && boundary_gap.abs() <= 1e-3 && distance <= 2.0,
        format!("slack {slack:.1e}, footprint to boundary {boundary_gap:.1e} m, distance to requested pose {distance:.2} m"),
    )
}

fn main() {
    let runs = closed_loop_runs();
    let nominal = &runs[0];
    let results = [
        ("nominal docking", nominal_docking(nominal)),
        ("collision freedom", collision_freedom(&runs)),
        ("plan constraint satisfaction", plan_constraints(&runs)),
        ("collocation defects", collocation_defects(&runs)),
        (
            "derivative correctness",
            derivative_check(&nominal.scenario),
        ),
        ("solver unit suite", solver_suite()),
        ("cost function values", cost_values()),
        ("anti-windup", anti_windup(&runs)),
        ("determinism", determinism(nominal)),
        ("solve time", solve_times(&runs)),
        (
            "goal inside obstacle",
            goal_inside_obstacle(&nominal.scenario),
        ),
    ];
    for (k, (name, o)) in results.iter().enumerate() {
        println!(
            "{} criterion {:2} {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            k + 1,
            o.detail
        );
    }
    let failed: Vec<usize> = (0..results.len())
        .filter(|&k| !results[k].1.passed)
        .map(|k| k + 1)
        .collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
