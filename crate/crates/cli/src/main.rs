//! `dock`: run docking scenarios, solve single plans and check harbor maps.
//!
//! Exit status is 0 on success, 1 when a run misses its acceptance
//! thresholds (or a plan does not converge), and 2 on invalid input.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dock_core::ocp::plan_with_options;
use dock_core::sim::{
    planning_region, random_start, run, solve_options, summarize, write_outputs, RunSummary,
    Scenario, StartBox,
};
use dock_core::HarborMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dock",
    version,
    about = "Autonomous docking planner and closed-loop simulator"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop scenario and write runlog.csv, plans/, events.json and summary.json.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the simulated duration in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Load a harbor map, fix polygon winding and report what was found.
    ValidateMap { map: PathBuf },
    /// Solve one plan from the scenario's initial state and write it as CSV.
    PlanOnce {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the solver iteration log as CSV.
        #[arg(long)]
        iterations: Option<PathBuf>,
    },
    /// Run several scenarios, optionally each from seeded random start poses.
    Sweep {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of random start poses per scenario; 0 runs each scenario as written.
        #[arg(long, default_value_t = 0)]
        random_starts: usize,
        /// Seed for drawing start poses; defaults to the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain joined by colons, skipping causes whose text the
/// previous message already contains.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::Run {
            scenario,
            out,
            seed,
            duration,
        } => {
            let mut s = load_scenario(&scenario)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(d) = duration {
                s.duration = d;
            }
            let summary = run_and_write(&s, &out)?;
            print_summary(&summary);
            Ok(summary.passed)
        }
        Command::ValidateMap { map } => {
            let (map, report) =
                HarborMap::load(&map).with_context(|| format!("loading {}", map.display()))?;
            println!(
                "{}: {} polygons, {:.1} m^2 of obstacles",
                map.name, report.polygon_count, report.total_area
            );
            for p in &report.polygons {
                let note = if p.winding_reversed {
                    " (winding reversed)"
                } else {
                    ""
                };
                println!(
                    "  {}: {} vertices, {:.1} m^2{note}",
                    p.name, p.vertex_count, p.area
                );
            }
            Ok(true)
        }
        Command::PlanOnce {
            scenario,
            out,
            iterations,
        } => plan_once(&scenario, &out, iterations.as_deref()),
        Command::Sweep {
            scenarios,
            out,
            random_starts,
            seed,
        } => sweep(&scenarios, &out, random_starts, seed),
    }
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let s = Scenario::load(path).with_context(|| format!("loading scenario {}", path.display()))?;
    s.validate()
        .with_context(|| format!("scenario {}", path.display()))?;
    Ok(s)
}

fn run_and_write(s: &Scenario, out: &Path) -> Result<RunSummary> {
    let log = run(s)?;
    let summary = summarize(&log, s);
    write_outputs(&log, &summary, out)
        .with_context(|| format!("writing outputs to {}", out.display()))?;
    Ok(summary)
}

fn print_summary(s: &RunSummary) {
    println!(
        "{}: final error {:.3} m / {:.2} deg, {} collision violations, {}/{} plans accepted, solve time {:.2}/{:.2}/{:.2} s (min/mean/max) -> {}",
        s.scenario,
        s.final_position_error,
        s.final_heading_error_deg,
        s.collision.violations,
        s.plans_accepted,
        s.plans_attempted,
        s.solve_time.min,
        s.solve_time.mean,
        s.solve_time.max,
        if s.passed { "PASS" } else { "FAIL" }
    );
}

fn plan_once(path: &Path, out: &Path, iterations: Option<&Path>) -> Result<bool> {
    let s = load_scenario(path)?;
    let region = planning_region(&s, &s.initial.pose.position())?;
    let (traj, converged) = match plan_with_options(
        &s.initial,
        0.0,
        &region,
        &s.spec,
        &s.params,
        None,
        &solve_options(&s),
    ) {
        Ok(t) => (t, true),
        Err(dock_core::PlanError::SolverNotConverged { best, .. }) => (*best, false),
        Err(e) => return Err(e.into()),
    };
    std::fs::write(out, traj.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = iterations {
        let mut w =
            csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        for r in &traj.solve_stats.log {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    let end = traj.final_pose();
    let stats = &traj.solve_stats;
    println!(
        "{:?} after {} iterations in {:.3} s; objective {:.4}, max slack {:.2e}, max defect {:.2e}; final pose ({:.3}, {:.3}, {:.2} deg)",
        stats.status,
        stats.iterations,
        stats.solve_time,
        stats.objective,
        traj.slack_summary.max(),
        stats.max_defect,
        end.north,
        end.east,
        end.heading.to_degrees()
    );
    Ok(converged)
}

#[derive(Serialize)]
struct SweepRow {
    scenario: String,
    start_north: f64,
    start_east: f64,
    start_heading_deg: f64,
    final_position_error: f64,
    final_heading_error_deg: f64,
    collision_violations: usize,
    plans_accepted: usize,
    plans_attempted: usize,
    mean_solve_time: f64,
    max_solve_time: f64,
    max_slack: f64,
    passed: bool,
}

fn sweep(paths: &[PathBuf], out: &Path, random_starts: usize, seed: Option<u64>) -> Result<bool> {
    let mut cases = Vec::new();
    for path in paths {
        let s = load_scenario(path)?;
        if random_starts == 0 {
            cases.push(s);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(s.seed));
        for k in 0..random_starts {
            let mut c = s.clone();
            c.name = format!("{}_start_{k}", s.name);
            c.initial = random_start(
                &s.map,
                &s.spec.docking_pose,
                &s.params,
                &s.planner,
                &StartBox::default(),
                &mut rng,
            )
            .with_context(|| format!("no admissible start pose for {}", s.name))?;
            cases.push(c);
        }
    }
    std::fs::create_dir_all(out)?;
    let table = out.join("sweep.csv");
    let mut w =
        csv::Writer::from_path(&table).with_context(|| format!("writing {}", table.display()))?;
    let mut passed = 0;
    for c in &cases {
        let summary = run_and_write(c, &out.join(&c.name))?;
        print_summary(&summary);
        passed += usize::from(summary.passed);
        let p = c.initial.pose;
        w.serialize(SweepRow {
            scenario: c.name.clone(),
            start_north: p.north,
            start_east: p.east,
            start_heading_deg: p.heading.to_degrees(),
            final_position_error: summary.final_position_error,
            final_heading_error_deg: summary.final_heading_error_deg,
            collision_violations: summary.collision.violations,
            plans_accepted: summary.plans_accepted,
            plans_attempted: summary.plans_attempted,
            mean_solve_time: summary.solve_time.mean,
            max_solve_time: summary.solve_time.max,
            max_slack: summary.max_slack,
            passed: summary.passed,
        })?;
    }
    w.flush()?;
    println!("{passed} of {} runs passed", cases.len());
    Ok(passed == cases.len())
}
