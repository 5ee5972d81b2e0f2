use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(path: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(path)
}

fn dock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dock"))
        .args(args)
        .output()
        .unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A copy of the nominal scenario in `dir` with another duration and a
/// solve-time limit loose enough for tests running in parallel.
fn scenario_copy(dir: &Path, name: &str, duration: f64) -> PathBuf {
    let text = std::fs::read_to_string(data("scenarios/nominal.json")).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["map"] = arg(&data("harbor.json")).into();
    json["params"] = arg(&data("params.json")).into();
    json["duration"] = duration.into();
    json["name"] = name.into();
    json["acceptance"] = serde_json::json!({"position_tolerance": 0.5, "heading_tolerance_deg": 5.0, "max_solve_time": 30.0});
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, json.to_string()).unwrap();
    path
}

#[test]
fn validate_map_reports_polygons() {
    let out = dock(&["validate-map", arg(&data("harbor.json"))]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("4 polygons"), "{stdout}");
    assert!(stdout.contains("islet: 6 vertices"));
}

#[test]
fn bad_input_exits_with_two() {
    let out = dock(&["validate-map", "no/such/map.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error: "));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"name": "bad", "map": "x.json", "docking_pose": {"north": 0, "east": 0}, "bogus": 1}"#,
    )
    .unwrap();
    let out = dock(&["run", arg(&bad), "--out", arg(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nominal_run_passes_and_writes_the_documented_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_copy(dir.path(), "nominal", 180.0);
    let out = dock(&["run", arg(&scenario), "--out", arg(dir.path())]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["passed"], true);
    assert_eq!(summary["collision"]["violations"], 0);
    for key in ["min", "mean", "max", "histogram"] {
        assert!(!summary["solve_time"][key].is_null(), "{key}");
    }
    let runlog = std::fs::read_to_string(dir.path().join("runlog.csv")).unwrap();
    let header = runlog.lines().next().unwrap();
    assert_eq!(header, dock_core::sim::RUNLOG_COLUMNS);
    assert_eq!(runlog.lines().count(), 1 + 1801);
    let events: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("events.json")).unwrap())
            .unwrap();
    let plans = events.as_array().unwrap().len();
    for k in 0..plans {
        assert!(dir
            .path()
            .join("plans")
            .join(format!("plan_{k}.csv"))
            .exists());
    }
}

#[test]
fn unfinished_run_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dock(&[
        "run",
        arg(&data("scenarios/nominal.json")),
        "--out",
        arg(dir.path()),
        "--duration",
        "15",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn plan_once_dumps_trajectory_and_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("plan.csv");
    let iters = dir.path().join("iterations.csv");
    let out = dock(&[
        "plan-once",
        arg(&data("scenarios/nominal.json")),
        "--out",
        arg(&traj),
        "--iterations",
        arg(&iters),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .starts_with("Converged"));
    let text = std::fs::read_to_string(&traj).unwrap();
    assert_eq!(text.lines().count(), 1 + 1201);
    let last: Vec<f64> = text
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(last[0], 120.0);
    assert!(
        (last[1] + 0.5).abs() < 0.05 && last[2].abs() < 0.05,
        "{last:?}"
    );
    let log = std::fs::read_to_string(&iters).unwrap();
    assert!(log.starts_with("iteration,objective,constraint_violation,kkt_residual"));
    assert!(log.lines().count() > 2);
}

#[test]
fn sweep_runs_random_starts_and_tabulates() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_copy(dir.path(), "short", 5.0);
    let out_dir = dir.path().join("sweep");
    let out = dock(&[
        "sweep",
        arg(&scenario),
        "--out",
        arg(&out_dir),
        "--random-starts",
        "2",
        "--seed",
        "3",
    ]);
    // five seconds is not enough to dock
    assert_eq!(out.status.code(), Some(1));
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("scenario,start_north,start_east"));
    assert!(lines[1].starts_with("short_start_0,"));
    assert!(out_dir.join("short_start_1").join("runlog.csv").exists());
}
