use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rio_core::eval::Trajectory;

const SHORT: &str = "synthetic.trajectory = straight\nsynthetic.duration = 4\n";

fn rio(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rio"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn rio")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("short.cfg"), SHORT).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_all_outputs() {
    let dir = setup();
    let o = rio(&["run", "--config", "short.cfg", "--output-dir", "out"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in ["trajectory.tum", "map.xyz", "timing.csv", "graph.g2o", "metrics.txt", "ground_truth.tum"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let traj = Trajectory::load_tum(&out.join("trajectory.tum")).unwrap();
    assert!(traj.len() >= 2);
    let timing = fs::read_to_string(out.join("timing.csv")).unwrap();
    assert!(timing.starts_with("stage,"));
    assert!(timing.contains("pose_graph"));
    assert!(stdout(&o).contains("ate_rmse_m"));
}

#[test]
fn identical_seeds_give_identical_files() {
    let dir = setup();
    for out in ["a", "b"] {
        let o = rio(&["run", "--config", "short.cfg", "--seed", "5", "--output-dir", out], dir.path());
        assert!(o.status.success());
    }
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "trajectory.tum"), read("b", "trajectory.tum"));
    assert_eq!(read("a", "graph.g2o"), read("b", "graph.g2o"));
}

#[test]
fn simulate_then_replay_from_files() {
    let dir = setup();
    let o = rio(&["simulate", "--config", "short.cfg", "--output-dir", "sim"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sim = dir.path().join("sim");
    assert!(sim.join("radar_manifest.txt").is_file());
    assert!(sim.join("imu.txt").is_file());
    let o = rio(&["run", "--config", "sim/replay.cfg", "--output-dir", "replay"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("replay/metrics.txt")).unwrap();
    let ate: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("ate_rmse_m = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ate < 0.05, "replayed ATE {ate}");
}

#[test]
fn evaluate_reports_rigid_offset() {
    let dir = setup();
    let gt = "0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n2 2 0 0 0 0 0 1\n";
    let est = "0 1 0 0 0 0 0 1\n1 2 0 0 0 0 0 1\n2 3 0 0 0 0 0 1\n";
    fs::write(dir.path().join("gt.tum"), gt).unwrap();
    fs::write(dir.path().join("est.tum"), est).unwrap();
    let args = |align| ["evaluate", "--estimate", "est.tum", "--ground-truth", "gt.tum", "--alignment", align];
    let none = stdout(&rio(&args("none"), dir.path()));
    assert!(none.contains("ate_rmse_m = 1.000000"), "{none}");
    let se3 = stdout(&rio(&args("se3"), dir.path()));
    assert!(se3.contains("ate_rmse_m = 0.000000"), "{se3}");
}

#[test]
fn segment_ground_labels_every_point() {
    let dir = setup();
    let o = rio(
        &["segment-ground", "--config", "short.cfg", "--index", "2", "--output-dir", "seg"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("seg/segments.txt")).unwrap();
    let n = text.lines().count();
    assert!(n > 0);
    assert!(text.lines().all(|l| l.ends_with(" ground") || l.ends_with(" static") || l.ends_with(" noise")));
    assert!(text.lines().any(|l| l.ends_with(" ground")));
    assert!(stdout(&o).contains(&format!("points = {n}")));
}

#[test]
fn plot_data_writes_series() {
    let dir = setup();
    assert!(rio(&["run", "--config", "short.cfg", "--output-dir", "out"], dir.path()).status.success());
    let o = rio(
        &["plot-data", "out/trajectory.tum", "out/ground_truth.tum", "--output-dir", "plots"],
        dir.path(),
    );
    assert!(o.status.success());
    let plots = dir.path().join("plots");
    assert!(plots.join("trajectory_elevation.csv").is_file());
    assert!(plots.join("elevation_comparison.csv").is_file());
}

#[test]
fn exit_codes() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "no.such.key = 1\n").unwrap();
    assert_eq!(rio(&["run", "--config", "bad.cfg"], dir.path()).status.code(), Some(2));
    assert_eq!(rio(&["run", "--config", "missing.cfg"], dir.path()).status.code(), Some(2));
    assert_eq!(rio(&["run", "--integration", "rk4"], dir.path()).status.code(), Some(2));
    let o = rio(&["evaluate", "--estimate", "nope.tum", "--ground-truth", "nope.tum"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    fs::write(dir.path().join("files.cfg"), "input.source = files\ninput.radar = none.txt\ninput.imu = none.txt\n").unwrap();
    assert_eq!(rio(&["run", "--config", "files.cfg"], dir.path()).status.code(), Some(3));
}
