use std::path::Path;
use std::process::{Command, Output};

fn crossform(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossform"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["run", "case1_implicit", "--t-end", "0.05"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["completed"], true);
    for ext in ["csv", "effective.toml", "summary.json", "plot.py"] {
        assert!(dir.path().join(format!("case1_implicit.{ext}")).exists(), "{ext}");
    }
    let csv = std::fs::read_to_string(dir.path().join("case1_implicit.csv")).unwrap();
    assert!(csv.starts_with("t_s,inverter,"));
    assert_eq!(csv.lines().count(), 1 + 51);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\nbogus = 1\n").unwrap();
    let o = crossform(dir.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn unknown_scenario_name_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["run", "no_such_case"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn infeasible_setpoint_has_no_operating_point() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.toml");
    std::fs::write(
        &path,
        "name = \"p\"\n[network]\nkind = \"thevenin\"\n[[inverter]]\nforming = \"vsm\"\np_star = 9.0\n",
    )
    .unwrap();
    let o = crossform(dir.path(), &["run", path.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn oversized_step_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["run", "case1_implicit", "--dt", "0.01"]);
    assert_eq!(code(&o), 3);
    // partial results are still written
    assert!(dir.path().join("case1_implicit.csv").exists());
}

#[test]
fn empty_grid_axis_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["sweep", "case2_cross_forming", "--grid", "fault.0.p_star_fault="]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("index,scenario,fault.0.p_star_fault,"));
}

#[test]
fn sweep_runs_grid_points() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(
        dir.path(),
        &["sweep", "case1_implicit", "--t-end", "0.05", "--grid", "inverter.0.i_lim=1.0,1.1", "--name", "s.csv"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn analyze_writes_power_angle_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["analyze", "case2_cross_forming"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("case2_cross_forming.power_angle.csv")).unwrap();
    assert_eq!(table.lines().count(), 182);
    assert!(dir.path().join("case2_cross_forming.analysis.json").exists());
}

#[test]
fn limiters_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["limiters", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report = std::fs::read_to_string(dir.path().join("limiters.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3);
}

#[test]
fn mutation_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["verify", "--filter", "neg_seq.", "--mutate", "mode2-sign"]);
    assert_eq!(code(&o), 5);
    let stdout = String::from_utf8(o.stdout).unwrap();
    let failed: Vec<&str> = stdout.lines().filter(|l| l.contains("\"passed\":false")).collect();
    assert!(failed.iter().any(|l| l.contains("neg_seq.mode2_p_ripple_free")));
}

#[test]
fn list_names_bundled_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossform(dir.path(), &["list"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8(o.stdout).unwrap().lines().any(|l| l == "case4a"));
}
