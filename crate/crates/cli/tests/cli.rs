use std::path::Path;
use std::process::{Command, Output};

fn scontract(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scontract")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn analysis_check_below_achievable_rate_fails_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = scontract(&["check", "--system", "pendulum-cl", "--lambda2", "0.3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let r = report(&out);
    assert_eq!(r["passed"], false);
    let margin: f64 = r["results"]["grid_check_worst_margin"].as_str().unwrap().parse().unwrap();
    assert!(margin < 0.0);
}

#[test]
fn analysis_check_at_loose_rate_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = scontract(&["check", "--system", "pendulum-cl", "--lambda2", "19/20", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn zero_steps_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = scontract(&["simulate", "--system", "pendulum", "--steps", "0", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--steps"));
}

#[test]
fn malformed_config_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "system = \"pendulum\"\nsteps = 5\nlambda2 = \"1/\"\n").unwrap();
    let o = scontract(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn unknown_system_and_bad_flags_are_usage_errors() {
    assert_eq!(code(&scontract(&["check", "--system", "nope", "--lambda2", "0.5"])), 2);
    assert_eq!(code(&scontract(&["simulate", "--bogus"])), 2);
    assert_eq!(code(&scontract(&["simulate", "--system", "pendulum", "--process", "markov:1"])), 2);
}

#[test]
fn written_config_round_trips_and_runs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        "system = \"pendulum-cl\"\nsteps = 30\npaths = 4\nseed = 11\nx0 = [\"pi/4\", 0, \"-1/2\"]\n\n[process]\nkind = \"uniform\"\nlo = \"1\"\nhi = \"3/2\"\n",
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&scontract(&["simulate", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()])), 0);
    let written = a.join("config.toml");
    assert_eq!(code(&scontract(&["simulate", "--config", written.to_str().unwrap(), "--out", b.to_str().unwrap()])), 0);
    let strip_out = |p: &Path| -> String {
        std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with("out =")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(strip_out(&a.join("config.toml")), strip_out(&b.join("config.toml")));
    let ta = std::fs::read_to_string(a.join("trajectories.csv")).unwrap();
    let tb = std::fs::read_to_string(b.join("trajectories.csv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ta.lines().count(), 1 + 4 * 31);
}

#[test]
fn synthesized_controller_feeds_check_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let s = tmp.path().join("s");
    assert_eq!(code(&scontract(&["synth-controller", "--lambda2", "0.9", "--out", s.to_str().unwrap()])), 0);
    let design = s.join("design.json");
    let d: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&design).unwrap()).unwrap();
    assert_eq!(d["kind"], "controller");
    let c = tmp.path().join("c");
    let grid = "-pi:pi:0.1,0,0";
    let o = scontract(&["check", "--design", design.to_str().unwrap(), "--grid", grid, "--out", c.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let v = tmp.path().join("v");
    let o = scontract(&["verify", "--design", design.to_str().unwrap(), "--paths", "200", "--out", v.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(v.join("decay.csv").exists() && v.join("curves.svg").exists());
}

#[test]
fn infeasible_synthesis_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = scontract(&["synth-controller", "--lambda2", "1e-6", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("design.json").exists());
}

#[test]
fn observer_example_produces_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let o = scontract(&["reproduce", "mjs-observer", "--paths", "200", "--grid", "-10:10:0.5,0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    for f in ["report.txt", "report.json", "trajectories.csv", "decay.csv", "curves.svg", "design_common.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn reference_common_gain_fails_its_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = scontract(&[
        "check", "--system", "mjs-observer-error", "--common-gain", "--lambda2", "0.9", "--grid", "-10:10:0.1,0",
        "--out", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn initial_state_flag_matches_config_value() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("flag"), tmp.path().join("file"));
    let cfg = tmp.path().join("x0.toml");
    std::fs::write(&cfg, "x0 = [\"-pi/4\", 0, 0.5]\n").unwrap();
    let common = ["simulate", "--system", "pendulum-cl", "--steps", "20", "--paths", "2", "--seed", "3"];
    let mut with_flag = common.to_vec();
    with_flag.extend(["--x0=-pi/4,0,0.5", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&scontract(&with_flag)), 0);
    let mut with_file = common.to_vec();
    with_file.extend(["--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&scontract(&with_file)), 0);
    let read = |d: &Path| std::fs::read_to_string(d.join("trajectories.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}
