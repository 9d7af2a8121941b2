use std::path::Path;
use std::process::{Command, Output};

fn delobs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delobs"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DELOBS_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

const SHORT: &str = "[grid]\nhorizon = 8.0\n[schedule]\nswitch1 = 4.0\nswitch2 = 6.0\n";

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SHORT).unwrap();
    let out = delobs(
        &["run", "c.toml", "--output", "out", "--decimate", "100"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8000 / 100 + 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["preset"], "benchmark");
    assert_eq!(summary["channels"].as_array().unwrap().len(), 2);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SHORT).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_delobs"))
        .args(["run", "c.toml"])
        .current_dir(dir.path())
        .env("DELOBS_OUTPUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/summary.json").exists());
}

#[test]
fn sweep_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SHORT).unwrap();
    let out = delobs(
        &[
            "run",
            "c.toml",
            "-o",
            "sw",
            "--sweep",
            "gains.gamma2=1,100",
            "--decimate",
            "1000",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("observer.state_err_final_window_max"));
    let a = "sw/gains.gamma2=1/summary.json";
    let b = "sw/gains.gamma2=100/summary.json";
    let out = delobs(&["compare", a, b, "--json"], dir.path());
    assert!(out.status.success());
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = rows.as_array().unwrap();
    assert!(rows
        .iter()
        .any(|r| r["metric"] == "channel_1.theta_err_final_window_max"));
    assert!(rows.iter().all(|r| r["values"].as_array().unwrap().len() == 2));
}

#[test]
fn compare_needs_two_summaries() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), SHORT).unwrap();
    assert!(delobs(&["run", "c.toml"], dir.path()).status.success());
    let out = delobs(&["compare", "summary.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", "[plant]\nbogus = 1\n", 2),
        (
            "overlap.toml",
            "[plant]\nq = [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 0.0]]]\n",
            3,
        ),
    ];
    for (name, body, code) in cases {
        std::fs::write(dir.path().join(name), body).unwrap();
        let out = delobs(&["run", name], dir.path());
        assert_eq!(out.status.code(), Some(code), "{name}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
    assert_eq!(delobs(&["run", "absent.toml"], dir.path()).status.code(), Some(6));
}
