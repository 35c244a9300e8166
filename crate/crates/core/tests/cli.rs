//! The `shadow-sim` binary: outputs and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shadow_core::harness::{csv_header, Calibration, RunReport};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadow-sim")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn path(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn write_calibration(dir: &tempfile::TempDir, text: &str) -> String {
    let p = path(dir, "cal.txt");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn run_writes_report_and_probe_trace() {
    let dir = tempfile::tempdir().unwrap();
    let (out, probe) = (path(&dir, "r.json"), path(&dir, "probe.csv"));
    let o = sim(&["run", "--config", "SS-Seq", "--rate", "10", "--seed", "4", "--out", &out, "--probe-csv", &probe]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: RunReport = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.seed, 4);
    assert!(report.clean());
    let raw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let spec = &raw["migration"]["spec"];
    for key in ["sourcePod", "targetNode", "migrationStrategy", "transferMode", "messageQueueConfig", "replayCutoffSeconds"] {
        assert!(!spec[key].is_null(), "missing {key}");
    }
    let trace = fs::read_to_string(&probe).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("time_s,up"));
    assert!(lines.clone().any(|l| l.ends_with(",0")));
    assert!(lines.all(|l| l.ends_with(",0") || l.ends_with(",1")));
}

#[test]
fn cutoff_flag_caps_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(&dir, "r.json");
    let o = sim(&["run", "--config", "SS-Seq", "--rate", "60", "--cutoff", "30", "--out", &out]);
    assert_eq!(code(&o), 0);
    let report: RunReport = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.timing(shadow_core::reconciler::Phase::Replaying), 30.0);
}

#[test]
fn matrix_writes_csv_and_report_reads_json() {
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = (path(&dir, "m.json"), path(&dir, "m.csv"));
    let o = sim(&["matrix", "--reps", "2", "--configs", "SS-Seq,D-Reg", "--rates", "10,60", "--parallel", "--out", &json, "--csv", &csv]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next().unwrap(), csv_header().join(","));
    let rows: Vec<&str> = rows.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows[0].starts_with("SS-Seq,10,1,"));
    assert!(rows.iter().all(|r| r.ends_with(",0,0")));

    let o = sim(&["report", &json, "--rate", "10"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Phase breakdown at 10 msg/s"));
    assert!(stdout.contains("D-Reg"));
}

#[test]
fn validate_passes_on_defaults() {
    let o = sim(&["validate"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(stdout.contains("0 checks failed"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn validate_flags_an_off_target_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let cal = write_calibration(&dir, "SS-Seq.restore = 12\n");
    let o = sim(&["validate", "--calibration", &cal]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn failed_run_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cal = write_calibration(&dir, "max_time = 8\n");
    let o = sim(&["run", "--config", "SS-Seq", "--calibration", &cal]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_calibration_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cal = write_calibration(&dir, "mu = 84\nwarmup: 5\n");
    let o = sim(&["run", "--calibration", &cal]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    let o = sim(&["run", "--calibration", &path(&dir, "absent.txt")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn printed_calibration_round_trips() {
    let o = sim(&["calibration"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(Calibration::parse(&text).unwrap(), Calibration::default());
    assert!(Path::new(env!("CARGO_BIN_EXE_shadow-sim")).exists());
}
