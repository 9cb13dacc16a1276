//! End-to-end command tests: exit codes, file outputs, and the report
//! verifier's tamper detection.

use std::path::Path;
use std::process::{Command, Output};

fn shiftcp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftcp"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn help_exits_zero() {
    let out = shiftcp(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for subcommand in ["synth", "fit", "run", "report"] {
        assert!(text.contains(subcommand), "help lost {subcommand}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(shiftcp(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        shiftcp(&["run", "--task", "nosuch"]).status.code(),
        Some(2),
        "unknown task is a usage error"
    );
    assert_eq!(
        shiftcp(&["run", "--alphas", "0.5,abc"]).status.code(),
        Some(2),
        "unparseable level grid is a usage error"
    );
    // A syntactically fine but semantically invalid configuration is a
    // runtime error, since the same value could come from a config file.
    assert_eq!(
        shiftcp(&["run", "--alphas", "0.5,0.2"]).status.code(),
        Some(1),
        "non-increasing level grid fails validation"
    );
}

#[test]
fn synth_writes_csv_and_prints_truth() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("world.csv");
    let out = shiftcp(&[
        "synth",
        "--task",
        "traffic",
        "--n-days",
        "2",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let truth: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(truth.get("diffusion_bias").is_some());
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("timestamp,node_id,upstream_id,downstream_id,speed,volume")
    );
    // Three sensors per slot, 2 days of 288 slots, plus the header.
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 288);
}

#[test]
fn fit_reports_parameters_per_model() {
    let out = shiftcp(&["fit", "--task", "epidemic", "--n-years", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for model in ["sir", "sis"] {
        let entry = report.get(model).unwrap_or_else(|| panic!("no {model} entry"));
        assert!(entry.get("parameters").is_some());
    }
}

#[test]
fn report_verifies_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("reports");
    let run = shiftcp(&[
        "run",
        "--task",
        "epidemic",
        "--n-years",
        "8",
        "--seeds",
        "0,1",
        "--alphas",
        "0.2,0.5,0.8",
        "--bandwidths",
        "0.3,0.8",
        "--folds",
        "3",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));

    let ok = shiftcp(&["report", "--dir", out_dir.to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("matches"));

    tamper_first_value(&out_dir.join("summary.csv"));
    let bad = shiftcp(&["report", "--dir", out_dir.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1), "tampered summary must fail verification");
    assert!(String::from_utf8_lossy(&bad.stderr).contains("mismatch"));
}

/// Nudge the first numeric summary cell so the verifier must notice.
fn tamper_first_value(summary: &Path) {
    let text = std::fs::read_to_string(summary).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let cells: Vec<&str> = lines[1].split(',').collect();
    let tweaked: f64 = cells[2].parse::<f64>().unwrap() + 0.001;
    let mut new_cells: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
    new_cells[2] = tweaked.to_string();
    lines[1] = new_cells.join(",");
    std::fs::write(summary, lines.join("\n") + "\n").unwrap();
}
