use std::path::Path;
use std::process::{Command, Output};

use m3_core::tensor_file::write_grid;
use m3_core::token_pyramid::TokenGrid;

fn m3(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3")).args(args).current_dir(dir).output().expect("spawn m3")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(m3(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(m3(&["no-such-command"], dir.path()).status.code(), Some(1));
    assert_eq!(m3(&["budget"], dir.path()).status.code(), Some(1));
}

#[test]
fn pyramid_schedule_and_scale_files() {
    let dir = tempfile::tempdir().unwrap();
    let grid = TokenGrid::<f32>::filled(12, 12, 3, 0.25).unwrap();
    write_grid(&dir.path().join("g.bin"), &grid).unwrap();
    let o = m3(&["pyramid", "g.bin", "--schedule-only"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "[1,9,36,144]");

    let o = m3(&["pyramid", "g.bin", "--out-dir", "scales"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for n in [1, 9, 36, 144] {
        assert!(dir.path().join(format!("scales/scale_{n}.bin")).exists());
    }
}

#[test]
fn pyramid_rejects_odd_grid_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let grid = TokenGrid::<f32>::filled(10, 10, 1, 1.0).unwrap();
    write_grid(&dir.path().join("odd.bin"), &grid).unwrap();
    let o = m3(&["pyramid", "odd.bin"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = m3(&["pyramid", "absent.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn roofline_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = m3(&["roofline", "--table", "576,1"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tokens,flops_tb,prefill_time_ms,total_memory_gb,storing_activation_gb");
    assert!(lines[1].starts_with("576,"));
    assert!(lines[2].starts_with("1,"));
    assert_eq!(m3(&["roofline"], dir.path()).status.code(), Some(1));
}

#[test]
fn budget_allocations() {
    let dir = tempfile::tempdir().unwrap();
    let o = m3(&["budget", "--budget", "2880"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("units,tokens_per_unit\n"));
    assert!(text.lines().any(|l| l == "2880,1"));
    assert!(text.lines().any(|l| l == "5,576"));
}

#[test]
fn oracle_report_from_matrix() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.csv"), "sample_id,1,9,36\na,0,1,1\nb,0,0,0\n").unwrap();
    let o = m3(&["oracle", "--matrix", "m.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["oracle_accuracy"], 0.5);
    assert_eq!(v["mean_tokens"], 5.0);
}

#[test]
fn bad_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let o = m3(&["--config", "c.toml", "run", "--dry-run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(dir.path().join("c.toml"), "[train]\nunknown_key = 1\n").unwrap();
    assert_eq!(m3(&["--config", "c.toml", "run", "--dry-run"], dir.path()).status.code(), Some(1));
}

#[test]
fn dry_run_prints_plan() {
    let dir = tempfile::tempdir().unwrap();
    let o = m3(&["--seed", "3", "run", "--dry-run"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["stages"].as_array().unwrap().len(), 5);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}
