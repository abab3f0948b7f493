use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SYNTHETIC: &str = r#"
seed = 3
mode = "serial"
[data]
format = "synthetic"
features = 6
classes = 3
samples = 40
[network]
hidden_layers = 2
width = 8
[hyper]
rho = 1.0
nu = 0.1
"#;

fn pdadmm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdadmm"))
        .args(args)
        .current_dir(dir)
        .env_remove("PDADMM_THREADS")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn summary(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().next().expect("summary line")).unwrap()
}

#[test]
fn zero_epochs_report_initial_diagnostics() {
    let (dir, _) = setup(SYNTHETIC);
    let out = pdadmm(dir.path(), &["train", "--config", "run.toml", "--epochs", "0", "--metrics", "m.jsonl"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(&out);
    let records = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    assert_eq!(records.lines().count(), 1);
    assert_eq!(s["F"], first["F"]);
    assert_eq!(s["lagrangian"], first["F"]);
    assert_eq!(s["residual_norm_sq_total"], 0.0);
    assert_eq!(s["train_accuracy"], first["train_accuracy"]);
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let (dir, _) = setup(SYNTHETIC);
    for (name, mode) in [("a.jsonl", "serial"), ("b.jsonl", "serial"), ("c.jsonl", "parallel")] {
        let out = pdadmm(
            dir.path(),
            &["train", "--config", "run.toml", "--epochs", "6", "--no-timing", "--mode", mode, "--workers", "3", "--metrics", name],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.jsonl"), read("c.jsonl"));
}

#[test]
fn checkpoint_is_written() {
    let (dir, _) = setup(SYNTHETIC);
    let out = pdadmm(dir.path(), &["train", "--config", "run.toml", "--epochs", "2", "--checkpoint", "model.ckpt"]);
    assert!(out.status.success());
    let file = std::fs::File::open(dir.path().join("model.ckpt")).unwrap();
    let state = pdadmm::checkpoint::read_checkpoint(std::io::BufReader::new(file)).unwrap();
    assert_eq!(state.num_layers(), 3);
}

#[test]
fn invalid_configuration_exits_2() {
    let (dir, _) = setup(&format!("{SYNTHETIC}\nunknown_key = 1\n"));
    let out = pdadmm(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let (dir, _) = setup(SYNTHETIC);
    for args in [
        vec!["train", "--config", "run.toml", "--rho", "-1"],
        vec!["train", "--config", "run.toml", "--mode", "threads"],
        vec!["train", "--config", "run.toml", "--epochs", "many"],
        vec!["train", "--config", "missing.toml"],
    ] {
        assert_eq!(pdadmm(dir.path(), &args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn numeric_abort_exits_3() {
    let (dir, _) = setup(SYNTHETIC);
    let out = pdadmm(dir.path(), &["train", "--config", "run.toml", "--epochs", "3", "--rho", "1e308", "--nu", "1e308"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn workers_fall_back_to_environment() {
    let (dir, _) = setup(&SYNTHETIC.replace("mode = \"serial\"", "mode = \"parallel\""));
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_pdadmm"))
            .args(["train", "--config", "run.toml", "--epochs", "1"])
            .current_dir(dir.path())
            .env("PDADMM_THREADS", threads)
            .output()
            .unwrap()
    };
    assert!(run("2").status.success());
    assert_eq!(run("zero").status.code(), Some(2));
}

#[test]
fn certify_compliant_run_passes() {
    let (dir, _) = setup(SYNTHETIC);
    let out = pdadmm(
        dir.path(),
        &["train", "--config", "run.toml", "--epochs", "30", "--certify", "--no-timing", "--metrics", "m.jsonl"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let out = pdadmm(dir.path(), &["certify", "--metrics", "m.jsonl", "--config", "run.toml"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("PASS sufficient_descent"));
}

#[test]
fn certify_detects_injected_increase() {
    let (dir, _) = setup(SYNTHETIC);
    let out = pdadmm(dir.path(), &["train", "--config", "run.toml", "--epochs", "5", "--metrics", "m.jsonl"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    let mut lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let bumped = lines[2]["lagrangian"].as_f64().unwrap() + 1.0;
    lines[3]["lagrangian"] = bumped.into();
    let corrupted: String = lines.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(dir.path().join("bad.jsonl"), corrupted).unwrap();
    let out = pdadmm(dir.path(), &["certify", "--metrics", "bad.jsonl", "--rho", "1", "--nu", "0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL sufficient_descent"));
}

#[test]
fn certify_rejects_empty_and_malformed_files() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let out = pdadmm(dir.path(), &["certify", "--metrics", "empty.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

    let (dir, _) = setup(SYNTHETIC);
    pdadmm(dir.path(), &["train", "--config", "run.toml", "--epochs", "2", "--metrics", "m.jsonl"]);
    let mut text = std::fs::read_to_string(dir.path().join("m.jsonl")).unwrap();
    text.push_str("{\"epoch\": \"three\"}\n");
    std::fs::write(dir.path().join("m.jsonl"), text).unwrap();
    let out = pdadmm(dir.path(), &["certify", "--metrics", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"));
}

#[test]
fn benchmark_writes_documented_csv() {
    let config = format!(
        "{SYNTHETIC}\n[benchmark]\nlayers = [1, 2]\nwidths = [16]\nworkers = [1]\nsamples = 40\nrepetitions = 3\n"
    );
    let (dir, _) = setup(&config);
    let out = pdadmm(dir.path(), &["benchmark", "--config", "run.toml", "--output", "speedup.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("speedup.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layers,width,workers,samples,serial_mean_s,parallel_mean_s,speedup"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row.len(), 7);
        assert!(row[6] > 0.0 && row[6].is_finite());
    }
}
