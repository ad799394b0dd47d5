use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use capguard::dataset::CSV_HEADER;
use capguard::pipeline::{HyperGrid, PipelineConfig, RunManifest, SelectOn};
use capguard::quantnet::TrainConfig;

fn small_config() -> PipelineConfig {
    PipelineConfig {
        n_segments: 6,
        n_cal: 200,
        n_test: 200,
        n_holdout: 100,
        select_on: SelectOn::Holdout,
        train: TrainConfig {
            max_epochs: 25,
            patience: 10,
            ..TrainConfig::default()
        },
        grid: HyperGrid {
            hidden: vec![vec![16, 16]],
            learning_rate: vec![1e-3, 3e-3],
            batch_size: vec![64],
        },
        ..PipelineConfig::default()
    }
}

fn capguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capguard"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&small_config()).unwrap()).unwrap();
    path
}

fn run_all(dir: &Path) {
    let cfg = write_config(dir);
    let out = dir.join("out");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    for cmd in ["gen-roads", "gen-data", "diagnose", "train", "calibrate", "evaluate", "select", "gate", "report"] {
        let o = capguard(&[cmd, "--config", cfg, "--out", out, "--workers", "1"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

/// One full pipeline shared by the tests below.
fn shared() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        run_all(d.path());
        d
    })
    .path()
}

#[test]
fn dataset_has_exact_header() {
    let csv = std::fs::read_to_string(shared().join("out/dataset.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 23);
    assert_eq!(header, CSV_HEADER);
    assert_eq!(csv.lines().count(), 1 + 6 * 15 * 10);
}

#[test]
fn every_stage_leaves_a_manifest() {
    let dir = shared().join("out/manifests");
    for cmd in ["gen-roads", "gen-data", "diagnose", "train", "calibrate", "evaluate", "select", "gate", "report"] {
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{cmd}.json"))).unwrap()).unwrap();
        assert_eq!(m.command, cmd);
        assert_eq!(m.seed, 42);
        assert!(!m.outputs.is_empty());
        for (path, hash) in &m.outputs {
            let bytes = std::fs::read(shared().join("out").join(path)).unwrap();
            assert_eq!(&capguard::util::sha256_hex(&bytes), hash, "{path}");
        }
    }
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let other = tempfile::tempdir().unwrap();
    run_all(other.path());
    let read = |root: &Path, cmd: &str| -> RunManifest {
        serde_json::from_str(&std::fs::read_to_string(root.join(format!("out/manifests/{cmd}.json"))).unwrap()).unwrap()
    };
    for cmd in ["gen-data", "train", "calibrate", "evaluate", "gate", "report"] {
        assert_eq!(read(shared(), cmd), read(other.path(), cmd), "{cmd}");
    }
}

#[test]
fn evaluate_reports_both_curvature_groups() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // Reuse the shared upstream artifacts.
    std::fs::create_dir_all(&out).unwrap();
    for f in ["roads.json", "dataset.csv", "dataset.provenance.json"] {
        std::fs::copy(shared().join("out").join(f), out.join(f)).unwrap();
    }
    let cfg = write_config(dir.path());
    let args = |cmd: &'static str| vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--grouping", "curvature:0.003"];
    for cmd in ["train", "calibrate", "evaluate"] {
        let o = capguard(&args(cmd));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report = std::fs::read_to_string(out.join("reports/test_0.csv")).unwrap();
    assert!(report.contains("coverage,0,"));
    assert!(report.contains("coverage,1,"));
}

#[test]
fn gate_prints_one_row_per_candidate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    copy_dir(&shared().join("out"), &out);
    let cfg = write_config(dir.path());
    let o = capguard(&[
        "gate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--accels",
        "2.5,3,3.5,4,4.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "a_max,eps_hat,verdict,chosen");
    assert_eq!(lines.len(), 6);
    let a: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(a, ["2.5", "3", "3.5", "4", "4.5"]);
    assert!(lines[1..].iter().map(|l| l.ends_with(",1") as usize).sum::<usize>() <= 1);
    let svg = std::fs::read_to_string(out.join("gate_decision.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[test]
fn missing_upstream_artifact_names_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("empty");
    let o = capguard(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capguard gen-data"));
    let o = capguard(&["gate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capguard select"));
}

#[test]
fn exit_codes() {
    assert_eq!(capguard(&["--help"]).status.code(), Some(0));
    assert_eq!(capguard(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(capguard(&["evaluate", "--grouping", "banana"]).status.code(), Some(1));
    assert_eq!(capguard(&["config", "--seed", "x"]).status.code(), Some(1));
    let o = capguard(&["gen-roads", "--alpha", "1.5", "--out", "/nonexistent/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn config_command_applies_overrides() {
    let o = capguard(&["config", "--seed", "7", "--alpha", "0.2", "--grouping", "dummy:2,0.1", "--select-on", "test"]);
    assert!(o.status.success());
    let cfg: PipelineConfig = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.alpha, 0.2);
    assert_eq!(cfg.select_on, SelectOn::Test);
    assert_eq!(cfg.grouping.to_string(), "dummy:2,0.1");
}
