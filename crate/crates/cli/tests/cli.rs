use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const CONFIG: &str = r#"{
  "seed": 5,
  "dataset": {"n_performances": 24, "notes_per_performance": 5},
  "synthesis": {"sr": 8000},
  "nmf": {"iterations": 20},
  "grid": {"configs": [
    {"k0_encoder": 3, "k0_performer": 3, "k2_encoder": 1, "k2_performer": 1},
    {"k0_encoder": 3, "k0_performer": 5, "k2_encoder": 1, "k2_performer": 1}
  ]},
  "strategies": ["single-without", "multiple-with"],
  "plan": {"subsample_fraction": 1.0, "max_epochs": 2, "patience": 2, "ema_window": 2}
}"#;

fn ascvel(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ascvel"));
    cmd.args(args).env("RUST_LOG", "warn");
    match workers {
        Some(w) => cmd.env("ASCVEL_WORKERS", w),
        None => cmd.env_remove("ASCVEL_WORKERS"),
    };
    cmd.output().unwrap()
}

fn run_ok(cmd: &str, config: &Path, out: &Path, workers: Option<&str>) -> String {
    let o = ascvel(
        &[cmd, "--config", config.to_str().unwrap(), "--output", out.to_str().unwrap()],
        workers,
    );
    assert!(
        o.status.success(),
        "{cmd} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

struct Prepared {
    root: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
    rebuild_stdout: String,
}

/// One dataset and feature store shared by the tests that train.
fn prepared() -> &'static Prepared {
    static CELL: OnceLock<Prepared> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let config = root.path().join("config.json");
        std::fs::write(&config, CONFIG).unwrap();
        let out = root.path().join("base");
        run_ok("dataset-build", &config, &out, None);
        let rebuild_stdout = run_ok("dataset-build", &config, &out, None);
        run_ok("separate", &config, &out, None);
        Prepared {
            root,
            config,
            out,
            rebuild_stdout,
        }
    })
}

fn copy_inputs(from: &Path, to: &Path) {
    for sub in ["dataset", "features"] {
        copy_tree(&from.join(sub), &to.join(sub));
    }
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_dir() {
            copy_tree(&e.path(), &to.join(e.file_name()));
        } else {
            std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(ascvel(&[], None).status.code(), Some(1));
    assert_eq!(ascvel(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(ascvel(&["train", "--output", "x"], None).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"workers": 0}"#).unwrap();
    let o = ascvel(&["train", "--config", bad.to_str().unwrap(), "--output", "x"], None);
    assert_eq!(o.status.code(), Some(1));
    let missing = ascvel(&["train", "--config", "/nonexistent.json", "--output", "x"], None);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn schema_subcommand_prints_json() {
    let o = ascvel(&["schema"], None);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout).unwrap().contains("\"strategies\""));
}

#[test]
fn rebuild_is_a_no_op() {
    let p = prepared();
    assert!(
        p.rebuild_stdout.contains("0 rendered, 0 files written"),
        "{}",
        p.rebuild_stdout
    );
}

#[test]
fn missing_features_is_a_data_error() {
    let p = prepared();
    let out = p.root.path().join("empty");
    let o = ascvel(
        &["train", "--config", p.config.to_str().unwrap(), "--output", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn empty_store_report_exits_3_without_bundle() {
    let p = prepared();
    let out = p.root.path().join("no-results");
    let o = ascvel(
        &["report", "--config", p.config.to_str().unwrap(), "--output", out.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.join("report").exists());
}

#[test]
fn two_workers_match_one_and_report() {
    let p = prepared();
    let one = p.root.path().join("one");
    let two = p.root.path().join("two");
    copy_inputs(&p.out, &one);
    copy_inputs(&p.out, &two);
    let stdout = run_ok("train", &p.config, &one, Some("1"));
    assert!(stdout.starts_with("4 trials: 4 run, 0 resumed"), "{stdout}");
    run_ok("train", &p.config, &two, Some("2"));
    let a = std::fs::read(one.join("results.csv")).unwrap();
    let b = std::fs::read(two.join("results.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);

    let again = run_ok("train", &p.config, &two, Some("2"));
    assert!(again.starts_with("4 trials: 0 run, 4 resumed"), "{again}");

    run_ok("report", &p.config, &one, None);
    for f in ["strategies.svg", "oracle.svg", "win_table.csv", "win_table.txt", "statistics.json", "summary.txt"] {
        assert!(one.join("report").join(f).exists(), "{f}");
    }
    let first = std::fs::read(one.join("report/statistics.json")).unwrap();
    run_ok("report", &p.config, &one, None);
    assert_eq!(std::fs::read(one.join("report/statistics.json")).unwrap(), first);
}
