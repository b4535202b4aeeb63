use std::path::Path;
use std::process::{Command, Output};

use gnss_fgo::io::{read_epochs, read_stats, read_trajectory};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gnss-fgo"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate(dir: &Path, preset: &str, extra: &[&str]) {
    run_ok(
        bin()
            .args(["simulate", "--preset", preset, "--seed", "3", "--out"])
            .arg(dir.join("epochs.jsonl"))
            .arg("--truth")
            .arg(dir.join("truth.json"))
            .args(extra),
    );
}

const RECIPE: &str = r#"
[[factors]]
type = "pseudorange"
sigma = { model = "elevation", a = 0.3, b = 0.3 }
kernel = { huber = { k = 1.345 } }

[[factors]]
type = "clock_const"
sigma = 0.1
"#;

#[test]
fn simulate_then_solve() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "urban", &[]);
    let (_, records) = read_epochs(dir.path().join("epochs.jsonl")).unwrap();
    assert!(!records.is_empty());
    std::fs::write(dir.path().join("recipe.toml"), RECIPE).unwrap();
    run_ok(
        bin()
            .current_dir(dir.path())
            .args([
                "solve",
                "--epochs",
                "epochs.jsonl",
                "--recipe",
                "recipe.toml",
            ])
            .args(["--truth", "truth.json", "--out-dir", "out"]),
    );
    let traj = read_trajectory(dir.path().join("out/solution_trajectory.csv")).unwrap();
    assert_eq!(traj.len(), records.len());
    let stats = read_stats(dir.path().join("out/solution_stats.json")).unwrap();
    assert!(stats.p95 >= stats.p50);
}

#[test]
fn recipe_is_found_through_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tempfile::tempdir().unwrap();
    simulate(dir.path(), "urban", &["--noiseless"]);
    std::fs::write(cfg.path().join("shared.toml"), RECIPE).unwrap();
    run_ok(
        bin()
            .current_dir(dir.path())
            .env("GNSS_FGO_CONFIG_DIR", cfg.path())
            .args([
                "solve",
                "--epochs",
                "epochs.jsonl",
                "--recipe",
                "shared.toml",
                "--out-dir",
                ".",
            ]),
    );
    assert!(dir.path().join("solution_trajectory.csv").exists());
    let missing = bin()
        .current_dir(dir.path())
        .args([
            "solve",
            "--epochs",
            "epochs.jsonl",
            "--recipe",
            "shared.toml",
        ])
        .output()
        .unwrap();
    assert!(!missing.status.success());
}

#[test]
fn example1_writes_both_runs() {
    let dir = tempfile::tempdir().unwrap();
    for robust in ["none", "huber"] {
        run_ok(
            bin()
                .args(["example1", "--robust", robust, "--seed", "2", "--out-dir"])
                .arg(dir.path()),
        );
        let stats = read_stats(dir.path().join(format!("example1_{robust}_stats.json"))).unwrap();
        assert_eq!(stats.extra["seed"], 2);
        assert!(stats.extra["removed_observations"].as_u64().is_some());
        assert!(dir
            .path()
            .join(format!("example1_{robust}_cdf.csv"))
            .exists());
        assert!(dir
            .path()
            .join(format!("example1_{robust}_trajectory.csv"))
            .exists());
    }
}

#[test]
fn example2_both_models() {
    let dir = tempfile::tempdir().unwrap();
    for model in ["1", "2"] {
        let out = run_ok(
            bin()
                .args(["example2", "--model", model, "--seed", "4", "--out-dir"])
                .arg(dir.path()),
        );
        assert!(String::from_utf8_lossy(&out.stdout).contains("fixed rate"));
        let stats =
            read_stats(dir.path().join(format!("example2_model{model}_stats.json"))).unwrap();
        let rate = stats.extra["fixed_rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&rate));
        assert!(dir
            .path()
            .join(format!("example2_model{model}_ambiguities.json"))
            .exists());
    }
    assert!(!bin()
        .args(["example2", "--model", "3"])
        .output()
        .unwrap()
        .status
        .success());
}

#[test]
fn stats_of_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "rtk", &[]);
    let truth = dir.path().join("truth.json");
    let out = dir.path().join("stats.json");
    run_ok(
        bin()
            .args(["stats", "--metric", "horizontal", "--estimates"])
            .arg(&truth)
            .arg("--truth")
            .arg(&truth)
            .arg("--out")
            .arg(&out),
    );
    let s = read_stats(&out).unwrap();
    assert_eq!((s.rms, s.p50, s.p95, s.sdc_score), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn bad_arguments_fail() {
    assert!(!bin().arg("--bogus").output().unwrap().status.success());
    assert!(!bin()
        .args(["example1", "--robust", "cauchy"])
        .output()
        .unwrap()
        .status
        .success());
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["solve", "--epochs"])
        .arg(dir.path().join("nope.jsonl"))
        .args(["--recipe", "nope.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}
