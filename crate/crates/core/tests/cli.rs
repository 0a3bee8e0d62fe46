use std::fs;
use std::path::Path;
use std::process::Command;

use weakkam::cli::ExperimentConfig;

fn run(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_weakkam")).args(args).env_remove("WEAKKAM_OUT").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const FREE: &str = "model.kind = free\nmodel.mass = 1.0\ngrid.n = 16\naction.taus = [0.5, 0.25]\nsolver.tol = 1e-6\n";
const PENDULUM: &str = "model.kind = pendulum\nmodel.strength = 1.0\ngrid.c_h = 1\naction.taus = [0.4, 0.2]\nsolver.deltas = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125, 0.0015625, 0.00078125, 0.000390625, 0.0001953125]\nsolver.tol = 1e-4\n";

#[test]
fn validate_passes_on_the_free_particle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FREE);
    let out = dir.path().join("out");
    let res = run(&["validate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let table = fs::read_to_string(out.join("validate.csv")).unwrap();
    assert!(table.lines().count() > 10);
    assert!(table.lines().skip(1).all(|l| l.ends_with(",pass")), "{table}");
}

#[test]
fn validate_passes_on_the_pendulum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PENDULUM);
    let out = dir.path().join("out");
    let res = run(&["validate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.kind = pendulum\ngrid.n = 16\naction.taus = [0.1, 0.2]\n");
    let res = run(&["weak-kam", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("strictly decreasing"));
    let missing = run(&["weak-kam", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn too_coarse_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.kind = free\ngrid.n = 4\naction.tau = 0.001\n");
    let res = run(&["effective-action", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

/// Every CSV under `dir`, with the wall-time column blanked.
fn snapshot(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap();
            let mut lines = text.lines();
            let header = lines.next().unwrap_or("").to_string();
            let col = header.split(',').position(|h| h == "wall_time");
            let body: Vec<String> = lines
                .map(|l| match col {
                    Some(c) => l.split(',').enumerate().map(|(i, f)| if i == c { "" } else { f }).collect::<Vec<_>>().join(","),
                    None => l.to_string(),
                })
                .collect();
            (p.file_name().unwrap().to_string_lossy().into_owned(), format!("{header}\n{}", body.join("\n")))
        })
        .collect()
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PENDULUM);
    for sub in ["effective-action", "weak-kam", "mane"] {
        let a = dir.path().join(format!("{sub}_a"));
        let b = dir.path().join(format!("{sub}_b"));
        for (out, threads) in [(&a, "1"), (&b, "2")] {
            let res = run(&[sub, "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads]);
            assert_eq!(res.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&res.stderr));
        }
        assert_eq!(snapshot(&a), snapshot(&b), "{sub}");
    }
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FREE);
    let target = dir.path().join("from_env");
    let res = Command::new(env!("CARGO_BIN_EXE_weakkam"))
        .args(["effective-action", "--config", &cfg])
        .env("WEAKKAM_OUT", &target)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(target.join("effective_action.csv").exists());
}

#[test]
fn sweep_reports_saturated_fit_for_exact_effective_action() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "model.kind = pendulum\ngrid.c_h = 1\naction.taus = [0.4, 0.2, 0.1]\nsolver.deltas = [0.4, 0.2, 0.1, 0.05, 0.025, 0.0125, 0.00625, 0.003125, 0.0015625, 0.00078125, 0.000390625]\nsolver.tol = 1e-3\n",
    );
    let out = dir.path().join("out");
    let res = run(&["sweep-tau", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let fit = fs::read_to_string(out.join("sweep_tau_fit.csv")).unwrap();
    assert!(fit.lines().nth(1).unwrap().starts_with("saturated"), "{fit}");
}

#[test]
fn saved_config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(PENDULUM).unwrap();
    let path = dir.path().join("saved.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
}
