use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ppdsgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppdsgd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn validate_config_accepts_defaults() {
    let out = ppdsgd(&["validate-config"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("configuration ok"));
}

#[test]
fn malformed_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "horizon = \"long\"");
    assert_eq!(
        ppdsgd(&["validate-config", "--config", &cfg]).status.code(),
        Some(2)
    );
    assert_eq!(
        ppdsgd(&["validate-config", "--reps", "0"]).status.code(),
        Some(2)
    );
}

#[test]
fn disconnected_graph_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[graph]\nkind = \"edges\"\nagents = 5\nedges = [[1, 2], [3, 4], [4, 5]]\n",
    );
    let out = ppdsgd(&[
        "run-convex",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_convex_flags_and_manifest_replay() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = ppdsgd(&[
        "run-convex",
        "--seed",
        "5",
        "--reps",
        "3",
        "--horizon",
        "10",
        "--out",
        a.path().to_str().unwrap(),
    ]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let text = fs::read_to_string(a.path().join("private.csv")).unwrap();
    assert_eq!(text.lines().count(), 12);
    let manifest = a.path().join("manifest.toml");
    let m = fs::read_to_string(&manifest).unwrap();
    assert!(m.contains("seed = 5") && m.contains("repetitions = 3"));
    let second = ppdsgd(&[
        "run-convex",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        b.path().to_str().unwrap(),
    ]);
    assert!(second.status.success());
    for f in [
        "private.csv",
        "conventional.csv",
        "conventional_stderr.csv",
        "theta_star.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn privacy_bound_reports_limit_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[privacy]\npoints = [[0.0, 5.0], [4.0, 5.0]]\n");
    let out = ppdsgd(&[
        "privacy-bound",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("privacy_bound.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "lambda_bar,kappa,theta,mmse_bound,mmse_empirical,mc_stderr,status"
    );
    let limit: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!((limit[2].parse::<f64>().unwrap() - 1.0322).abs() < 1e-3);
    assert!((limit[3].parse::<f64>().unwrap() - 0.4614).abs() < 1e-3);
    assert!(lines.next().unwrap().contains("rejected"));
}

#[test]
fn attack_eval_after_logged_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "horizon = 20\nrepetitions = 1\nlog_messages = true\nrecord_state = true\n[attack]\nside_information = true\n",
    );
    let d = dir.path().to_str().unwrap();
    assert!(ppdsgd(&["run-convex", "--config", &cfg, "--out", d])
        .status
        .success());
    let out = ppdsgd(&["attack-eval", "--config", &cfg, "--out", d]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = fs::read_to_string(dir.path().join("attack.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "k,agent,mse_gradient,mse_theta"
    );
    assert_eq!(text.lines().count(), 1 + 20 * 5);
}

#[test]
fn dp_compare_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "horizon = 20\nrepetitions = 2\n[dp]\nsigmas = [0.0, 1.0]\n",
    );
    let out = ppdsgd(&[
        "dp-compare",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("dp_compare.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let out = ppdsgd(&["validate-config", "--config", path.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        seen += 1;
    }
    assert!(seen >= 5);
}
