use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[env]
name = "mountain_car"
reset = "native"
observation_offset = [-0.3, 0.0]
observation_scale = [0.9, 0.07]
m_init = [-0.2222222222222222, 0.0]
S_init = [0.01, 0.01]

[reward]
kind = "exponential"
target = [0.8888888888888888, 0.0]
widths = [0.5, 1.0]

[loop]
J = 1
N = 1
H = 8
SUBS = 5
seed = 3
eval_repeats = 1
basis = 5

[optimizer]
maxiter = 3
"#;

fn sps(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sps"))
        .args(args)
        .env("SPS_OUTPUT_DIR", out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn run_writes_every_artifact_and_plot_redraws() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let res = sps(&out, &["run", cfg.to_str().unwrap(), "--seed", "4"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let run = out.join("tiny_s4");
    for f in ["episodes.csv", "summary.json", "learning_curve.svg", "model.toml", "policy.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(run.join("episodes.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "run_id,seed,episode,kind,steps,native_return,violated,violation_step,blocked,xi,predicted_risk,wall_ms"
    );
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["version"], 1);
    assert_eq!(summary["seed"], 4);

    let plots = dir.path().join("plots");
    let res = sps(&plots, &["plot", run.join("episodes.csv").to_str().unwrap()]);
    assert!(res.status.success());
    assert!(std::fs::read_to_string(plots.join("learning_curve.svg")).unwrap().contains("<svg"));
}

#[test]
fn invalid_config_fails_before_simulating() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, TINY.replace("H = 8", "H = 0")).unwrap();
    let out = dir.path().join("out");
    let res = sps(&out, &["run", cfg.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("loop"));
    assert!(!out.exists());

    std::fs::write(&cfg, TINY.replace("[optimizer]", "[optimiser]")).unwrap();
    assert!(!sps(&out, &["run", cfg.to_str().unwrap()]).status.success());
}

#[test]
fn unknown_config_and_missing_seeds_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!sps(dir.path(), &["run", "no_such_config"]).status.success());
    assert!(!sps(dir.path(), &["multi", "mountain_car"]).status.success());
    assert!(!sps(dir.path(), &["plot", "missing.csv"]).status.success());
}
