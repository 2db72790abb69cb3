use std::fs;
use std::path::Path;
use std::process::Command;

fn cvfl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cvfl"))
        .args(args)
        .output()
        .unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn unknown_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvfl(&["fig9", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario"));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    for text in ["omgea = 1\n", "kappa = fast\n", "kappa = -1\n"] {
        fs::write(&cfg, text).unwrap();
        let out = cvfl(&[
            "fig2",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(2), "{text}");
    }
    let out = cvfl(&["fig2", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fig2_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvfl(&["fig2", "--seed", "4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    for k in ["0", "0.05", "0.1", "0.2"] {
        let csv = fs::read_to_string(dir.path().join(format!("fig2_k{k}.csv"))).unwrap();
        assert!(csv.starts_with("t,x,p\n0,1,0\n"));
    }
    let s = summary(dir.path());
    assert_eq!(s["scenario"], "fig2");
    assert_eq!(s["seed"], 4);
    assert_eq!(s["parameters"]["kappa"], 0.1);
    assert_eq!(s["parameters"]["beta"], "inf");
    assert!(s["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(s["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));
}

#[test]
fn failing_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvfl(&["fig3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let s = summary(dir.path());
    assert_eq!(s["passed"], false);
    let csv = fs::read_to_string(dir.path().join("fig3_x0.5_p0.5.csv")).unwrap();
    assert!(csv.starts_with("t,x,p,x_asym,p_asym\n0,0.5,0.5,2,"));
}

#[test]
fn config_file_and_flags_take_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# smaller run\nscheme = 2\nk = 0.05\nt_end = 2\nn_traj = 20\nseed = 3\n",
    )
    .unwrap();
    let out = cvfl(&[
        "custom",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "8",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let s = summary(dir.path());
    assert_eq!(s["seed"], 8);
    assert_eq!(s["parameters"]["k"], 0.05);
    assert_eq!(s["parameters"]["n_traj"], 20);
    assert_eq!(s["parameters"]["kappa"], 0.1);
}

#[test]
fn runs_are_reproducible_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = a.path().join("run.cfg");
    fs::write(&cfg, "scheme = 1\nk = 0.1\nt_end = 4\nn_traj = 16\n").unwrap();
    let c = cfg.to_str().unwrap();
    assert!(cvfl(&[
        "custom",
        "--config",
        c,
        "--seed",
        "5",
        "--out",
        a.path().to_str().unwrap()
    ])
    .status
    .success());
    assert!(cvfl(&[
        "custom",
        "--config",
        c,
        "--seed",
        "5",
        "--parallel",
        "3",
        "--out",
        b.path().to_str().unwrap()
    ])
    .status
    .success());
    for f in [
        "ensemble.csv",
        "trajectory_0.csv",
        "trajectory_0.json",
        "averaged_means.csv",
        "conditional_covariances.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let header = fs::read_to_string(a.path().join("trajectory_0.csv")).unwrap();
    assert!(header.starts_with("t,xc,pc,dI\n"));
}

#[test]
fn zero_gamma_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "gamma = 0\nt_end = 1\n").unwrap();
    let out = cvfl(&[
        "custom",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
