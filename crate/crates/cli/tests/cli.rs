use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vmot(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmot"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run vmot")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, marginals: &str, payoff: &str, direction: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(
        &p,
        format!(r#"{{"schema":1,"marginals":{marginals},"payoff":"{payoff}","direction":"{direction}"}}"#),
    )
    .unwrap();
    p
}

/// delta_0 then uniform on {-1, 1}.
fn inst_a(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "a.json",
        r#"[[{"points":[0],"weights":[1]}],[{"points":[-1,1],"weights":[0.5,0.5]}]]"#,
        "abs(x[2][1]-x[1][1])",
        "min",
    )
}

/// Uniform on {-1, 1} then uniform on {-2, 2}, from files.
fn inst_b(dir: &Path) -> PathBuf {
    fs::write(dir.join("m1.json"), r#"{"points":[-1,1],"weights":[0.5,0.5]}"#).unwrap();
    fs::write(dir.join("m2.csv"), "point,weight\n-2,0.5\n2,0.5\n").unwrap();
    write_config(dir, "b.json", r#"[["m1.json"],["m2.csv"]]"#, "abs(x[2][1]-x[1][1])", "min")
}

#[test]
fn check_valid_system() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"[[{"points":[0],"weights":[1]},{"points":[1],"weights":[1]}],
            [{"points":[-1,1],"weights":[0.5,0.5]},{"points":[0,2],"weights":[0.5,0.5]}],
            [{"points":[-2,2],"weights":[0.5,0.5]},{"points":[-1,3],"weights":[0.5,0.5]}]]"#,
        "x[3][1]",
        "min",
    );
    let o = vmot(&["check", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let rows = stdout(&o).lines().filter(|l| l.contains(" -> ")).count();
    assert_eq!(rows, 4);
}

#[test]
fn check_reports_order_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "v.json",
        r#"[[{"points":[-1,1],"weights":[0.5,0.5]}],[{"points":[0],"weights":[1]}]]"#,
        "0",
        "min",
    );
    let o = vmot(&["check", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("VIOLATED") && stdout(&o).contains("x = "));
}

#[test]
fn check_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.json", r#"[["nope.json"],["nope.csv"]]"#, "0", "min");
    assert_eq!(code(&vmot(&["check", "--config", cfg.to_str().unwrap()], dir.path())), 2);
    assert_eq!(code(&vmot(&["check", "--config", "absent.json"], dir.path())), 2);
}

#[test]
fn solve_inst_b_prints_three_halves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_b(dir.path());
    let o = vmot(&["solve", "--config", cfg.to_str().unwrap(), "--out", "out"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("min bound (exact): 1.5\n"), "{}", stdout(&o));
    for f in ["report.json", "certificate.json", "coupling.json"] {
        assert!(dir.path().join("out").join(f).exists());
    }
}

#[test]
fn both_directions_prints_bracket() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "w.json",
        r#"[[{"points":[0],"weights":[1]}],[{"points":[-1,0,1],"weights":[0.25,0.5,0.25]}],[{"points":[-2,-1,0,1,2],"weights":[0.2,0.2,0.2,0.2,0.2]}]]"#,
        "abs(x[3][1]-x[2][1])",
        "min",
    );
    let o = vmot(
        &["solve", "--config", cfg.to_str().unwrap(), "--out", "o", "--both-directions"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o).lines().find(|l| l.starts_with("[MIN, MAX] = [")).unwrap().to_string();
    let nums: Vec<f64> = line["[MIN, MAX] = [".len()..line.len() - 1]
        .split(", ")
        .map(|s| s.parse().unwrap())
        .collect();
    assert!(nums[0] <= nums[1]);
    assert!(dir.path().join("o/certificate.max.json").exists());
    assert_eq!(code(&vmot(&["verify", "--config", cfg.to_str().unwrap(), "--out", "o"], dir.path())), 0);
}

#[test]
fn budget_exceeded_suggests_entropic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_b(dir.path());
    let o = vmot(
        &["solve", "--config", cfg.to_str().unwrap(), "--out", "o", "--max-exact-paths", "3"],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--backend entropic"));
}

#[test]
fn verify_fresh_tampered_and_missing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_a(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&vmot(&["solve", "--config", c, "--out", "o"], dir.path())), 0);
    assert_eq!(code(&vmot(&["verify", "--config", c, "--out", "o"], dir.path())), 0);

    let cert_path = dir.path().join("o/certificate.json");
    let original = fs::read_to_string(&cert_path).unwrap();
    let mut cert: serde_json::Value = serde_json::from_str(&original).unwrap();
    let entry = cert["phi"][1][0].as_object_mut().unwrap().values_mut().next().unwrap();
    *entry = serde_json::json!(entry.as_f64().unwrap() + 1.0);
    fs::write(&cert_path, serde_json::to_string(&cert).unwrap()).unwrap();
    let o = vmot(&["verify", "--config", c, "--out", "o"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));

    fs::write(&cert_path, original).unwrap();
    fs::remove_file(dir.path().join("o/coupling.json")).unwrap();
    assert_eq!(code(&vmot(&["verify", "--config", c, "--out", "o"], dir.path())), 2);
}

#[test]
fn verify_rejects_artifacts_of_another_instance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_b(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&vmot(&["solve", "--config", c, "--out", "o"], dir.path())), 0);
    write_config(dir.path(), "b.json", r#"[["m1.json"],["m2.csv"]]"#, "pow(x[2][1]-x[1][1], 2)", "min");
    assert_eq!(code(&vmot(&["verify", "--config", c, "--out", "o"], dir.path())), 2);
}

#[test]
fn entropic_artifacts_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_b(dir.path());
    let c = cfg.to_str().unwrap();
    let o = vmot(
        &["solve", "--config", c, "--out", "o", "--backend", "entropic", "--schedule", "0.5,0.1,0.02"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&vmot(&["verify", "--config", c, "--out", "o"], dir.path())), 0);
}

#[test]
fn deterministic_reports_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_b(dir.path());
    let c = cfg.to_str().unwrap();
    for out in ["r1", "r2"] {
        let o = vmot(&["solve", "--config", c, "--out", out, "--backend", "both", "--deterministic"], dir.path());
        assert_eq!(code(&o), 0);
    }
    for f in ["report.json", "certificate.json", "coupling.json", "certificate.entropic.json"] {
        let a = fs::read(dir.path().join("r1").join(f)).unwrap();
        let b = fs::read(dir.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let report = fs::read_to_string(dir.path().join("r1/report.json")).unwrap();
    assert!(!report.contains("elapsed_ms"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_b(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&vmot(&["solve", "--config", c, "--epsilon", "0.1"], dir.path())), 2);
    assert_eq!(
        code(&vmot(&["solve", "--config", c, "--backend", "entropic", "--epsilon", "0.1", "--schedule", "0.5,0.1"], dir.path())),
        2
    );
    assert_eq!(code(&vmot(&["solve", "--config", c, "--backend", "warp"], dir.path())), 2);
    let bad = write_config(dir.path(), "p.json", r#"[["m1.json"],["m2.csv"]]"#, "abs(x[2][1]", "min");
    assert_eq!(code(&vmot(&["solve", "--config", bad.to_str().unwrap()], dir.path())), 2);
}

#[test]
fn reducible_system_needs_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "r.json",
        r#"[[{"points":[-1,1],"weights":[0.5,0.5]}],[{"points":[-1,1],"weights":[0.5,0.5]}]]"#,
        "abs(x[2][1]-x[1][1])",
        "min",
    );
    let c = cfg.to_str().unwrap();
    let o = vmot(&["solve", "--config", c, "--out", "o"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--perturb"));
    let o = vmot(&["solve", "--config", c, "--out", "o", "--perturb", "0.01"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&vmot(&["verify", "--config", c, "--out", "o"], dir.path())), 0);
}

#[test]
fn export_lp_and_cross_validate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = inst_a(dir.path());
    let c = cfg.to_str().unwrap();
    let o = vmot(&["solve", "--config", c, "--out", "o", "--export-lp", "a.lp"], dir.path());
    assert_eq!(code(&o), 0);
    let lp = fs::read_to_string(dir.path().join("a.lp")).unwrap();
    assert!(lp.contains("Minimize") || lp.contains("minimize"));
    let o = vmot(&["cross-validate", "--config", c, "--out", "cv", "--seed", "7"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("[MIN, MAX] = [1, 1]"));
    assert!(dir.path().join("cv/cross_validation.json").exists());
}
