use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lps_lab(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lps-lab"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_in(dir: &Path, command: &str, cfg: &Path, out: &str) -> Output {
    let out = dir.join(out);
    lps_lab(
        &[command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    )
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_k2_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "k2.json", r#"{"model":"k2"}"#);
    let o = run_in(dir.path(), "validate", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/validate.json")).unwrap()).unwrap();
    assert_eq!(report["passes"], true);
}

#[test]
fn invalid_holder_triple_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", r#"{"model":"k2","p":2,"p0":3,"p1":3,"seed":1}"#);
    let o = run_in(dir.path(), "verify-31", &cfg, "out");
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("Hölder triple invalid"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn diagnostics_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    for (text, field) in [
        (r#"{"model":"k2","seed":1,"epsilon":0.2}"#, "epsilon"),
        (r#"{"model":"k2","seed":1,"eps":0.9}"#, "eps"),
        (r#"{"model":"k2","seed":1,"alpha":0.5}"#, "alpha"),
        (r#"{"model":{"grid":{"dims":[0],"bc":"neumann"}},"seed":1}"#, "dims"),
        (r#"{"model":{"grid":{"dims":[4]}},"seed":1}"#, "bc"),
    ] {
        let cfg = config(dir.path(), "c.json", text);
        let o = run_in(dir.path(), "corollary-34", &cfg, "out");
        assert_eq!(o.status.code(), Some(1), "{text}");
        assert!(stderr(&o).contains(field), "{text}: {}", stderr(&o));
    }
    let o = lps_lab(&["verify-31", "--config", "/nonexistent/c.json"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = lps_lab(&["frobnicate"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let cfg = config(dir.path(), "c.json", r#"{"model":"k2"}"#);
    let o = lps_lab(&["spectrum", "--config", cfg.to_str().unwrap()], &[("LPS_LAB_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("LPS_LAB_THREADS"));
}

#[test]
fn reports_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "c.json",
        r#"{"model":"p16","p":1.5,"eps_list":[0.5,0.1],"seed":9,"corpus_size":15,"search":{"steps":15,"top":2}}"#,
    );
    let a = run_in(dir.path(), "sweep-eps", &cfg, "a");
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let out_b = dir.path().join("b");
    let b = lps_lab(
        &["sweep-eps", "--config", cfg.to_str().unwrap(), "--out", out_b.to_str().unwrap()],
        &[("LPS_LAB_THREADS", "1")],
    );
    assert_eq!(b.status.code(), Some(0));
    for name in ["sweep-eps.json", "sweep-eps.csv", "sweep-eps.witness.json"] {
        let x = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join("a/sweep-eps.csv")).unwrap();
    assert!(csv.starts_with("param,max_ratio,witness_id,seed\n0.5,"));
}

#[test]
fn witnesses_re_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "c.json",
        r#"{"model":"p16","alpha":0.2,"p":1.5,"seed":2,"corpus_size":10,"search":{"steps":10,"top":2}}"#,
    );
    let o = run_in(dir.path(), "corollary-34", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let w = dir.path().join("out/corollary-34.witness.json");
    let out = dir.path().join("out");
    let r = lps_lab(
        &["corollary-34", "--re-verify", w.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stdout));

    // a tampered witness fails with the verification exit code
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&w).unwrap()).unwrap();
    v["value"] = serde_json::json!(v["value"].as_f64().unwrap() * 1.001);
    std::fs::write(&w, serde_json::to_vec(&v).unwrap()).unwrap();
    let r = lps_lab(
        &["corollary-34", "--re-verify", w.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn chain_and_l2_checks_pass_on_a_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", r#"{"model":"p16","seed":3,"corpus_size":8}"#);
    let o = run_in(dir.path(), "chain-24", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let cfg = config(
        dir.path(),
        "c.json",
        r#"{"model":"grid8x8","p":2,"eps":0.05,"seed":3,"corpus_size":10,"search":{"steps":20,"top":2}}"#,
    );
    let o = run_in(dir.path(), "verify-31", &cfg, "out");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn remaining_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    for (command, text) in [
        ("spectrum", r#"{"model":"schrodinger-spike"}"#),
        ("lps", r#"{"model":"p16","seed":1,"symbol":"psi(0.25)"}"#),
        ("lps", r#"{"model":"k2","seed":1,"functional":"maximal","f":[1.0,3.0]}"#),
        ("rbound", r#"{"model":"k2","seed":1,"rbound":{"m":2,"restarts":4,"steps":10,"eigen_seeds":2}}"#),
        ("gradient-bound", r#"{"model":"k2","seed":1,"corpus_size":6,"extension_p":3,"search":{"steps":5,"top":1}}"#),
        ("sweep-size", r#"{"seed":1,"sizes":[8,16],"corpus_size":6,"search":{"steps":5,"top":1}}"#),
    ] {
        let cfg = config(dir.path(), "c.json", text);
        let o = run_in(dir.path(), command, &cfg, "out");
        assert_eq!(o.status.code(), Some(0), "{command}: {}", stderr(&o));
        assert!(dir.path().join("out").join(format!("{command}.json")).exists());
    }
    let cfg = config(dir.path(), "c.json", r#"{"command":"spectrum","model":"k2"}"#);
    let o = run_in(dir.path(), "validate", &cfg, "out");
    assert_eq!(o.status.code(), Some(1));
}
