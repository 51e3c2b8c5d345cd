use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn earl() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_earl"));
    c.env_remove("EARL_SEED");
    c
}

fn scratch() -> &'static tempfile::TempDir {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap())
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn earl");
    if out.status.code().is_none() {
        panic!("earl was killed: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// Generated 10^6-record normal file with mean 0.2, shared by the run tests.
fn dataset() -> &'static PathBuf {
    static D: OnceLock<PathBuf> = OnceLock::new();
    D.get_or_init(|| {
        let path = scratch().path().join("normal.txt");
        let out = run(earl().args(["generate", "--records", "1000000", "--mean", "0.2", "--seed", "3", "--out"]).arg(&path));
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        path
    })
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn generate_writes_a_manifest() {
    let path = dataset();
    let mut manifest = path.clone().into_os_string();
    manifest.push(".manifest.json");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m["records"], 1_000_000);
    assert!((m["true_mean"].as_f64().unwrap() - 0.2).abs() < 0.01);
}

#[test]
fn run_mean_to_five_percent() {
    let trace = scratch().path().join("trace.csv");
    let curve = scratch().path().join("curve.csv");
    let out = run(earl()
        .args(["run", "--job", "mean", "--sigma", "0.05", "--seed", "1", "--data"])
        .arg(dataset())
        .arg("--trace")
        .arg(&trace)
        .arg("--curve")
        .arg(&curve));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["mode"], "early");
    assert_eq!(r["seed"], 1);
    assert!(r["cv"].as_f64().unwrap() <= 0.05);
    for key in ["estimate", "cv", "B", "n", "p", "iterations", "records_processed", "mode"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("iteration,n,B,cv,records_processed\n"));
    assert_eq!(t.lines().count(), 1 + r["iterations"].as_u64().unwrap() as usize);
    assert!(std::fs::read_to_string(&curve).unwrap().starts_with("n,cv\n"));
}

#[test]
fn unreachable_sigma_runs_in_full() {
    let out = run(earl().args(["run", "--sigma", "1e-9", "--seed", "2", "--data"]).arg(dataset()));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&out);
    assert_eq!(r["mode"], "full");
    let full = run(earl().args(["full", "--job", "mean", "--data"]).arg(dataset()));
    assert!(full.status.success());
    assert_eq!(json(&full)["estimate"], r["estimate"]);
}

#[test]
fn failed_worker_exits_two() {
    let out = run(earl().args(["run", "--fail", "0:1", "--workers", "2", "--seed", "1", "--data"]).arg(dataset()));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["mode"], "degraded");
}

#[test]
fn result_json_is_reproducible_and_round_trips() {
    let a = scratch().path().join("a.json");
    let b = scratch().path().join("b.json");
    for p in [&a, &b] {
        let out = run(earl()
            .args(["run", "--workers", "1", "--seed", "9", "--data"])
            .arg(dataset())
            .arg("--output")
            .arg(p));
        assert_eq!(out.status.code(), Some(0));
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let parsed: earl::FinalResult = serde_json::from_slice(&ta).unwrap();
    let again = serde_json::to_string_pretty(&parsed).unwrap() + "\n";
    assert_eq!(again.as_bytes(), &ta[..]);
}

#[test]
fn seed_comes_from_the_environment() {
    let out = run(earl()
        .env("EARL_SEED", "42")
        .args(["run", "--workers", "1", "--data"])
        .arg(dataset()));
    assert_eq!(json(&out)["seed"], 42);
    let out = run(earl().args(["run", "--workers", "1", "--data"]).arg(dataset()));
    assert!(json(&out)["seed"].is_u64());
}

fn write(name: &str, text: &str) -> PathBuf {
    let p = scratch().path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn config_file_with_flag_override() {
    let cfg = write(
        "run.toml",
        &format!("data = {:?}\njob = \"median\"\nseed = 4\nworkers = 1\n", dataset().to_str().unwrap()),
    );
    let out = run(earl().args(["run", "--config"]).arg(&cfg));
    assert_eq!(json(&out)["seed"], 4);
    let out = run(earl().args(["run", "--seed", "5", "--config"]).arg(&cfg));
    assert_eq!(json(&out)["seed"], 5);
}

#[test]
fn config_errors_name_the_line() {
    let cfg = write("bad.toml", "sigma = 0.05\n\nworkers = \"two\"\n");
    let out = run(earl().args(["run", "--config"]).arg(&cfg));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:3:"), "{err}");
}

#[test]
fn bad_input_is_a_nonzero_exit() {
    for args in [
        vec!["run", "--data", "/nonexistent/file"],
        vec!["run", "--job", "nope"],
        vec!["run", "--sigma", "2"],
    ] {
        let mut c = earl();
        c.args(&args);
        if !args.contains(&"--data") {
            c.arg("--data").arg(dataset());
        }
        let out = run(&mut c);
        assert!(!out.status.success() && out.status.code() != Some(2), "{args:?}");
    }
}

fn audit(args: &[&str]) -> (bool, String) {
    let out = run(earl().arg("audit").args(args));
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn audit_identical_prefix_table() {
    let (ok, text) = audit(&["eq4", "--n", "29"]);
    assert!(ok);
    assert!(text.lines().any(|l| l.starts_with("8,0.2759,0.345948")), "{text}");
}

#[test]
fn audit_uniformity_post_map() {
    let (ok, text) = audit(&["uniformity", "--sampler", "post", "--trials", "2000"]);
    assert!(ok, "{text}");
    assert!(text.contains("PASS"));
}

#[test]
fn audit_delta_equivalence_small() {
    let (ok, text) = audit(&["delta-equivalence", "--n", "5", "--nprime", "8", "--trials", "200000"]);
    assert!(ok, "{text}");
    assert_eq!(text.matches("PASS").count(), 2);
}

#[test]
fn audit_binomial_law() {
    let (ok, text) = audit(&["binomial"]);
    assert!(ok, "{text}");
}

#[test]
fn unknown_audit_kind_fails() {
    let out = run(earl().args(["audit", "bogus"]));
    assert!(!out.status.success());
}

#[test]
fn full_scan_of_categorical_data() {
    let path: &Path = &scratch().path().join("labels.txt");
    let out = run(earl()
        .args(["generate", "--distribution", "categorical", "--labels", "a=0.25,b=0.75", "--records", "4000", "--out"])
        .arg(path));
    assert!(out.status.success());
    let out = run(earl().args(["full", "--job", "proportion:a", "--data"]).arg(path));
    let r = json(&out);
    assert_eq!(r["records"], 4000);
    assert_eq!(r["detail"]["kind"], "proportion");
    assert!((r["estimate"].as_f64().unwrap() - 0.25).abs() < 0.05);
}
