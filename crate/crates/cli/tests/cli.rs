use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rwrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rwrp"))
        .args(args)
        .env_remove("RWRP_DEFAULT_WORKERS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn csv_header(out: &Output) -> String {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    text.lines().find(|l| !l.starts_with('#')).unwrap().to_string()
}

#[test]
fn oracle_three_site_box() {
    let v = json(&rwrp(&["oracle", "--d", "1", "--N", "1", "--y", "1", "--r", "0.5"]));
    let b = v["result"]["summary"][0]["b"].as_f64().unwrap();
    // hand-solved 2x2 systems: u(0) = c0 / (1 - c0 c_) with c = e^{-omega}/2
    let e1 = (-1.0f64).exp();
    let u = |w_minus: f64, w0: f64| {
        let (cm, c0) = ((-w_minus).exp() / 2.0, (-w0).exp() / 2.0);
        c0 / (1.0 - c0 * cm)
    };
    let hand = [u(0.0, 0.0), u(1.0, 0.0), u(0.0, 1.0), u(1.0, 1.0)];
    let oracle_b = -(hand.iter().sum::<f64>() / 4.0).ln();
    assert!((b - oracle_b).abs() < 1e-10, "{b} vs {oracle_b}");
    assert!((b - 0.9099).abs() < 5e-5);
    let envs = v["result"]["environments"].as_array().unwrap();
    assert_eq!(envs.len(), 4);
    let mut got: Vec<f64> = envs.iter().map(|e| e["e"].as_f64().unwrap()).collect();
    let mut want = hand.to_vec();
    got.sort_by(f64::total_cmp);
    want.sort_by(f64::total_cmp);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-11 * w, "{g} vs {w}");
    }
    assert!((want[0] - (e1 / 2.0) / (1.0 - e1 * e1 / 4.0)).abs() < 1e-15);
}

fn run_to(dir: &Path, name: &str, extra: &[&str]) -> Vec<u8> {
    let path = dir.join(name);
    let mut args = vec!["cost", "--estimator", "env-mc", "--seed", "7", "--replicates", "300", "--r", "0.3,0.7"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", path.to_str().unwrap()]);
    let out = rwrp(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::read(path).unwrap()
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_to(dir.path(), "a.json", &[]);
    let b = run_to(dir.path(), "b.json", &[]);
    assert_eq!(a, b);
    let one = run_to(dir.path(), "w1.csv", &["--format", "csv", "--workers", "1"]);
    let three = run_to(dir.path(), "w3.csv", &["--format", "csv", "--workers", "3"]);
    assert_eq!(one, three);
}

#[test]
fn output_embeds_config_and_version() {
    let v = json(&rwrp(&["cost", "--r", "0.4", "--y", "2"]));
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(v["config"]["r"][0], 0.4);
    assert_eq!(v["config"]["y"][0], 2);
    assert_eq!(v["config"]["estimator"], "exact");
    assert!(v["config"].get("workers").is_none());
}

#[test]
fn exit_codes() {
    let bad = rwrp(&["cost", "--r", "1.5"]);
    assert_eq!(bad.status.code(), Some(1));
    let e = error_json(&bad);
    assert_eq!(e["code"], 1);
    assert!(e["message"].as_str().unwrap().starts_with("r:"));

    let usage = rwrp(&["cost", "--estimator", "bogus"]);
    assert_eq!(usage.status.code(), Some(1));
    assert_eq!(error_json(&usage)["kind"], "usage");

    let outside = rwrp(&["cost", "--N", "1", "--y", "3"]);
    assert_eq!(outside.status.code(), Some(1));
    assert_eq!(error_json(&outside)["kind"], "outside_box");

    // two walks from 0 almost surely die before reaching (3,3) at lambda = 5
    let numerical = rwrp(&[
        "cost", "--estimator", "path-mc", "--d", "2", "--N", "3", "--y", "3,3", "--replicates", "2", "--lambda", "5",
    ]);
    assert_eq!(numerical.status.code(), Some(2));
    assert_eq!(error_json(&numerical)["kind"], "no_hits");

    assert_eq!(rwrp(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"d": 1, "N": 2, "r": 0.3, "y": [2], "estimator": "env-mc", "replicates": 100, "seed": 3}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let from_file = json(&rwrp(&["cost", "--config", c, "--seed", "9"]));
    let direct = json(&rwrp(&[
        "cost", "--r", "0.3", "--y", "2", "--estimator", "env-mc", "--replicates", "100", "--seed", "9",
    ]));
    assert_eq!(from_file["config"]["seed"], 9);
    assert_eq!(from_file["result"], direct["result"]);

    std::fs::write(&cfg, r#"{"seeed": 3}"#).unwrap();
    let bad = rwrp(&["cost", "--config", c]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(error_json(&bad)["message"].as_str().unwrap().contains("seeed"));
}

#[test]
fn worker_environment_variable() {
    let run = |var: &str, extra: &[&str]| {
        let mut args = vec!["cost", "--estimator", "env-mc", "--replicates", "50"];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_rwrp"))
            .args(&args)
            .env("RWRP_DEFAULT_WORKERS", var)
            .output()
            .unwrap()
    };
    assert!(run("2", &[]).status.success());
    assert_eq!(run("many", &[]).status.code(), Some(1));
    // the flag wins over a malformed variable
    assert!(run("many", &["--workers", "1"]).status.success());
}

#[test]
fn frozen_csv_columns() {
    let cases: [(&[&str], &str); 6] = [
        (&["cost", "--format", "csv"], "r,lambda,value,std_error,replicates,estimator"),
        (&["derivative", "--format", "csv"], "r,formula,formula_se,flip,fd,abs_disc"),
        (
            &["lyapunov", "--n-list", "1,2", "--box-rule", "n+1", "--replicates", "20", "--format", "csv"],
            "kind,d,r,lambda,x,n,N,value,std_error",
        ),
        (
            &["bounds", "--exact", "--n-list", "1", "--box-rule", "n+1", "--replicates", "20", "--format", "csv"],
            "bound_id,p,q,x,measured,bound,margin,stderr,verdict",
        ),
        (
            &["solve", "--flip-table", "--format", "csv"],
            "z_coords,omega_z,log_ratio,psi,hit_prob,bound_rhs",
        ),
        (&["rate", "--format", "csv"], "kind,r,x,value,std_error,supremizer,evaluations"),
    ];
    for (args, header) in cases {
        let out = rwrp(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(csv_header(&out), header, "{args:?}");
    }
}

#[test]
fn derivative_routes_agree() {
    let v = json(&rwrp(&["derivative", "--d", "1", "--N", "1", "--y", "1", "--r", "0.5"]));
    let row = &v["result"][0];
    let (flip, fd) = (row["flip"].as_f64().unwrap(), row["fd"].as_f64().unwrap());
    assert!((flip - fd).abs() < 1e-6 * flip.abs());
    assert!(row["formula"].is_null());
}

#[test]
fn flip_sum_exact_matches_polynomial() {
    let v = json(&rwrp(&["russo", "--d", "1", "--N", "2", "--y", "2", "--r", "0.5"]));
    let row = &v["result"][0];
    let (value, analytic) = (row["value"].as_f64().unwrap(), row["analytic"].as_f64().unwrap());
    assert!((value - analytic).abs() < 1e-9 * analytic);
    assert_eq!(row["lower_verdict"], "PASS");
    assert_eq!(row["upper_verdict"], "PASS");
}

#[test]
fn solve_reads_environment_file() {
    let dir = tempfile::tempdir().unwrap();
    let env = dir.path().join("env.txt");
    std::fs::write(&env, "1 1 - -\n0 1\n1 1\n2 0\n").unwrap();
    let v = json(&rwrp(&["solve", "--N", "1", "--env", env.to_str().unwrap()]));
    let e1 = (-1.0f64).exp();
    let want = -((e1 / 2.0) / (1.0 - e1 * e1 / 4.0)).ln();
    assert!((v["result"]["cost"].as_f64().unwrap() - want).abs() < 1e-10);
    let mismatch = rwrp(&["solve", "--N", "2", "--env", env.to_str().unwrap()]);
    assert_eq!(mismatch.status.code(), Some(1));
}

#[test]
fn verify_quick_subset() {
    let out = rwrp(&["verify", "--profile", "quick", "--only", "1,2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 2);
}

#[test]
fn help_lists_every_flag() {
    let out = rwrp(&["--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--d", "--N", "--box-rule", "--r", "--p", "--q", "--lambda", "--y", "--direction", "--n-list", "--estimator",
        "--replicates", "--seed", "--tol", "--workers", "--out", "--format", "--config",
    ] {
        assert!(text.contains(&format!("{flag} ")), "missing {flag}");
    }
    assert!(text.contains("[default: 2n+5]"));
}
