use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stackstep"));
    c.env_remove("STACKSTEP_THREADS");
    c
}

fn stackstep(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → bytes for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const SHORT_TRAIN: &str = r#"{"schema_version": 1, "iters": 60, "eval_period": 20, "seeds": [0, 1],
    "landscape": {"checkpoints": [0, 30, 60], "template": {"resolution": 7}}}"#;

#[test]
fn train_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SHORT_TRAIN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = stackstep(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    // 2 seeds × 3 arms × (trace, meta, trajectory) + summary.
    assert_eq!(ta.len(), 19);
    assert_eq!(ta, tb);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SHORT_TRAIN);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = stackstep(&["train", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin()
        .args(["train", "--config", s(&cfg), "--out", s(&b)])
        .env("STACKSTEP_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn arms_share_the_initialization() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SHORT_TRAIN);
    let out = tmp.path().join("o");
    assert_eq!(code(&stackstep(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    for seed in [0, 1] {
        let init: Vec<Value> = ["nonuniform", "uniform_alpha", "uniform_beta"]
            .iter()
            .map(|arm| read_json(&out.join(format!("train/seed{seed}_{arm}.trajectory.json")))["snapshots"][0].clone())
            .collect();
        assert_eq!(init[0]["k"], 0);
        assert!(init.iter().all(|v| *v == init[0]));
        let first_rows: Vec<String> = ["nonuniform", "uniform_alpha", "uniform_beta"]
            .iter()
            .map(|arm| {
                let csv = fs::read_to_string(out.join(format!("train/seed{seed}_{arm}.csv"))).unwrap();
                csv.lines().nth(1).unwrap().split(',').take(5).collect::<Vec<_>>().join(",")
            })
            .collect();
        assert!(first_rows.iter().all(|r| *r == first_rows[0]));
    }
    let summary = read_json(&out.join("train/summary.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 2);
    assert_ne!(summary["rows"][0]["init_hash"], summary["rows"][1]["init_hash"]);
}

#[test]
fn zero_iterations_leave_only_the_init_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"schema_version": 1, "iters": 0, "seeds": [3]}"#);
    let out = tmp.path().join("o");
    let o = stackstep(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("train/seed3_nonuniform.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "k,loss,phi,w_track,stationarity,alpha,beta");
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn csv_values_carry_full_precision() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"schema_version": 1, "iters": 0}"#);
    let out = tmp.path().join("o");
    assert_eq!(code(&stackstep(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let csv = fs::read_to_string(out.join("train/seed0_nonuniform.csv")).unwrap();
    let loss = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap();
    let mantissa = loss.split('e').next().unwrap().replace(['.', '-'], "");
    assert_eq!(mantissa.len(), 17, "{loss}");
}

#[test]
fn seeds_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"schema_version": 1, "iters": 5, "seeds": [0]}"#);
    let out = tmp.path().join("o");
    let o = stackstep(&["train", "--config", s(&cfg), "--out", s(&out), "--seeds", "4,9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("train/seed4_uniform_beta.csv").exists());
    assert!(out.join("train/seed9_nonuniform.csv").exists());
    assert!(!out.join("train/seed0_nonuniform.csv").exists());
}

#[test]
fn relu_classification_is_rejected_with_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "problem": {"kind": "synthetic_classification", "activation": "relu"}}"#,
    );
    for cmd in ["gradcheck", "train"] {
        let o = stackstep(&[cmd, "--config", s(&cfg), "--out", s(tmp.path())]);
        assert_eq!(code(&o), 2);
        assert!(stderr(&o).contains("differentiable"), "{}", stderr(&o));
    }
}

#[test]
fn config_errors_name_the_problem() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{\"schema_version\": 1,\n \"iterz\": 5}");
    let o = stackstep(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("iterz") && e.contains("line 2"), "{e}");

    let cfg = write_config(tmp.path(), "d.json", r#"{"iters": 5}"#);
    let o = stackstep(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schema_version"));

    let o = stackstep(&["train", "--config", s(&tmp.path().join("absent.json"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.json"));

    let o = bin().args(["constants"]).env("STACKSTEP_THREADS", "zero").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_check() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"schema_version": 1, "gradcheck": {"points": 10}}"#);
    let o = stackstep(&["gradcheck", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 8);
    let report = read_json(&tmp.path().join("gradcheck.json"));
    assert_eq!(report["checks"].as_array().unwrap().len(), 8);

    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"schema_version": 1, "gradcheck": {"points": 10, "corrupt": "tdc_grad_w"}}"#,
    );
    let o = stackstep(&["gradcheck", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("tdc_grad_w"));
    assert_eq!(stdout(&o).matches("FAIL").count(), 1);
}

#[test]
fn landscape_writes_six_surfaces_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SHORT_TRAIN);
    let out = tmp.path().join("o");
    assert_eq!(code(&stackstep(&["train", "--config", s(&cfg), "--out", s(&out), "--seeds", "1"])), 0);
    let traj = out.join("train/seed1_nonuniform.trajectory.json");
    let lout = tmp.path().join("l");
    let o = stackstep(&["landscape", "--config", s(&cfg), "--out", s(&lout), "--trajectory", s(&traj)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files = tree(&lout.join("landscape"));
    assert_eq!(files.keys().filter(|p| p.extension().unwrap() == "csv").count(), 6);
    assert_eq!(files.keys().filter(|p| p.extension().unwrap() == "json").count(), 1);
    let summary = read_json(&lout.join("landscape/summary.json"));
    assert_eq!(summary["seed"], 1);
    let cps = summary["checkpoints"].as_array().unwrap();
    assert_eq!(cps.len(), 3);
    for c in cps {
        assert!(c["joint"]["lambda_max"].is_f64());
        assert!(c["stackelberg"]["lambda_max"].is_f64());
    }
    let surface = String::from_utf8(files[Path::new("surface_k30_stackelberg.csv")].clone()).unwrap();
    assert_eq!(surface.lines().count(), 1 + 7 * 7);

    // Without a trajectory the run is trained in place; the directions and
    // iterates are the same, so the summaries agree.
    let cfg1 = write_config(
        tmp.path(),
        "c1.json",
        r#"{"schema_version": 1, "eval_period": 20, "seeds": [1],
            "landscape": {"checkpoints": [0, 30, 60], "template": {"resolution": 7}}}"#,
    );
    let iout = tmp.path().join("i");
    let o = stackstep(&["landscape", "--config", s(&cfg1), "--out", s(&iout)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&iout.join("landscape/summary.json")), summary);
}

#[test]
fn landscape_reports_a_missing_trajectory() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no_such_trajectory.json");
    let o = stackstep(&["landscape", "--out", s(tmp.path()), "--trajectory", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no_such_trajectory.json"), "{}", stderr(&o));
}

#[test]
fn landscape_reports_an_absent_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SHORT_TRAIN);
    let out = tmp.path().join("o");
    assert_eq!(code(&stackstep(&["train", "--config", s(&cfg), "--out", s(&out), "--seeds", "0"])), 0);
    let cfg2 = write_config(
        tmp.path(),
        "c2.json",
        r#"{"schema_version": 1, "landscape": {"checkpoints": [0, 45], "template": {"resolution": 5}}}"#,
    );
    let traj = out.join("train/seed0_nonuniform.trajectory.json");
    let o = stackstep(&["landscape", "--config", s(&cfg2), "--out", s(&out), "--trajectory", s(&traj)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("k = 45"), "{}", stderr(&o));
}

fn write_trace(path: &Path, rows: &[(u64, f64)]) {
    let mut s = String::from("k,loss,phi\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v:.16e},\n"));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn ratefit_recovers_an_exact_power_law() {
    let tmp = TempDir::new().unwrap();
    let rows: Vec<(u64, f64)> = (0..=200).map(|i| (i * 50, if i == 0 { 1.0 } else { ((i * 50) as f64).powf(-2.0 / 3.0) })).collect();
    let trace = tmp.path().join("t.csv");
    write_trace(&trace, &rows);
    let o = stackstep(&["ratefit", "--out", s(tmp.path()), s(&trace)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = &read_json(&tmp.path().join("ratefit.json"))["fit"];
    assert!((fit["slope"].as_f64().unwrap() + 2.0 / 3.0).abs() < 1e-6);

    let flat: Vec<(u64, f64)> = (0..=40).map(|i| (i, 3.5)).collect();
    let trace = tmp.path().join("flat.csv");
    write_trace(&trace, &flat);
    let o = stackstep(&["ratefit", "--out", s(tmp.path()), s(&trace)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = &read_json(&tmp.path().join("ratefit.json"))["fit"];
    assert!(fit["slope"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn ratefit_averages_files_before_fitting() {
    let tmp = TempDir::new().unwrap();
    // c·k^{-1/2} with different c per file is still slope −1/2 on average.
    let paths: Vec<PathBuf> = [1.0, 3.0]
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let rows: Vec<(u64, f64)> = (1..=100).map(|k| (k * 10, c * ((k * 10) as f64).powf(-0.5))).collect();
            let p = tmp.path().join(format!("s{i}.csv"));
            write_trace(&p, &rows);
            p
        })
        .collect();
    let o = stackstep(&["ratefit", s(&paths[0]), s(&paths[1])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("slope -0.500000"), "{}", stdout(&o));
}

#[test]
fn ratefit_names_the_offending_row() {
    let tmp = TempDir::new().unwrap();
    let mut rows: Vec<(u64, f64)> = (1..=40).map(|k| (k, 1.0 / k as f64)).collect();
    rows[30].1 = -1.0;
    let trace = tmp.path().join("t.csv");
    write_trace(&trace, &rows);
    let o = stackstep(&["ratefit", s(&trace)]);
    assert_eq!(code(&o), 2);
    // Data row 30 is line 32 of the file (header is line 1).
    assert!(stderr(&o).contains("row 32"), "{}", stderr(&o));

    let o = stackstep(&["ratefit", "--quantity", "phi", s(&trace)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 2") && stderr(&o).contains("phi"), "{}", stderr(&o));

    let o = stackstep(&["ratefit", "--quantity", "stationarity", s(&trace)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no column `stationarity`"));
}

#[test]
fn tdc_on_the_chain_walk_emits_exact_columns() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "seeds": [0, 1], "problem": {"kind": "tdc"},
            "schedule": {"kind": "thm2", "alpha0": 0.5, "beta0": 1.0},
            "tdc": {"iters": 5000, "eval_period": 500}}"#,
    );
    let out = tmp.path().join("o");
    let o = stackstep(&["tdc", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("tdc/seed1.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,mspbe,mu_err,value_err,alpha,beta,zeta");
    assert_eq!(lines.len(), 1 + 11);
    let first: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let last: f64 = lines[11].split(',').nth(1).unwrap().parse().unwrap();
    assert!(last < first);
    let summary = read_json(&out.join("tdc/summary.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 2);
    assert!(summary["w_td"].is_null());
}

#[test]
fn frozen_body_tdc_reaches_the_linear_fixed_point() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "problem": {"kind": "tdc", "activation": "identity"},
            "schedule": {"kind": "thm2", "alpha0": 0.0, "beta0": 1.0},
            "tdc": {"iters": 400000, "eval_period": 100000, "frozen_body": true}}"#,
    );
    let out = tmp.path().join("o");
    let o = stackstep(&["tdc", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read_json(&out.join("tdc/summary.json"));
    let err = summary["rows"][0]["fixed_point_error"].as_f64().unwrap();
    assert!(err < 1e-2, "{err}");
}

#[test]
fn malformed_mdp_names_the_row() {
    let tmp = TempDir::new().unwrap();
    let mdp = r#"{"n_states": 2, "n_actions": 1, "gamma": 0.9,
        "P": [[[0.5, 0.5]], [[0.7, 0.2]]], "r": [[0.0], [1.0]], "pi": [[1.0], [1.0]]}"#;
    let mdp_path = write_config(tmp.path(), "mdp.json", mdp);
    let cfg = format!(
        r#"{{"schema_version": 1, "problem": {{"kind": "tdc", "mdp": {{"file": {}}}}}}}"#,
        serde_json::to_string(s(&mdp_path)).unwrap()
    );
    let cfg = write_config(tmp.path(), "c.json", &cfg);
    let o = stackstep(&["tdc", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("P[1][0]"), "{}", stderr(&o));
}

#[test]
fn degenerate_features_are_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    // Eight features on five states: the feature covariance is singular.
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "problem": {"kind": "tdc", "features": {"random": {"dim": 8, "seed": 0}}},
            "schedule": {"kind": "thm2", "alpha0": 0.1, "beta0": 1.0}, "tdc": {"iters": 10, "eval_period": 5}}"#,
    );
    let o = stackstep(&["tdc", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn tdc_needs_a_tdc_problem() {
    let o = stackstep(&["tdc"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("synthetic_regression"));
}

#[test]
fn strict_schedule_rejects_a_violating_schedule() {
    let tmp = TempDir::new().unwrap();
    // α₀ = 1 is far below 8/λ_Φ = 160.
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "iters": 10, "problem": {"kind": "toy"},
            "schedule": {"kind": "thm2", "alpha0": 1.0, "beta0": 1.0},
            "constants": {"lambda": 0.0002, "L": 2000, "sigma2": 1, "rho": 0, "rho_hat": 1, "lambda_phi": 0.05}}"#,
    );
    let out = tmp.path().join("o");
    let o = stackstep(&["train", "--config", s(&cfg), "--out", s(&out), "--strict-schedule"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schedule violates"), "{}", stderr(&o));
    let o = stackstep(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read_json(&out.join("train/summary.json"));
    assert!(!summary["schedule_report"].is_null());
}

#[test]
fn constants_prints_the_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "problem": {"kind": "toy"}, "schedule": {"kind": "thm2", "alpha0": 160, "beta0": 60},
            "estimate": {"n_points": 64}}"#,
    );
    let o = stackstep(&["constants", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let printed: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed, read_json(&tmp.path().join("constants.json")));
    assert_eq!(printed["constants"]["provenance"]["source"], "empirical");
    assert_eq!(printed["schedule"]["h"], 464.0);
}

#[test]
fn study_checks_its_criterion() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"schema_version": 1, "studies": {"frozen_tdc": {"iters": 1000}}}"#,
    );
    // A thousand iterations are far too few to reach the fixed point.
    let o = stackstep(&["study", "frozen_tdc", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(tmp.path().join("study_frozen_tdc.json").exists());

    let o = stackstep(&["study", "nonsense"]);
    assert_eq!(code(&o), 2);
}
