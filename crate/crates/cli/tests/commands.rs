use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skel::data::{load_csv, Scaler, LINEAR_SINK_MATRIX};
use skel::embed::{model_from_json, model_to_json, KoopmanModel, LeftInverseKind, ModelSpec, OperatorParams};
use skel::linalg::Mat;
use skel::params::lkis_operator;
use skel::Traj;

fn skel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skel"))
        .current_dir(dir)
        .env_remove("SKEL_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["gen-data", "--out", name];
    args.extend_from_slice(extra);
    ok(&skel(dir, &args));
    dir.join(name)
}

const SMALL: &[&str] = &["--epochs", "30", "--embedding-dim", "4", "--hidden", "8"];

#[test]
fn gen_data_writes_expected_rows_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--kind", "tanh_contraction", "--n-traj", "5", "--steps", "200", "--seed", "1"];
    let a = gen(dir.path(), "a.csv", &args);
    let b = gen(dir.path(), "b.csv", &args);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1001);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flagged = gen(dir.path(), "flag.csv", &["--seed", "7"]);
    let out = Command::new(env!("CARGO_BIN_EXE_skel"))
        .current_dir(dir.path())
        .env("SKEL_SEED", "7")
        .args(["gen-data", "--out", "env.csv"])
        .output()
        .unwrap();
    ok(&out);
    let plain = gen(dir.path(), "plain.csv", &[]);
    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&flagged), read(&dir.path().join("env.csv")));
    assert_ne!(read(&flagged), read(&plain));
}

#[test]
fn noiseless_linear_data_recovers_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen(dir.path(), "lin.csv", &["--kind", "linear_sink", "--noise-std", "0", "--n-traj", "3", "--steps", "20"]);
    let trajs: Vec<Traj> = load_csv(&path).unwrap();
    let (mut now, mut next) = (Vec::new(), Vec::new());
    for t in &trajs {
        for w in t.states.windows(2) {
            now.push(w[0].clone());
            next.push(w[1].clone());
        }
    }
    let cols = |v: &Vec<Vec<f64>>| Mat::from_fn(2, v.len(), |r, c| v[c][r]);
    let a = lkis_operator(&cols(&next), &cols(&now), 0.0).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert!((a[(r, c)] - LINEAR_SINK_MATRIX[r][c]).abs() < 1e-8);
        }
    }
}

#[test]
fn train_writes_model_and_stable_log() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.csv", &["--n-traj", "3", "--steps", "20"]);
    let mut args = vec!["train", "--data", "d.csv", "--out", "m.json", "--log", "log.csv", "--method", "skel"];
    args.extend_from_slice(SMALL);
    ok(&skel(dir.path(), &args));
    let model: KoopmanModel<f64> = model_from_json(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(model.big_n(), 4);
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "epoch,J_se,J_rec,total,spectral_radius,wall_ms");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    for row in rows {
        let rho: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!(rho < 1.0);
    }
}

#[test]
fn flags_override_config_fields() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.csv", &["--n-traj", "2", "--steps", "15"]);
    let cfg = r#"{"data": "d.csv", "out": "m.json", "log": "log.csv",
                  "train": {"epochs": 3, "embedding_dim": 4, "hidden_dims": [6]}}"#;
    std::fs::write(dir.path().join("cfg.json"), cfg).unwrap();
    ok(&skel(dir.path(), &["train", "--config", "cfg.json"]));
    let rows = |d: &Path| std::fs::read_to_string(d.join("log.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows(dir.path()), 3);
    ok(&skel(dir.path(), &["train", "--config", "cfg.json", "--epochs", "5"]));
    assert_eq!(rows(dir.path()), 5);
}

#[test]
fn bad_config_and_missing_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = skel(dir.path(), &["train", "--data", "absent.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));

    std::fs::write(dir.path().join("cfg.json"), r#"{"train": {"epochs": 3, "learning_rate": 1}}"#).unwrap();
    let out = skel(dir.path(), &["train", "--config", "cfg.json", "--data", "d.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    assert_eq!(skel(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(skel(dir.path(), &["gen-data", "--kind", "lorenz", "--out", "x.csv"]).status.code(), Some(1));
}

#[test]
fn simulate_with_zero_horizon_returns_reconstructed_start() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.csv", &["--n-traj", "2", "--steps", "20"]);
    let mut args = vec!["train", "--data", "d.csv", "--out", "m.json"];
    args.extend_from_slice(SMALL);
    ok(&skel(dir.path(), &args));
    ok(&skel(dir.path(), &["simulate", "--model", "m.json", "--data", "d.csv", "--out", "s.csv", "--horizon", "0"]));
    let sims: Vec<Traj> = load_csv(dir.path().join("s.csv")).unwrap();
    let data: Vec<Traj> = load_csv(dir.path().join("d.csv")).unwrap();
    let model: KoopmanModel<f64> = model_from_json(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(sims.len(), 2);
    for (s, d) in sims.iter().zip(&data) {
        assert_eq!(s.source_id, format!("{}_sim", d.source_id));
        assert_eq!(s.len(), 1);
        let xs = Mat::col_vec(&model.scaler.apply(&d.states[0]));
        let back = model.scaler.invert(model.phi_left_value(&model.phi_value(&xs).unwrap()).unwrap().as_slice());
        for (a, b) in s.states[0].iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // without a horizon the rollout follows the input length
    ok(&skel(dir.path(), &["simulate", "--model", "m.json", "--data", "d.csv", "--out", "full.csv"]));
    let full: Vec<Traj> = load_csv(dir.path().join("full.csv")).unwrap();
    assert_eq!(full[0].len(), data[0].len());
}

#[test]
fn eval_reports_error_metrics() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.csv", &["--n-traj", "2", "--steps", "20"]);
    let mut args = vec!["train", "--data", "d.csv", "--out", "m.json"];
    args.extend_from_slice(SMALL);
    ok(&skel(dir.path(), &args));
    ok(&skel(dir.path(), &["eval", "--model", "m.json", "--data", "d.csv", "--out", "e.json"]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
    for key in ["nse", "rec_error", "rho"] {
        assert!(v[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(v["per_trajectory"].as_array().unwrap().len(), 2);
}

#[test]
fn certify_of_unstable_model_is_a_fail_verdict_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.csv", &["--kind", "linear_sink", "--n-traj", "2", "--steps", "10"]);
    let mut spec = ModelSpec::new(2, 2);
    spec.hidden = vec![4];
    spec.left_inverse = LeftInverseKind::Projection;
    let mut model = KoopmanModel::<f64>::init(&spec, Scaler::identity(2), 0).unwrap();
    model.op = OperatorParams::Lkis {
        ridge: 0.0,
        a: Mat::from_diag(&[1.05, 0.3]),
    };
    std::fs::write(dir.path().join("bad.json"), model_to_json(&model).unwrap()).unwrap();
    let out = skel(dir.path(), &["certify", "--model", "bad.json", "--data", "d.csv", "--out", "c.json"]);
    ok(&out);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(v["verdict"], "fail");
    assert!(v["rho"].as_f64().unwrap() > 1.0);
}

#[test]
fn compare_writes_report_and_fold_table() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "d.csv", &["--n-traj", "3", "--steps", "15"]);
    let mut args = vec!["compare", "--data", "d.csv", "--out", "r.json", "--csv", "f.csv", "--methods", "skel,lkis", "--seeds", "0,1", "--workers", "2"];
    args.extend_from_slice(&["--epochs", "10", "--embedding-dim", "4", "--hidden", "8"]);
    ok(&skel(dir.path(), &args));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["folds"].as_array().unwrap().len(), 2 * 2 * 3);
    assert!(v["summary"]["skel"]["median_nse"].is_number());
    assert!(v["summary"]["lkis"]["median_nse"].is_number());
    let rows = std::fs::read_to_string(dir.path().join("f.csv")).unwrap().lines().count();
    assert_eq!(rows, 13);

    // the same run on one worker produces the same report
    let single: Vec<&str> = args
        .iter()
        .map(|a| match *a {
            "2" => "1",
            "r.json" => "r1.json",
            "f.csv" => "f1.csv",
            other => other,
        })
        .collect();
    ok(&skel(dir.path(), &single));
    let read = |p: &str| std::fs::read_to_string(dir.path().join(p)).unwrap();
    assert_eq!(read("r.json"), read("r1.json"));
    assert_eq!(read("f.csv"), read("f1.csv"));
}
