use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rgpo_core::diagnostics::read_metrics;
use rgpo_core::prefalign::read_align_csv;

const SMALL_TRAIN: &str = "\
algorithm = rgpo
# tiny run so the CLI tests stay fast
total_iterations = 4
rollout_steps = 64
minibatch_size = 32
n_epochs = 2
hidden = 8
horizon = 20
";

fn rgpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgpo")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rgpo(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("train.cfg");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn final_return(path: &Path) -> f64 {
    let m = read_metrics(path).unwrap();
    let k = ((m.len() as f64 * 0.1).ceil() as usize).max(1);
    m[m.len() - k..].iter().map(|x| x.mean_return).sum::<f64>() / k as f64
}

#[test]
fn train_writes_manifest_per_seed_csvs_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let out = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--seeds", "0,1,2", "--out", out.to_str().unwrap()]);
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("command = train") && manifest.contains("seeds = 0,1,2"));
    for s in 0..3 {
        assert_eq!(read_metrics(&out.join(format!("metrics_seed{s}.csv"))).unwrap().len(), 4);
        assert!(out.join(format!("params_seed{s}.txt")).exists());
    }

    let finals: Vec<f64> = (0..3).map(|s| final_return(&out.join(format!("metrics_seed{s}.csv")))).collect();
    let mean = finals.iter().sum::<f64>() / 3.0;
    let std = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    let rows = csv_rows(&out.join("summary.csv"));
    assert_eq!(rows.len(), 1);
    let got_mean: f64 = rows[0][2].parse().unwrap();
    let got_std: f64 = rows[0][3].parse().unwrap();
    assert!((got_mean - mean).abs() < 1e-9 * mean.abs().max(1.0));
    assert!((got_std - std).abs() < 1e-9 * std.max(1.0));
}

#[test]
fn rerun_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["train", "--config", &cfg, "--seeds", "5", "--out", out.to_str().unwrap()]);
    }
    for f in ["metrics_seed5.csv", "params_seed5.txt", "summary.csv", "config.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let out = dir.path().join("o");
    ok(&["train", "--config", &cfg, "--algorithm", "ppo", "--gate", "sigmoid:20", "--set", "seed=9", "--out", out.to_str().unwrap()]);
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("algorithm = ppo") && written.contains("gate = sigmoid:20"));
    assert!(written.contains("total_iterations = 4"));
}

#[test]
fn bad_configs_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = write_config(dir.path(), "total_iterations = 2\n");
    let r = rgpo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("algorithm"));
    let cfg = write_config(dir.path(), "algorithm = rgpo\nlearning_rat = 1\n");
    let r = rgpo(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rat"));
}

#[test]
fn gatescan_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    ok(&["gatescan", "--samples", "5000", "--out", out.to_str().unwrap()]);
    let grids: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("grid_"))
        .collect();
    assert_eq!(grids.len(), 5);
    let sig = csv_rows(&out.join("grid_sigmoid_5.csv"));
    assert_eq!(sig[100], vec!["1", "0.5", "1.25"]);
    for gate in ["sigmoid_5", "clipped_linear_2", "temperature_1", "identity_is", "ppo_clip_0.2"] {
        for sigma in ["0.35", "0.15", "0.08"] {
            let rows = csv_rows(&out.join(format!("hist_{gate}_sigma{sigma}.csv")));
            assert_eq!(rows.iter().map(|r| r[2].parse::<u64>().unwrap()).sum::<u64>(), 5000);
        }
    }
}

#[test]
fn theory_checks_pass_and_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = out.to_str().unwrap();
    ok(&["theory", "bias", "--trials", "100", "--out", o]);
    let rows = csv_rows(&out.join("bias.csv"));
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r[4] == "1"));
    ok(&["theory", "improvement", "--trials", "200", "--out", o]);
    assert_eq!(csv_rows(&out.join("improvement.csv")).len(), 200);
    let text = ok(&["theory", "heavy_tail", "--alpha", "1.5", "--out", o]);
    assert!(text.contains("diverges true"), "{text}");
    ok(&["theory", "reinforce", "--out", o]);
    assert!(!rgpo(&["theory", "nonsense", "--out", o]).status.success());
}

#[test]
fn theory_exits_nonzero_when_a_check_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    // two nearly equal sample sizes cannot show a tenfold growth
    let r = rgpo(&["theory", "heavy_tail", "--alpha", "1.5", "--sizes", "1000,1001", "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(out.join("manifest.txt").exists());
}

#[test]
fn align_runs_every_algorithm_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    ok(&["align", "--seeds", "0,1,2", "--out", out.to_str().unwrap()]);
    let csvs = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("align_")).count();
    assert_eq!(csvs, 12);
    let pareto = csv_rows(&out.join("pareto.csv"));
    assert_eq!(pareto.len(), 16);
    for alg in ["rgpo_dual", "rgpo_maxratio", "ppo_rlhf", "grpo"] {
        let mut rewards = Vec::new();
        let mut kls = Vec::new();
        for s in 0..3 {
            let rows = read_align_csv(&out.join(format!("align_{alg}_seed{s}.csv"))).unwrap();
            let win: Vec<_> = rows.iter().filter(|r| r.iteration >= 300).collect();
            rewards.push(win.iter().map(|r| r.mean_reward).sum::<f64>() / win.len() as f64);
            kls.push(win.iter().map(|r| r.kl_ref).sum::<f64>() / win.len() as f64);
        }
        let row = pareto.iter().find(|r| r[0] == alg && r[1] == "mean").unwrap();
        let reward: f64 = row[2].parse().unwrap();
        let kl: f64 = row[3].parse().unwrap();
        assert!((reward - rewards.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!((kl - kls.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
}

#[test]
fn align_config_missing_key_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a.cfg");
    fs::write(&cfg, "beta_ref = 0.1\n").unwrap();
    let r = rgpo(&["align", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("`algorithm`"));
}

#[test]
fn sweeps_write_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let out = dir.path().join("k");
    ok(&["sweep", "--param", "gate", "--values", "sigmoid:2,sigmoid:5,sigmoid:10,sigmoid:20", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(csv_rows(&out.join("sweep_summary.csv")).len(), 4);
    let out = dir.path().join("b");
    ok(&["sweep", "--param", "beta0", "--values", "0.2,0.5,1.0", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(csv_rows(&out.join("sweep_summary.csv")).len(), 3);
}

#[test]
fn single_value_sweep_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_TRAIN);
    let t = dir.path().join("t");
    let s = dir.path().join("s");
    ok(&["train", "--config", &cfg, "--seeds", "1", "--out", t.to_str().unwrap()]);
    ok(&["sweep", "--param", "beta0", "--values", "0.5", "--config", &cfg, "--seeds", "1", "--out", s.to_str().unwrap()]);
    for f in ["metrics_seed1.csv", "params_seed1.txt"] {
        assert_eq!(fs::read(t.join(f)).unwrap(), fs::read(s.join("beta0_0.5").join(f)).unwrap());
    }
    let a = csv_rows(&t.join("summary.csv"));
    let b = csv_rows(&s.join("sweep_summary.csv"));
    assert_eq!(a[0][1..], b[0][1..]);
}
