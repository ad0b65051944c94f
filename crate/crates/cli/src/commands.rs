use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use rgpo_core::diagnostics::IterationMetrics;
use rgpo_core::gatebank::{gate_grid, weight_histogram, write_grid_csv, write_histogram_csv, Gate};
use rgpo_core::kv::{render, KvFile};
use rgpo_core::prefalign::{run_alignment, AlignAlgorithm, AlignConfig, AlignRun};
use rgpo_core::rng::{indexed, stream, Stream};
use rgpo_core::theorylab::{
    check_heavy_tail, check_variance_bound, reinforce_trial, run_bias_trials, run_improvement_trials, write_reports,
    BoundReport,
};
use rgpo_core::trainer::{train as run_training, TrainConfig};
use rgpo_core::Error;

use crate::summary::{write_pareto, write_train_summaries, TrainSummary};
use crate::TrainArgs;

/// Log-ratio spreads of the histogram stages: early, middle and late training.
pub const HISTOGRAM_SIGMAS: [f64; 3] = [0.35, 0.15, 0.08];

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

/// Creates `out` and writes `manifest.txt` before anything else.
fn write_manifest(out: &Path, command: &str, config: Option<&Path>, seeds: &[u64], extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut pairs = vec![
        ("command", command.to_string()),
        ("config", config.map(|p| p.display().to_string()).unwrap_or_default()),
        ("seeds", join_seeds(seeds)),
        ("out", out.display().to_string()),
        ("timestamp", timestamp.to_string()),
    ];
    pairs.extend(extra.iter().cloned());
    fs::write(out.join("manifest.txt"), render(&pairs))?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Defaults, then the config file, then the flags.
pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let mut kv = KvFile::parse(&read(path)?).with_context(|| format!("in {}", path.display()))?;
        if !kv.contains("algorithm") && args.algorithm.is_none() {
            return Err(Error::MissingKey("algorithm".into())).with_context(|| format!("in {}", path.display()));
        }
        cfg.apply(&mut kv)?;
        kv.finish().with_context(|| format!("in {}", path.display()))?;
    }
    for (key, value) in [("algorithm", &args.algorithm), ("gate", &args.gate), ("env", &args.env)] {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains every seed in parallel; writes `metrics_seed<s>.csv` and
/// `params_seed<s>.txt` into `dir`.
fn train_seeds(cfg: &TrainConfig, seeds: &[u64], dir: &Path) -> Result<Vec<Vec<IterationMetrics>>> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..cfg.clone() };
                scope.spawn(move || -> Result<Vec<IterationMetrics>> {
                    let outcome = run_training(&cfg).with_context(|| format!("seed {seed}"))?;
                    outcome.write(&dir.join(format!("metrics_seed{seed}.csv")), &dir.join(format!("params_seed{seed}.txt")))?;
                    Ok(outcome.metrics)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().map_err(|_| anyhow!("training thread panicked"))?).collect()
    })
}

pub fn train(args: &TrainArgs) -> Result<bool> {
    let cfg = resolve_train_config(args)?;
    write_manifest(&args.out, "train", args.config.as_deref(), &args.seeds, &[])?;
    let runs = train_seeds(&cfg, &args.seeds, &args.out)?;
    let summary = TrainSummary::from_runs(&cfg.algorithm.to_string(), &runs);
    write_train_summaries(&args.out.join("summary.csv"), std::slice::from_ref(&summary))?;
    println!(
        "{}: final return {:.3} ± {:.3}, spike rate {:.3}, mean KL {:.4}, max KL {:.4}, ESS {:.3}",
        summary.label, summary.return_mean, summary.return_std, summary.spike_rate, summary.mean_kl, summary.max_kl, summary.ess
    );
    Ok(true)
}

pub fn sweep(param: &str, values: &[String], args: &TrainArgs) -> Result<bool> {
    let base = resolve_train_config(args)?;
    write_manifest(&args.out, "sweep", args.config.as_deref(), &args.seeds, &[("param", param.to_string()), ("values", values.join(","))])?;
    let mut rows = Vec::new();
    for value in values {
        let mut cfg = base.clone();
        cfg.set(param, value)?;
        cfg.validate()?;
        let dir = args.out.join(format!("{param}_{}", file_safe(value)));
        let runs = train_seeds(&cfg, &args.seeds, &dir)?;
        let summary = TrainSummary::from_runs(&format!("{param}={value}"), &runs);
        write_train_summaries(&dir.join("summary.csv"), std::slice::from_ref(&summary))?;
        println!("{}: final return {:.3} ± {:.3}, spike rate {:.3}", summary.label, summary.return_mean, summary.return_std, summary.spike_rate);
        rows.push(summary);
    }
    write_train_summaries(&args.out.join("sweep_summary.csv"), &rows)?;
    Ok(true)
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub fn gatescan(gates: &[String], r_min: f64, r_max: f64, points: usize, samples: usize, seed: u64, out: &Path) -> Result<bool> {
    let gates: Vec<Gate> = if gates.is_empty() {
        Gate::defaults().to_vec()
    } else {
        gates.iter().map(|g| g.parse()).collect::<rgpo_core::Result<_>>()?
    };
    write_manifest(out, "gatescan", None, &[seed], &[("gates", gates.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","))])?;
    for (i, gate) in gates.iter().enumerate() {
        let name = file_safe(&gate.to_string());
        write_grid_csv(&out.join(format!("grid_{name}.csv")), &gate_grid(gate, r_min, r_max, points)?)?;
        for (j, sigma) in HISTOGRAM_SIGMAS.iter().enumerate() {
            let mut rng = indexed(seed, Stream::Aux, (i * HISTOGRAM_SIGMAS.len() + j) as u32);
            let hist = weight_histogram(gate, *sigma, samples, &mut rng)?;
            write_histogram_csv(&out.join(format!("hist_{name}_sigma{sigma}.csv")), &hist)?;
        }
    }
    println!("wrote {} grids and {} histograms to {}", gates.len(), gates.len() * HISTOGRAM_SIGMAS.len(), out.display());
    Ok(true)
}

pub struct TheoryOptions {
    pub trials: Option<usize>,
    pub seed: u64,
    pub gate: Option<String>,
    pub alpha: f64,
    pub sizes: Vec<usize>,
    pub samples: usize,
    pub delta: f64,
    pub scale: f64,
}

pub const THEORY_CHECKS: [&str; 5] = ["bias", "variance", "heavy_tail", "improvement", "reinforce"];

fn report_outcome(name: &str, reports: &[BoundReport], out: &Path) -> Result<bool> {
    write_reports(&out.join(format!("{name}.csv")), reports)?;
    let failures = reports.iter().filter(|r| !r.pass).count();
    let min_slack = reports.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    println!("{name}: {} trials, {failures} failures, min slack {min_slack:.3e}", reports.len());
    Ok(failures == 0)
}

fn run_check(check: &str, opts: &TheoryOptions, out: &Path) -> Result<bool> {
    let gate = opts.gate.as_deref().map(str::parse::<Gate>).transpose()?;
    let sigmoid5 = Gate::Sigmoid { k: 5.0 };
    match check {
        "bias" => {
            let gates = match gate {
                Some(g) => vec![g],
                None => vec![Gate::Sigmoid { k: 2.0 }, sigmoid5, Gate::Sigmoid { k: 20.0 }],
            };
            report_outcome(check, &run_bias_trials(&gates, opts.trials.unwrap_or(100), opts.seed)?, out)
        }
        "variance" => {
            let trials = opts.trials.unwrap_or(1);
            let reports = (0..trials)
                .map(|i| {
                    let mut rng = indexed(opts.seed, Stream::TheoryTrial, i as u32);
                    let mut r = check_variance_bound(&gate.unwrap_or(sigmoid5), opts.alpha, opts.samples, &mut rng)?;
                    r.trial_id = i;
                    r.seed = opts.seed;
                    Ok(r)
                })
                .collect::<rgpo_core::Result<Vec<_>>>()?;
            report_outcome(check, &reports, out)
        }
        "heavy_tail" => {
            let mut rng = stream(opts.seed, Stream::TheoryTrial);
            let rep = check_heavy_tail(opts.alpha, &opts.sizes, &gate.unwrap_or(sigmoid5), &mut rng)?;
            rep.write_csv(&out.join("heavy_tail.csv"))?;
            let y_stable = rep.y_change() <= 0.10;
            let ok = if opts.alpha <= 2.0 { rep.x_diverges() && y_stable } else { rep.x_change() <= 0.15 && y_stable };
            println!(
                "heavy_tail: alpha {} x growth {:.2} (diverges {}), x change {:.3}, y change {:.4}",
                opts.alpha,
                rep.x_growth(),
                rep.x_diverges(),
                rep.x_change(),
                rep.y_change()
            );
            Ok(ok)
        }
        "improvement" => {
            let reports = run_improvement_trials(&gate.unwrap_or(sigmoid5), opts.trials.unwrap_or(200), opts.delta, opts.scale, opts.seed)?;
            report_outcome(check, &reports, out)
        }
        "reinforce" => {
            let gates = match gate {
                Some(g) => vec![g],
                None => vec![sigmoid5, Gate::Temperature { beta: 1.0 }, Gate::ClippedLinear { c: 2.0 }],
            };
            let trials = opts.trials.unwrap_or(3);
            let mut reports = Vec::new();
            for (gi, g) in gates.iter().enumerate() {
                for t in 0..trials {
                    let (mut rep, _) = reinforce_trial(opts.seed, t, g)?;
                    rep.trial_id = gi * trials + t;
                    reports.push(rep);
                }
            }
            report_outcome(check, &reports, out)
        }
        other => bail!("unknown check `{other}`; expected one of {} or all", THEORY_CHECKS.join(", ")),
    }
}

pub fn theory(check: &str, opts: &TheoryOptions, out: &Path) -> Result<bool> {
    if check != "all" && !THEORY_CHECKS.contains(&check) {
        bail!("unknown check `{check}`; expected one of {} or all", THEORY_CHECKS.join(", "));
    }
    write_manifest(out, &format!("theory {check}"), None, &[opts.seed], &[])?;
    let checks: Vec<&str> = if check == "all" { THEORY_CHECKS.to_vec() } else { vec![check] };
    let mut ok = true;
    for c in checks {
        ok &= run_check(c, opts, out)?;
    }
    Ok(ok)
}

pub fn align(config: Option<&Path>, algorithms: &[String], seeds: &[u64], out: &Path) -> Result<bool> {
    let base = match config {
        Some(p) => AlignConfig::from_text(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => AlignConfig::default(),
    };
    let algs: Vec<AlignAlgorithm> = if !algorithms.is_empty() {
        algorithms.iter().map(|a| a.parse()).collect::<rgpo_core::Result<_>>()?
    } else if config.is_some() {
        vec![base.algorithm]
    } else {
        AlignAlgorithm::ALL.to_vec()
    };
    write_manifest(out, "align", config, seeds, &[("algorithms", algs.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","))])?;
    let jobs: Vec<(AlignAlgorithm, u64)> = algs.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let runs: Vec<(String, u64, AlignRun)> = thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(algorithm, seed)| {
                let cfg = AlignConfig { algorithm, seed, ..base.clone() };
                scope.spawn(move || -> Result<(String, u64, AlignRun)> {
                    let run = run_alignment(&cfg)?;
                    let path: PathBuf = out.join(format!("align_{algorithm}_seed{seed}.csv"));
                    run.write_csv(&path)?;
                    Ok((algorithm.to_string(), seed, run))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().map_err(|_| anyhow!("alignment thread panicked"))?).collect::<Result<Vec<_>>>()
    })?;
    write_pareto(&out.join("pareto.csv"), &runs)?;
    for (alg, seed, run) in &runs {
        println!("{alg} seed {seed}: {} reward {:.4}, kl_ref {:.4}", run.window.tag(), run.window.mean_reward, run.window.kl_ref);
    }
    Ok(true)
}
