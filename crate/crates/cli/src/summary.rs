//! Cross-seed summaries of training and alignment runs.

use std::path::Path;

use anyhow::Result;
use rgpo_core::diagnostics::IterationMetrics;
use rgpo_core::prefalign::AlignRun;

/// Fraction of the last iterations averaged into the final return.
pub const FINAL_WINDOW_FRACTION: f64 = 0.1;

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean return over the last `FINAL_WINDOW_FRACTION` of iterations (at least one).
pub fn final_return(metrics: &[IterationMetrics]) -> f64 {
    let k = ((metrics.len() as f64 * FINAL_WINDOW_FRACTION).ceil() as usize).clamp(1, metrics.len().max(1));
    let tail = &metrics[metrics.len().saturating_sub(k)..];
    tail.iter().map(|m| m.mean_return).sum::<f64>() / tail.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub label: String,
    pub n_seeds: usize,
    pub return_mean: f64,
    pub return_std: f64,
    pub spike_rate: f64,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub ess: f64,
}

pub const TRAIN_SUMMARY_HEADER: [&str; 8] =
    ["label", "n_seeds", "final_return_mean", "final_return_std", "spike_rate", "mean_kl", "max_kl", "ess"];

impl TrainSummary {
    pub fn from_runs(label: &str, runs: &[Vec<IterationMetrics>]) -> Self {
        let finals: Vec<f64> = runs.iter().map(|m| final_return(m)).collect();
        let (return_mean, return_std) = mean_std(&finals);
        let all: Vec<&IterationMetrics> = runs.iter().flatten().collect();
        let n = all.len().max(1) as f64;
        Self {
            label: label.to_string(),
            n_seeds: runs.len(),
            return_mean,
            return_std,
            spike_rate: all.iter().filter(|m| m.spike).count() as f64 / n,
            mean_kl: all.iter().map(|m| m.mean_kl).sum::<f64>() / n,
            max_kl: all.iter().map(|m| m.max_kl).fold(0.0, f64::max),
            ess: all.iter().map(|m| m.ess).sum::<f64>() / n,
        }
    }

    fn record(&self) -> [String; 8] {
        [
            self.label.clone(),
            self.n_seeds.to_string(),
            self.return_mean.to_string(),
            self.return_std.to_string(),
            self.spike_rate.to_string(),
            self.mean_kl.to_string(),
            self.max_kl.to_string(),
            self.ess.to_string(),
        ]
    }
}

pub fn write_train_summaries(path: &Path, rows: &[TrainSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAIN_SUMMARY_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

/// Per-seed window means plus one `mean` row per algorithm.
pub fn write_pareto(path: &Path, runs: &[(String, u64, AlignRun)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["algorithm", "seed", "reward", "kl_ref"])?;
    let mut labels: Vec<&str> = Vec::new();
    for (alg, seed, run) in runs {
        w.write_record([alg.clone(), seed.to_string(), run.window.mean_reward.to_string(), run.window.kl_ref.to_string()])?;
        if !labels.contains(&alg.as_str()) {
            labels.push(alg);
        }
    }
    for alg in labels {
        let sel: Vec<&AlignRun> = runs.iter().filter(|(a, ..)| a == alg).map(|(.., r)| r).collect();
        let n = sel.len() as f64;
        let reward = sel.iter().map(|r| r.window.mean_reward).sum::<f64>() / n;
        let kl = sel.iter().map(|r| r.window.kl_ref).sum::<f64>() / n;
        w.write_record([alg.to_string(), "mean".into(), reward.to_string(), kl.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(ret: f64, kl: f64, spike: bool) -> IterationMetrics {
        IterationMetrics {
            iteration: 0,
            mean_return: ret,
            mean_kl: kl,
            max_kl: 2.0 * kl,
            spike,
            ess: 1.0,
            grad_variance: 0.0,
            beta: 0.5,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn final_window_takes_last_tenth() {
        let run: Vec<_> = (0..20).map(|i| m(i as f64, 0.0, false)).collect();
        assert_eq!(final_return(&run), 18.5);
        assert_eq!(final_return(&run[..3]), 2.0);
    }

    #[test]
    fn summary_pools_iterations() {
        let a = vec![m(1.0, 0.01, false), m(2.0, 0.03, true)];
        let b = vec![m(3.0, 0.02, false), m(4.0, 0.02, false)];
        let s = TrainSummary::from_runs("x", &[a, b]);
        assert_eq!(s.spike_rate, 0.25);
        assert!((s.mean_kl - 0.02).abs() < 1e-15);
        assert_eq!(s.max_kl, 0.06);
        assert_eq!((s.return_mean, s.n_seeds), (3.0, 2));
    }
}
