//! Effective sample size, gradient variance and per-iteration metric rows.

use std::path::Path;

use crate::{Error, Result};

pub const METRICS_HEADER: [&str; 9] =
    ["iteration", "mean_return", "mean_kl", "max_kl", "spike", "ess", "grad_variance", "beta", "wall_seconds"];

/// Normalized effective sample size `(Σw)² / (N Σw²)`.
pub fn ess(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::invalid("ess of an empty weight vector"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid(format!("ess weights must be finite and nonnegative, got {w}")));
    }
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    if sum_sq == 0.0 {
        return Err(Error::Degenerate("ess undefined for all-zero weights".into()));
    }
    Ok((sum * sum / (weights.len() as f64 * sum_sq)).min(1.0))
}

/// Mean over coordinates of the unbiased across-minibatch variance.
pub fn grad_variance(gradients: &[Vec<f64>]) -> Result<f64> {
    if gradients.len() < 2 {
        return Err(Error::invalid(format!("grad_variance needs >= 2 gradients, got {}", gradients.len())));
    }
    let d = gradients[0].len();
    if d == 0 || gradients.iter().any(|g| g.len() != d) {
        return Err(Error::Dimension("gradients must share a nonzero length".into()));
    }
    let n = gradients.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mean = gradients.iter().map(|g| g[j]).sum::<f64>() / n;
        total += gradients.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    Ok(total / d as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_return: f64,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub spike: bool,
    pub ess: f64,
    pub grad_variance: f64,
    /// Penalty coefficient in force during the iteration.
    pub beta: f64,
    pub wall_seconds: f64,
}

pub fn write_metrics(path: &Path, metrics: &[IterationMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for m in metrics {
        w.write_record([
            m.iteration.to_string(),
            m.mean_return.to_string(),
            m.mean_kl.to_string(),
            m.max_kl.to_string(),
            u8::from(m.spike).to_string(),
            m.ess.to_string(),
            m.grad_variance.to_string(),
            m.beta.to_string(),
            m.wall_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    parse_metrics(std::fs::File::open(path)?)
}

/// [`read_metrics`] over any reader.
pub fn parse_metrics<R: std::io::Read>(reader: R) -> Result<Vec<IterationMetrics>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse { line: 1, message: "metrics header does not match".into() });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != METRICS_HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected 9 fields, got {}", rec.len()) });
        }
        let f = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Parse { line, message: format!("bad {} `{}`", METRICS_HEADER[k], &rec[k]) })
        };
        let spike = match &rec[4] {
            "0" => false,
            "1" => true,
            s => return Err(Error::Parse { line, message: format!("spike must be 0 or 1, got `{s}`") }),
        };
        out.push(IterationMetrics {
            iteration: rec[0].parse().map_err(|_| Error::Parse { line, message: "bad iteration".into() })?,
            mean_return: f(1)?,
            mean_kl: f(2)?,
            max_kl: f(3)?,
            spike,
            ess: f(5)?,
            grad_variance: f(6)?,
            beta: f(7)?,
            wall_seconds: f(8)?,
        });
    }
    Ok(out)
}
