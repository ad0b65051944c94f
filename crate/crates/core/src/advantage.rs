//! Generalized advantage estimation, per-rollout normalization and
//! group-relative standardization.

use crate::{Error, Result};

/// Guard added to group standard deviations.
pub const GROUP_STD_EPS: f64 = 1e-8;
/// Below this standard deviation `normalize` returns zeros.
pub const NORMALIZE_MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageResult {
    pub advantages: Vec<f64>,
    /// Value targets: `advantages + values`.
    pub returns: Vec<f64>,
}

/// GAE(γ, λ) over one rollout. `terminals[t]` cuts both the bootstrap at
/// `t + 1` and the recursion; `bootstrap_value` is `V(s_T)` after the last step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lam: f64,
) -> Result<AdvantageResult> {
    let n = rewards.len();
    if values.len() != n || terminals.len() != n {
        return Err(Error::Dimension(format!(
            "gae: rewards {n}, values {}, terminals {}",
            values.len(),
            terminals.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!("gae: gamma {gamma} and lam {lam} must lie in [0, 1]")));
    }
    let mut advantages = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let cont = if terminals[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 == n { bootstrap_value } else { values[t + 1] };
        let delta = rewards[t] + gamma * cont * next_value - values[t];
        next_adv = delta + gamma * lam * cont * next_adv;
        advantages[t] = next_adv;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(AdvantageResult { advantages, returns })
}

fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Shifts to mean 0 and scales to (population) standard deviation 1.
/// Inputs shorter than 2 or with std below 1e-8 map to zeros.
pub fn normalize(advantages: &[f64]) -> Vec<f64> {
    if advantages.len() < 2 {
        return vec![0.0; advantages.len()];
    }
    let (mean, std) = mean_and_population_std(advantages);
    if std < NORMALIZE_MIN_STD {
        return vec![0.0; advantages.len()];
    }
    advantages.iter().map(|a| (a - mean) / std).collect()
}

/// `(R − mean) / (std + 1e-8)` within each group, population std.
pub fn group_relative_advantage(groups: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| {
            if g.len() < 2 {
                return Err(Error::invalid(format!("group of size {} needs at least 2 members", g.len())));
            }
            let (mean, std) = mean_and_population_std(g);
            Ok(g.iter().map(|r| (r - mean) / (std + GROUP_STD_EPS)).collect())
        })
        .collect()
}
