//! Numerical checks of the bias, variance and improvement bounds.
//!
//! The bias and improvement checks use exact sums over a tabular MDP (the
//! old policy's occupancy from [`ExactMdp`]), so they carry no sampling error.
//! The variance checks are Monte-Carlo and put their margins in standard errors.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Tape, Tensor, Var};
use crate::envlab::{ExactMdp, ParetoSampler};
use crate::gatebank::Gate;
use crate::policy::{one_hot, Action, ActionBatch, Arch, Policy};
use crate::rng::{indexed, Stream};
use crate::trainer::{loss_and_grad, record_gated_surrogate, reinforce_loss, Minibatch};
use crate::{Error, Result};

/// Rounding allowance for checks computed by exact sums.
pub const EXACT_TOLERANCE: f64 = 1e-10;

/// Rescale attempts allowed when fitting a perturbation under the KL cap.
pub const MAX_RESCALES: usize = 100;

/// One instance of an inequality `lhs ≤ rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub trial_id: usize,
    pub seed: u64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
    /// Free-form `key=value` trial metadata (sizes, gate, ...).
    pub detail: String,
}

impl BoundReport {
    pub fn new(trial_id: usize, seed: u64, lhs: f64, rhs: f64, tolerance: f64, detail: String) -> Self {
        let slack = rhs - lhs;
        Self { trial_id, seed, lhs, rhs, slack, pass: slack >= -tolerance, detail }
    }
}

pub fn write_reports(path: &Path, reports: &[BoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["trial_id", "lhs", "rhs", "slack", "pass", "seed", "detail"])?;
    for r in reports {
        w.write_record([
            r.trial_id.to_string(),
            r.lhs.to_string(),
            r.rhs.to_string(),
            r.slack.to_string(),
            u8::from(r.pass).to_string(),
            r.seed.to_string(),
            r.detail.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn tabular_arch(mdp: &ExactMdp) -> Arch {
    Arch::Categorical { obs_dim: mdp.n_states, n_actions: mdp.n_actions, bias: false }
}

fn check_tabular(mdp: &ExactMdp, policies: &[&Policy]) -> Result<()> {
    let arch = tabular_arch(mdp);
    match policies.iter().find(|p| *p.arch() != arch) {
        Some(p) => Err(Error::Dimension(format!("policy {:?} is not tabular over the MDP", p.arch()))),
        None => Ok(()),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Exact-sum ingredients shared by the tabular checks.
struct Tables {
    d_old: Vec<f64>,
    pi_old: Vec<f64>,
    pi_new: Vec<f64>,
    a_old: Vec<f64>,
}

impl Tables {
    fn new(mdp: &ExactMdp, policy: &Policy, old: &Policy) -> Result<Self> {
        check_tabular(mdp, &[policy, old])?;
        let pi_old = mdp.policy_table(old)?;
        Ok(Self {
            d_old: mdp.occupancy_table(&pi_old)?,
            a_old: mdp.solve_table(&pi_old)?.a,
            pi_new: mdp.policy_table(policy)?,
            pi_old,
        })
    }

    /// `d_old(s)·π_old(a|s)` for flat index `s·A + a`.
    fn mass(&self, i: usize, n_actions: usize) -> f64 {
        self.d_old[i / n_actions] * self.pi_old[i]
    }

    fn ratio(&self, i: usize) -> f64 {
        self.pi_new[i] / self.pi_old[i]
    }

    fn a_max(&self) -> f64 {
        self.a_old.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

/// `Σ_s d_old(s) Σ_a π_old(a|s)·g(r)·A_old(s,a)` on the tape, as a function
/// of the policy parameters.
pub fn record_exact_surrogate(
    tape: &mut Tape,
    mdp: &ExactMdp,
    policy: &Policy,
    params: Var,
    old: &Policy,
    gate: &Gate,
) -> Result<Var> {
    let t = Tables::new(mdp, policy, old)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let states: Vec<f64> = (0..ns * na).flat_map(|i| one_hot(i / na, ns)).collect();
    let actions = ActionBatch::Discrete((0..ns * na).map(|i| i % na).collect());
    let lp = policy.record_log_probs(tape, params, &states, &actions)?;
    let old_lp = tape.constant(Tensor::vector(t.pi_old.iter().map(|p| p.ln()).collect()));
    let d = tape.sub(lp, old_lp)?;
    let r = tape.exp(d)?;
    let g = gate.apply(tape, r)?;
    let coef = tape.constant(Tensor::vector((0..ns * na).map(|i| t.mass(i, na) * t.a_old[i]).collect()));
    let ga = tape.mul(g, coef)?;
    Ok(tape.sum(ga)?)
}

/// Bias of the gated gradient against the importance-sampled one.
///
/// `lhs = ‖E[w(r)·A·∇log π] − E[r·A·∇log π]‖` and
/// `rhs = A_max · max‖∇log π‖ · E|w(r) − r|`, all expectations exact under
/// `d_old × π_old`.
pub fn check_bias_bound(mdp: &ExactMdp, policy: &Policy, old: &Policy, gate: &Gate) -> Result<BoundReport> {
    let t = Tables::new(mdp, policy, old)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut diff = vec![0.0; policy.num_params()];
    let mut max_score: f64 = 0.0;
    let mut mean_gap = 0.0;
    for i in 0..ns * na {
        let score = policy.grad_log_prob(&one_hot(i / na, ns), &Action::Discrete(i % na))?;
        max_score = max_score.max(norm(&score));
        let r = t.ratio(i);
        let gap = gate.weight(r)? - r;
        let m = t.mass(i, na);
        mean_gap += m * gap.abs();
        for (d, s) in diff.iter_mut().zip(&score) {
            *d += m * gap * t.a_old[i] * s;
        }
    }
    let rhs = t.a_max() * max_score * mean_gap;
    let detail = format!("states={ns} actions={na} gate={gate}");
    Ok(BoundReport::new(0, 0, norm(&diff), rhs, EXACT_TOLERANCE, detail))
}

/// Random MDP, old policy and perturbed current policy for one bias trial.
pub fn bias_trial(seed: u64, trial: usize, gate: &Gate) -> Result<BoundReport> {
    let mut rng = indexed(seed, Stream::TheoryTrial, trial as u32);
    let ns = rng.random_range(2..=6);
    let na = rng.random_range(2..=4);
    let mdp = ExactMdp::random(ns, na, 0.9, &mut rng)?;
    let logits: Vec<f64> = (0..ns * na).map(|_| StandardNormal.sample(&mut rng)).collect();
    let scale = rng.random_range(0.05..1.0);
    let moved: Vec<f64> = logits.iter().map(|l| l + scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let old = Policy::tabular_from_logits(ns, na, logits)?;
    let policy = Policy::tabular_from_logits(ns, na, moved)?;
    let mut rep = check_bias_bound(&mdp, &policy, &old, gate)?;
    rep.trial_id = trial;
    rep.seed = seed;
    rep.detail = format!("{} perturbation={scale}", rep.detail);
    Ok(rep)
}

/// `n_trials` bias trials; trial `i` uses `gates[i % gates.len()]`.
pub fn run_bias_trials(gates: &[Gate], n_trials: usize, seed: u64) -> Result<Vec<BoundReport>> {
    if gates.is_empty() {
        return Err(Error::invalid("bias trials need at least one gate"));
    }
    (0..n_trials).map(|i| bias_trial(seed, i, &gates[i % gates.len()])).collect()
}

/// Sample variance and the standard error of that estimate,
/// `sqrt((m4 − s⁴)/n)` with `m4` the fourth central moment.
pub fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in xs {
        let d2 = (x - mean) * (x - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    let var = m2 / (n - 1.0);
    let m4 = m4 / n;
    let se = ((m4 - var * var).max(0.0) / n).sqrt();
    (var, se)
}

/// `Var(w(r)·Z) ≤ c²σ² + 3 SE` for given ratios and scores with known `Var(Z) = σ²`,
/// `c` the dense-grid supremum of `w`.
pub fn variance_bound_from_samples(gate: &Gate, ratios: &[f64], z: &[f64], sigma2: f64) -> Result<BoundReport> {
    if ratios.len() != z.len() {
        return Err(Error::Dimension("ratios and scores differ in length".into()));
    }
    let y = ratios.iter().zip(z).map(|(r, z)| Ok(gate.weight(*r)? * z)).collect::<Result<Vec<f64>>>()?;
    let (var, se) = variance_with_se(&y);
    let c = gate.weight_bound()?;
    let detail = format!("gate={gate} n={} c={c} se={se}", y.len());
    Ok(BoundReport::new(0, 0, var, c * c * sigma2 + 3.0 * se, 0.0, detail))
}

/// Variance of the gated term `Y = w(r)·Z`, with `r` Pareto(α) and
/// `Z ~ U(−1, 1)` (`σ² = 1/3`).
pub fn check_variance_bound<R: Rng + ?Sized>(gate: &Gate, alpha_tail: f64, n: usize, rng: &mut R) -> Result<BoundReport> {
    let sampler = ParetoSampler::new(alpha_tail)?;
    let mut ratios = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        ratios.push(sampler.draw(rng));
        z.push(rng.random_range(-1.0..1.0));
    }
    let mut rep = variance_bound_from_samples(gate, &ratios, &z, 1.0 / 3.0)?;
    rep.detail = format!("{} alpha={alpha_tail}", rep.detail);
    Ok(rep)
}

/// Running variance estimates of `X = r·Z` and `Y = w(r)·Z` at growing sample sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct HeavyTailReport {
    pub alpha: f64,
    pub gate: Gate,
    pub sizes: Vec<usize>,
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
}

fn relative_change(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

impl HeavyTailReport {
    /// Last estimate of `Var(X)` over the first.
    pub fn x_growth(&self) -> f64 {
        self.var_x[self.var_x.len() - 1] / self.var_x[0]
    }

    pub fn x_diverges(&self) -> bool {
        self.x_growth() > 10.0
    }

    /// Relative difference of the last two `Var(X)` estimates.
    pub fn x_change(&self) -> f64 {
        let n = self.var_x.len();
        relative_change(self.var_x[n - 1], self.var_x[n - 2])
    }

    pub fn y_change(&self) -> f64 {
        let n = self.var_y.len();
        relative_change(self.var_y[n - 1], self.var_y[n - 2])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "var_x", "var_y"])?;
        for i in 0..self.sizes.len() {
            w.write_record([self.sizes[i].to_string(), self.var_x[i].to_string(), self.var_y[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            self.m2 / (self.n - 1.0)
        }
    }
}

/// One stream of draws, with the variance estimates read off at each prefix
/// length in `sizes` (strictly increasing, at least two).
pub fn check_heavy_tail<R: Rng + ?Sized>(alpha_tail: f64, sizes: &[usize], gate: &Gate, rng: &mut R) -> Result<HeavyTailReport> {
    if sizes.len() < 2 || sizes[0] < 2 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sample sizes must be at least two increasing values of at least 2"));
    }
    let sampler = ParetoSampler::new(alpha_tail)?;
    let (mut x, mut y) = (Welford::default(), Welford::default());
    let (mut var_x, mut var_y) = (Vec::new(), Vec::new());
    let mut next = 0;
    for i in 1..=sizes[sizes.len() - 1] {
        let r = sampler.draw(rng);
        let z: f64 = rng.random_range(-1.0..1.0);
        x.push(r * z);
        y.push(gate.weight(r)? * z);
        if i == sizes[next] {
            var_x.push(x.variance());
            var_y.push(y.variance());
            next += 1;
        }
    }
    Ok(HeavyTailReport { alpha: alpha_tail, gate: *gate, sizes: sizes.to_vec(), var_x, var_y })
}

/// Perturbs `old` by `scale·N(0, I)` in parameter space and halves the step
/// until `max_s KL(π_θ ‖ π_old) ≤ δ`.
pub fn kl_capped_perturbation<R: Rng + ?Sized>(old: &Policy, states: &[Vec<f64>], scale: f64, delta: f64, rng: &mut R) -> Result<Policy> {
    let dir: Vec<f64> = (0..old.num_params()).map(|_| StandardNormal.sample(rng)).collect();
    let mut step = scale;
    for _ in 0..MAX_RESCALES {
        let params = old.params().iter().zip(&dir).map(|(p, d)| p + step * d).collect();
        let candidate = Policy::new(old.arch().clone(), params)?;
        let mut max_kl: f64 = 0.0;
        for s in states {
            max_kl = max_kl.max(candidate.kl_exact(old, s)?);
        }
        if max_kl <= delta {
            return Ok(candidate);
        }
        step *= 0.5;
    }
    Err(Error::Numeric(format!("perturbation exceeds the KL cap {delta} after {MAX_RESCALES} rescales")))
}

/// `J̄(θ) ≥ J̄(θ_old) + L_RGPO(θ) − C√δ` with `J̄ = (1 − γ)J`,
/// `L_RGPO = Σ d_old π_old g(r) A_old` and `C = L_g·A_max·√2`.
/// Reported as `lhs = J̄_old + L − C√δ`, `rhs = J̄(θ)`.
pub fn check_improvement_bound(mdp: &ExactMdp, policy: &Policy, old: &Policy, gate: &Gate, delta: f64) -> Result<BoundReport> {
    let t = Tables::new(mdp, policy, old)?;
    let na = mdp.n_actions;
    let mut surrogate = 0.0;
    for i in 0..t.a_old.len() {
        surrogate += t.mass(i, na) * gate.value(t.ratio(i))? * t.a_old[i];
    }
    let scale = 1.0 - mdp.gamma;
    let j_old = scale * mdp.solve_table(&t.pi_old)?.j;
    let j_new = scale * mdp.solve_table(&t.pi_new)?.j;
    let c = gate.lipschitz_bound()? * t.a_max() * 2f64.sqrt();
    let lhs = j_old + surrogate - c * delta.sqrt();
    let detail = format!("gate={gate} delta={delta} surrogate={surrogate} j_old={j_old} c={c}");
    Ok(BoundReport::new(0, 0, lhs, j_new, EXACT_TOLERANCE, detail))
}

/// Fixed 4-state, 3-action MDP and old policy drawn from `seed`; each trial
/// draws a fresh KL-capped perturbation.
pub fn run_improvement_trials(gate: &Gate, n_trials: usize, delta: f64, perturbation_scale: f64, seed: u64) -> Result<Vec<BoundReport>> {
    let mut rng = indexed(seed, Stream::TheoryTrial, u32::MAX);
    let mdp = ExactMdp::random(4, 3, 0.9, &mut rng)?;
    let logits: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
    let old = Policy::tabular_from_logits(4, 3, logits)?;
    let states: Vec<Vec<f64>> = (0..4).map(|s| one_hot(s, 4)).collect();
    (0..n_trials)
        .map(|i| {
            let mut trial_rng = indexed(seed, Stream::TheoryTrial, i as u32);
            let policy = kl_capped_perturbation(&old, &states, perturbation_scale, delta, &mut trial_rng)?;
            let mut rep = check_improvement_bound(&mdp, &policy, &old, gate, delta)?;
            rep.trial_id = i;
            rep.seed = seed;
            Ok(rep)
        })
        .collect()
}

/// On-policy limit: with `r ≡ 1` the gated gradient is `g'(1)` times the
/// REINFORCE gradient. `lhs` is the relative residual
/// `‖∇L − g'(1)∇J‖ / ‖∇J‖`, `rhs = 1e-8`. Also returns the measured scale
/// `⟨∇L, ∇J⟩ / ‖∇J‖²`.
pub fn check_reinforce_limit(policy: &Policy, batch: &Minibatch, gate: &Gate) -> Result<(BoundReport, f64)> {
    let mut mb = batch.clone();
    mb.old_log_probs = policy.log_probs(&mb.states, &mb.actions)?;
    let (_, g_gate) = loss_and_grad(policy.params(), |tape, p| {
        let lp = policy.record_log_probs(tape, p, &mb.states, &mb.actions)?;
        let old = tape.constant(Tensor::vector(mb.old_log_probs.clone()));
        let d = tape.sub(lp, old)?;
        let r = tape.exp(d)?;
        record_gated_surrogate(tape, gate, r, &mb.advantages)
    })?;
    let (_, g_rf) = loss_and_grad(policy.params(), |tape, p| {
        let l = reinforce_loss(tape, policy, p, &mb)?;
        Ok(tape.neg(l)?)
    })?;
    let g1 = gate.derivative(1.0)?;
    let nrf = norm(&g_rf);
    if nrf == 0.0 {
        return Err(Error::Degenerate("REINFORCE gradient is zero".into()));
    }
    let resid: Vec<f64> = g_gate.iter().zip(&g_rf).map(|(a, b)| a - g1 * b).collect();
    let scale = g_gate.iter().zip(&g_rf).map(|(a, b)| a * b).sum::<f64>() / (nrf * nrf);
    let detail = format!("gate={gate} g1={g1} scale={scale}");
    Ok((BoundReport::new(0, 0, norm(&resid) / nrf, 1e-8, 0.0, detail), scale))
}

/// A Gaussian policy and a random batch with `r ≡ 1`.
pub fn reinforce_trial(seed: u64, trial: usize, gate: &Gate) -> Result<(BoundReport, f64)> {
    let mut rng = indexed(seed, Stream::TheoryTrial, trial as u32);
    let policy = Policy::gaussian(3, 2, &[8], &mut rng)?;
    let n = 32;
    let states: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut actions = ActionBatch::Continuous { dim: 2, data: Vec::new() };
    for i in 0..n {
        actions.push(&policy.sample(&states[i * 3..(i + 1) * 3], &mut rng)?)?;
    }
    let advantages: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mb = Minibatch { states, actions, old_log_probs: vec![0.0; n], advantages, returns: vec![0.0; n], old_values: None };
    let (mut rep, scale) = check_reinforce_limit(&policy, &mb, gate)?;
    rep.trial_id = trial;
    rep.seed = seed;
    Ok((rep, scale))
}
