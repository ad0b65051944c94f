//! Toy preference alignment on a prompt bandit.
//!
//! Each prompt is a state and each response a discrete action. A fixed
//! reward table stands in for the reward model, the reference policy is
//! frozen at initialization, and the policy is trained on groups of sampled
//! responses with group-relative advantages. Reward and KL columns are exact
//! sums over the response table; sampling only enters the surrogate.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::advantage::group_relative_advantage;
use crate::diffcore::{Tape, Tensor, Var};
use crate::gatebank::Gate;
use crate::kv::{render, KvFile};
use crate::policy::{one_hot, Action, ActionBatch, Policy};
use crate::rng::{stream, Stream};
use crate::trainer::{loss_and_grad, ppo_loss, record_gated_surrogate, rgpo_loss, Minibatch, Optimizer, OptimizerKind};
use crate::trustctl::{kl_hat_on_tape, BetaController};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlignAlgorithm {
    /// Gate on `π/π_old`, KL penalty to the old policy and to the reference.
    RgpoDual,
    /// As `RgpoDual`, with the gate evaluated at `max(π/π_old, π/π_ref)`.
    RgpoMaxratio,
    /// Clipped surrogate plus a KL penalty to the reference.
    PpoRlhf,
    /// Clipped surrogate alone.
    Grpo,
}

impl AlignAlgorithm {
    pub const ALL: [AlignAlgorithm; 4] =
        [AlignAlgorithm::RgpoDual, AlignAlgorithm::RgpoMaxratio, AlignAlgorithm::PpoRlhf, AlignAlgorithm::Grpo];

    pub fn uses_kl_penalty(self) -> bool {
        matches!(self, AlignAlgorithm::RgpoDual | AlignAlgorithm::RgpoMaxratio)
    }
}

impl FromStr for AlignAlgorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "rgpo_dual" => AlignAlgorithm::RgpoDual,
            "rgpo_maxratio" => AlignAlgorithm::RgpoMaxratio,
            "ppo_rlhf" => AlignAlgorithm::PpoRlhf,
            "grpo" => AlignAlgorithm::Grpo,
            other => return Err(Error::invalid(format!("unknown alignment algorithm `{other}`"))),
        })
    }
}

impl fmt::Display for AlignAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignAlgorithm::RgpoDual => "rgpo_dual",
            AlignAlgorithm::RgpoMaxratio => "rgpo_maxratio",
            AlignAlgorithm::PpoRlhf => "ppo_rlhf",
            AlignAlgorithm::Grpo => "grpo",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    pub algorithm: AlignAlgorithm,
    pub gate: Gate,
    pub beta_ref: f64,
    pub beta0: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub target_kl: f64,
    pub iterations: usize,
    pub prompts_per_batch: usize,
    pub group_size: usize,
    pub n_prompts: usize,
    pub n_responses: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Gradient steps on each sampled batch.
    pub n_epochs: usize,
    pub eps_clip: f64,
    /// Standard deviation of the reference logits.
    pub ref_scale: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            algorithm: AlignAlgorithm::RgpoDual,
            gate: Gate::Sigmoid { k: 5.0 },
            beta_ref: 0.05,
            beta0: 0.5,
            beta_min: 0.01,
            beta_max: 5.0,
            target_kl: 0.02,
            iterations: 400,
            prompts_per_batch: 4,
            group_size: 4,
            n_prompts: 8,
            n_responses: 16,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            n_epochs: 4,
            eps_clip: 0.2,
            ref_scale: 0.5,
            seed: 0,
        }
    }
}

impl AlignConfig {
    /// Parses a config file; `algorithm` is required, unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut cfg = Self { algorithm: kv.require("algorithm")?, ..Self::default() };
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides fields from any keys present in `kv`, consuming them.
    pub fn apply(&mut self, kv: &mut KvFile) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = kv.take(stringify!($field))? { self.$field = v; } )* };
        }
        take!(
            algorithm, gate, beta_ref, beta0, beta_min, beta_max, target_kl, iterations, prompts_per_batch,
            group_size, n_prompts, n_responses, learning_rate, optimizer, n_epochs, eps_clip, ref_scale, seed
        );
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut kv = KvFile::parse(&format!("{key} = {value}"))?;
        self.apply(&mut kv)?;
        kv.finish()
    }

    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if !(self.beta_ref >= 0.0 && self.beta_ref.is_finite()) {
            return Err(Error::invalid("beta_ref must be nonnegative"));
        }
        if self.n_prompts == 0 || self.n_responses < 2 || self.group_size < 2 {
            return Err(Error::invalid("need at least one prompt, two responses and groups of two"));
        }
        if self.prompts_per_batch == 0 || self.prompts_per_batch > self.n_prompts {
            return Err(Error::invalid("prompts_per_batch must lie in [1, n_prompts]"));
        }
        if self.n_epochs == 0 || !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("n_epochs must be positive and learning_rate nonnegative"));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) || !(self.ref_scale >= 0.0) {
            return Err(Error::invalid("eps_clip must lie in (0, 1) and ref_scale be nonnegative"));
        }
        BetaController::new(self.beta0, self.beta_min, self.beta_max, self.target_kl, f64::INFINITY)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        render(&[
            ("algorithm", self.algorithm.to_string()),
            ("gate", self.gate.to_string()),
            ("beta_ref", self.beta_ref.to_string()),
            ("beta0", self.beta0.to_string()),
            ("beta_min", self.beta_min.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("target_kl", self.target_kl.to_string()),
            ("iterations", self.iterations.to_string()),
            ("prompts_per_batch", self.prompts_per_batch.to_string()),
            ("group_size", self.group_size.to_string()),
            ("n_prompts", self.n_prompts.to_string()),
            ("n_responses", self.n_responses.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("n_epochs", self.n_epochs.to_string()),
            ("eps_clip", self.eps_clip.to_string()),
            ("ref_scale", self.ref_scale.to_string()),
            ("seed", self.seed.to_string()),
        ])
    }
}

/// Prompts × responses with a frozen reward table.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBandit {
    n_prompts: usize,
    n_responses: usize,
    group_size: usize,
    reward: Vec<f64>,
}

impl PromptBandit {
    /// Standard normal rewards.
    pub fn new<R: Rng + ?Sized>(n_prompts: usize, n_responses: usize, group_size: usize, rng: &mut R) -> Result<Self> {
        let reward = (0..n_prompts * n_responses).map(|_| StandardNormal.sample(rng)).collect();
        Self::from_table(n_prompts, n_responses, group_size, reward)
    }

    pub fn from_table(n_prompts: usize, n_responses: usize, group_size: usize, reward: Vec<f64>) -> Result<Self> {
        if n_prompts == 0 || n_responses == 0 || group_size < 2 {
            return Err(Error::invalid("bandit needs prompts, responses and groups of at least two"));
        }
        if reward.len() != n_prompts * n_responses {
            return Err(Error::Dimension("reward table size".into()));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numeric("non-finite reward".into()));
        }
        Ok(Self { n_prompts, n_responses, group_size, reward })
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn n_responses(&self) -> usize {
        self.n_responses
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn reward(&self, prompt: usize, response: usize) -> f64 {
        self.reward[prompt * self.n_responses + response]
    }

    fn prompt_states(&self) -> Vec<f64> {
        (0..self.n_prompts).flat_map(|p| one_hot(p, self.n_prompts)).collect()
    }

    /// Expected reward under `policy`, averaged uniformly over prompts.
    pub fn mean_reward(&self, policy: &Policy) -> Result<f64> {
        let lp = policy.log_prob_table(&self.prompt_states())?;
        let total: f64 = lp.iter().zip(&self.reward).map(|(l, r)| l.exp() * r).sum();
        Ok(total / self.n_prompts as f64)
    }

    /// `KL(policy ‖ other)` averaged uniformly over prompts.
    pub fn mean_kl(&self, policy: &Policy, other: &Policy) -> Result<f64> {
        let mut total = 0.0;
        for p in 0..self.n_prompts {
            total += policy.kl_exact(other, &one_hot(p, self.n_prompts))?;
        }
        Ok(total / self.n_prompts as f64)
    }

    /// Samples `group_size` responses from `policy` for each prompt and
    /// scores them with group-relative advantages.
    pub fn sample_batch<R: Rng + ?Sized>(&self, policy: &Policy, prompts: &[usize], rng: &mut R) -> Result<Minibatch> {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut groups = Vec::with_capacity(prompts.len());
        for &p in prompts {
            if p >= self.n_prompts {
                return Err(Error::invalid(format!("prompt {p} out of range")));
            }
            let s = one_hot(p, self.n_prompts);
            let mut group = Vec::with_capacity(self.group_size);
            for _ in 0..self.group_size {
                let Action::Discrete(a) = policy.sample(&s, rng)? else {
                    return Err(Error::FamilyMismatch("bandit policy must be categorical".into()));
                };
                states.extend_from_slice(&s);
                actions.push(a);
                group.push(self.reward(p, a));
            }
            groups.push(group);
        }
        let returns: Vec<f64> = groups.concat();
        let advantages = group_relative_advantage(&groups)?.concat();
        let actions = ActionBatch::Discrete(actions);
        let old_log_probs = policy.log_probs(&states, &actions)?;
        Ok(Minibatch { states, actions, old_log_probs, advantages, returns, old_values: None })
    }
}

fn reference_penalty(tape: &mut Tape, policy: &Policy, params: Var, mb: &Minibatch, reference: &Policy, beta_ref: f64) -> Result<Option<Var>> {
    if beta_ref == 0.0 {
        return Ok(None);
    }
    let kl = policy.record_kl_to(tape, params, &mb.states, reference)?;
    let m = tape.mean(kl)?;
    Ok(Some(tape.scale(m, beta_ref)?))
}

fn add_penalty(tape: &mut Tape, loss: Var, penalty: Option<Var>) -> Result<Var> {
    match penalty {
        Some(p) => Ok(tape.add(loss, p)?),
        None => Ok(loss),
    }
}

/// `−mean(g(r_old)·Â) + β·kl_hat(r_old) + β_ref·mean KL(π ‖ π_ref)`, with
/// the reference KL exact per sampled prompt. `mb.old_log_probs` are the
/// old policy's.
#[allow(clippy::too_many_arguments)]
pub fn dual_gate_loss(
    tape: &mut Tape,
    policy: &Policy,
    params: Var,
    mb: &Minibatch,
    reference: &Policy,
    gate: &Gate,
    beta: f64,
    beta_ref: f64,
) -> Result<Var> {
    let (loss, _) = rgpo_loss(tape, policy, params, mb, gate, beta)?;
    let pen = reference_penalty(tape, policy, params, mb, reference, beta_ref)?;
    add_penalty(tape, loss, pen)
}

/// [`dual_gate_loss`] with the gate evaluated at `max(π/π_old, π/π_ref)`;
/// the KL terms are unchanged.
#[allow(clippy::too_many_arguments)]
pub fn maxratio_gate_loss(
    tape: &mut Tape,
    policy: &Policy,
    params: Var,
    mb: &Minibatch,
    reference: &Policy,
    gate: &Gate,
    beta: f64,
    beta_ref: f64,
) -> Result<Var> {
    let lp = policy.record_log_probs(tape, params, &mb.states, &mb.actions)?;
    if mb.old_log_probs.len() != mb.len() {
        return Err(Error::Dimension("minibatch fields have inconsistent lengths".into()));
    }
    let old = tape.constant(Tensor::vector(mb.old_log_probs.clone()));
    let d_old = tape.sub(lp, old)?;
    let r_old = tape.exp(d_old)?;
    let ref_lp = tape.constant(Tensor::vector(reference.log_probs(&mb.states, &mb.actions)?));
    let d_ref = tape.sub(lp, ref_lp)?;
    let r_ref = tape.exp(d_ref)?;
    let r = tape.max(r_old, r_ref)?;
    let surrogate = record_gated_surrogate(tape, gate, r, &mb.advantages)?;
    let mut loss = tape.neg(surrogate)?;
    if beta != 0.0 {
        let kl = kl_hat_on_tape(tape, r_old)?;
        let pen = tape.scale(kl, beta)?;
        loss = tape.add(loss, pen)?;
    }
    let pen = reference_penalty(tape, policy, params, mb, reference, beta_ref)?;
    add_penalty(tape, loss, pen)
}

/// Clipped surrogate plus `β_ref·mean KL(π ‖ π_ref)`.
pub fn ppo_rlhf_loss(
    tape: &mut Tape,
    policy: &Policy,
    params: Var,
    mb: &Minibatch,
    reference: &Policy,
    eps: f64,
    beta_ref: f64,
) -> Result<Var> {
    let (loss, _) = ppo_loss(tape, policy, params, mb, eps)?;
    let pen = reference_penalty(tape, policy, params, mb, reference, beta_ref)?;
    add_penalty(tape, loss, pen)
}

/// Clipped surrogate with no reference term.
pub fn grpo_loss(tape: &mut Tape, policy: &Policy, params: Var, mb: &Minibatch, eps: f64) -> Result<Var> {
    Ok(ppo_loss(tape, policy, params, mb, eps)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub kl_ref: f64,
    pub kl_old: f64,
    /// Penalty coefficient on the old-policy KL used during the iteration
    /// (0 for the clipped baselines).
    pub beta: f64,
}

/// Column means over iterations `start..=end`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSummary {
    pub start: usize,
    pub end: usize,
    pub mean_reward: f64,
    pub kl_ref: f64,
    pub kl_old: f64,
    pub beta: f64,
}

impl WindowSummary {
    /// `window_<start>_<end>`.
    pub fn tag(&self) -> String {
        format!("window_{}_{}", self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignRun {
    /// Iteration 0 is the initial policy.
    pub rows: Vec<AlignRow>,
    pub window: WindowSummary,
    pub policy: Policy,
}

pub const ALIGN_HEADER: [&str; 5] = ["iteration", "mean_reward", "kl_ref", "kl_old", "beta"];

/// Window over the last quarter of training: 300..=400 for 400 iterations.
pub fn convergence_window(rows: &[AlignRow]) -> WindowSummary {
    let end = rows.last().map_or(0, |r| r.iteration);
    let start = end * 3 / 4;
    let w: Vec<&AlignRow> = rows.iter().filter(|r| r.iteration >= start && r.iteration <= end).collect();
    let n = w.len().max(1) as f64;
    let mean = |f: fn(&AlignRow) -> f64| w.iter().map(|r| f(r)).sum::<f64>() / n;
    WindowSummary {
        start,
        end,
        mean_reward: mean(|r| r.mean_reward),
        kl_ref: mean(|r| r.kl_ref),
        kl_old: mean(|r| r.kl_old),
        beta: mean(|r| r.beta),
    }
}

impl AlignRun {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(ALIGN_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                r.mean_reward.to_string(),
                r.kl_ref.to_string(),
                r.kl_old.to_string(),
                r.beta.to_string(),
            ])?;
        }
        let s = &self.window;
        w.write_record([s.tag(), s.mean_reward.to_string(), s.kl_ref.to_string(), s.kl_old.to_string(), s.beta.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

/// Reads the per-iteration rows of an alignment CSV, skipping the summary row.
pub fn read_align_csv(path: &Path) -> Result<Vec<AlignRow>> {
    parse_align_csv(std::fs::File::open(path)?)
}

/// [`read_align_csv`] over any reader.
pub fn parse_align_csv<R: std::io::Read>(reader: R) -> Result<Vec<AlignRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    if rdr.headers()? != ALIGN_HEADER.as_slice() {
        return Err(Error::Parse { line: 1, message: "unexpected alignment CSV header".into() });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != ALIGN_HEADER.len() {
            return Err(Error::Parse { line, message: format!("expected 5 fields, got {}", rec.len()) });
        }
        if rec[0].starts_with("window_") {
            continue;
        }
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| Error::Parse { line, message: format!("bad `{}` value `{}`", ALIGN_HEADER[j], &rec[j]) })
        };
        let iteration = rec[0].parse().map_err(|_| Error::Parse { line, message: format!("bad iteration `{}`", &rec[0]) })?;
        rows.push(AlignRow { iteration, mean_reward: num(1)?, kl_ref: num(2)?, kl_old: num(3)?, beta: num(4)? });
    }
    Ok(rows)
}

/// Least-squares slope of `kl_ref` against the iteration index.
pub fn kl_ref_slope(rows: &[AlignRow]) -> f64 {
    let n = rows.len() as f64;
    if rows.len() < 2 {
        return 0.0;
    }
    let mx = rows.iter().map(|r| r.iteration as f64).sum::<f64>() / n;
    let my = rows.iter().map(|r| r.kl_ref).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for r in rows {
        let dx = r.iteration as f64 - mx;
        sxy += dx * (r.kl_ref - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// The bandit and the reference policy that `config.seed` determines.
pub fn build_task(config: &AlignConfig) -> Result<(PromptBandit, Policy)> {
    let mut rng = stream(config.seed, Stream::Init);
    let bandit = PromptBandit::new(config.n_prompts, config.n_responses, config.group_size, &mut rng)?;
    let logits = (0..config.n_prompts * config.n_responses)
        .map(|_| config.ref_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let reference = Policy::tabular_from_logits(config.n_prompts, config.n_responses, logits)?;
    Ok((bandit, reference))
}

/// Trains from the reference policy for `config.iterations` iterations.
pub fn run_alignment(config: &AlignConfig) -> Result<AlignRun> {
    config.validate()?;
    let (bandit, reference) = build_task(config)?;
    let mut policy = reference.clone();
    let mut controller = BetaController::new(config.beta0, config.beta_min, config.beta_max, config.target_kl, f64::INFINITY)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, policy.num_params());
    let mut rng = stream(config.seed, Stream::Rollout);
    let beta_col = |c: &BetaController| if config.algorithm.uses_kl_penalty() { c.beta() } else { 0.0 };
    let mut rows = vec![AlignRow {
        iteration: 0,
        mean_reward: bandit.mean_reward(&policy)?,
        kl_ref: 0.0,
        kl_old: 0.0,
        beta: beta_col(&controller),
    }];
    for it in 1..=config.iterations {
        let old = policy.clone();
        let prompts = sample_indices(&mut rng, config.n_prompts, config.prompts_per_batch).into_vec();
        let mb = bandit.sample_batch(&old, &prompts, &mut rng)?;
        let beta = beta_col(&controller);
        for _ in 0..config.n_epochs {
            let (_, grad) = loss_and_grad(policy.params(), |tape, p| match config.algorithm {
                AlignAlgorithm::RgpoDual => dual_gate_loss(tape, &policy, p, &mb, &reference, &config.gate, beta, config.beta_ref),
                AlignAlgorithm::RgpoMaxratio => {
                    maxratio_gate_loss(tape, &policy, p, &mb, &reference, &config.gate, beta, config.beta_ref)
                }
                AlignAlgorithm::PpoRlhf => ppo_rlhf_loss(tape, &policy, p, &mb, &reference, config.eps_clip, config.beta_ref),
                AlignAlgorithm::Grpo => grpo_loss(tape, &policy, p, &mb, config.eps_clip),
            })?;
            let mut params = policy.params().to_vec();
            opt.step(&mut params, &grad)?;
            policy.set_params(params)?;
        }
        let kl_old = bandit.mean_kl(&policy, &old)?;
        if config.algorithm.uses_kl_penalty() {
            controller.update(kl_old)?;
        }
        rows.push(AlignRow {
            iteration: it,
            mean_reward: bandit.mean_reward(&policy)?,
            kl_ref: bandit.mean_kl(&policy, &reference)?,
            kl_old,
            beta,
        });
    }
    let window = convergence_window(&rows);
    Ok(AlignRun { rows, window, policy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(seed: u64) -> (PromptBandit, Policy, Policy, Policy, Minibatch) {
        let cfg = AlignConfig { seed, ..Default::default() };
        let (bandit, reference) = build_task(&cfg).unwrap();
        let mut rng = stream(seed, Stream::Aux);
        let shift = |p: &Policy, rng: &mut crate::rng::Rng| {
            let params = p.params().iter().map(|x| x + 0.3 * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
            Policy::new(p.arch().clone(), params).unwrap()
        };
        let old = shift(&reference, &mut rng);
        let policy = shift(&old, &mut rng);
        let mb = bandit.sample_batch(&old, &[0, 3, 5], &mut rng).unwrap();
        (bandit, reference, old, policy, mb)
    }

    fn value(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, params: &[f64]) -> f64 {
        loss_and_grad(params, f).unwrap().0
    }

    #[test]
    fn all_policies_equal_gives_half_mean_advantage() {
        let (_, reference, _, _, _) = fixture(1);
        let (bandit, ..) = fixture(1);
        let mut rng = stream(1, Stream::Aux);
        let mut mb = bandit.sample_batch(&reference, &[1, 2], &mut rng).unwrap();
        mb.advantages = (0..mb.len()).map(|i| i as f64 * 0.1 - 0.2).collect();
        let mean_a = mb.advantages.iter().sum::<f64>() / mb.len() as f64;
        let g = Gate::Sigmoid { k: 5.0 };
        let l = value(|t, p| dual_gate_loss(t, &reference, p, &mb, &reference, &g, 0.7, 0.05), reference.params());
        assert!((l + 0.5 * mean_a).abs() < 1e-12);
        let m = value(|t, p| maxratio_gate_loss(t, &reference, p, &mb, &reference, &g, 0.7, 0.05), reference.params());
        assert!((m - l).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_weight_reduces_to_penalized_surrogate() {
        let (_, reference, _, policy, mb) = fixture(2);
        let g = Gate::Sigmoid { k: 5.0 };
        let a = value(|t, p| dual_gate_loss(t, &policy, p, &mb, &reference, &g, 0.4, 0.0), policy.params());
        let b = value(|t, p| Ok(rgpo_loss(t, &policy, p, &mb, &g, 0.4)?.0), policy.params());
        assert_eq!(a, b);
    }

    #[test]
    fn dual_losses_match_finite_differences() {
        let (_, reference, _, policy, mb) = fixture(3);
        let g = Gate::Sigmoid { k: 5.0 };
        let losses: [&dyn Fn(&mut Tape, Var) -> Result<Var>; 3] = [
            &|t, p| dual_gate_loss(t, &policy, p, &mb, &reference, &g, 0.3, 0.05),
            &|t, p| maxratio_gate_loss(t, &policy, p, &mb, &reference, &g, 0.3, 0.05),
            &|t, p| ppo_rlhf_loss(t, &policy, p, &mb, &reference, 0.2, 0.05),
        ];
        for f in losses {
            let (_, grad) = loss_and_grad(policy.params(), f).unwrap();
            for i in 0..policy.num_params() {
                let mut hi = policy.params().to_vec();
                let mut lo = hi.clone();
                hi[i] += 1e-6;
                lo[i] -= 1e-6;
                let fd = (value(f, &hi) - value(f, &lo)) / 2e-6;
                assert!((fd - grad[i]).abs() < 1e-6, "param {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn maxratio_equals_dual_when_old_ratio_dominates() {
        let (_, _, old, policy, mb) = fixture(4);
        let g = Gate::Sigmoid { k: 5.0 };
        // reference = old makes the two ratios equal elementwise
        let a = value(|t, p| dual_gate_loss(t, &policy, p, &mb, &old, &g, 0.3, 0.05), policy.params());
        let b = value(|t, p| maxratio_gate_loss(t, &policy, p, &mb, &old, &g, 0.3, 0.05), policy.params());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn maxratio_selects_the_larger_ratio() {
        let bandit = PromptBandit::from_table(1, 2, 2, vec![1.0, 0.0]).unwrap();
        let old = Policy::tabular_from_logits(1, 2, vec![0.0, 0.0]).unwrap();
        // π(0) = 0.5 under old and policy, 1/6 under the reference: ratios 1 and 3
        let reference = Policy::tabular_from_logits(1, 2, vec![0.0, 5f64.ln()]).unwrap();
        let mb = Minibatch {
            states: vec![1.0, 1.0],
            actions: ActionBatch::Discrete(vec![0, 0]),
            old_log_probs: vec![0.5f64.ln(); 2],
            advantages: vec![1.0, 1.0],
            returns: vec![1.0, 1.0],
            old_values: None,
        };
        let g = Gate::Sigmoid { k: 5.0 };
        let l = value(|t, p| maxratio_gate_loss(t, &old, p, &mb, &reference, &g, 0.0, 0.0), old.params());
        assert!((l + g.value(3.0).unwrap()).abs() < 1e-9);
        assert_eq!(bandit.reward(0, 0), 1.0);
    }

    #[test]
    fn family_mismatch_is_reported() {
        let (_, _, _, policy, mb) = fixture(5);
        let mut rng = stream(0, Stream::Aux);
        let other = Policy::gaussian(8, 2, &[4], &mut rng).unwrap();
        let g = Gate::Sigmoid { k: 5.0 };
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(policy.params().to_vec()));
        let err = dual_gate_loss(&mut tape, &policy, p, &mb, &other, &g, 0.1, 0.05).unwrap_err();
        assert!(matches!(err, Error::FamilyMismatch(_)));
    }

    #[test]
    fn group_advantages_have_zero_mean_per_group() {
        let (bandit, reference, ..) = fixture(6);
        let mut rng = stream(6, Stream::Aux);
        let mb = bandit.sample_batch(&reference, &[0, 1, 2, 3], &mut rng).unwrap();
        for g in mb.advantages.chunks(bandit.group_size()) {
            assert!(g.iter().sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn zero_iterations_give_initial_row_only() {
        let run = run_alignment(&AlignConfig { iterations: 0, ..Default::default() }).unwrap();
        assert_eq!(run.rows.len(), 1);
        assert_eq!((run.rows[0].kl_ref, run.rows[0].kl_old), (0.0, 0.0));
        assert_eq!(run.window.tag(), "window_0_0");
    }

    #[test]
    fn runs_are_deterministic_and_window_scales() {
        let cfg = AlignConfig { iterations: 40, ..Default::default() };
        let a = run_alignment(&cfg).unwrap();
        assert_eq!(a, run_alignment(&cfg).unwrap());
        assert_eq!(a.window.tag(), "window_30_40");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        a.write_csv(&path).unwrap();
        assert_eq!(read_align_csv(&path).unwrap(), a.rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().last().unwrap().starts_with("window_30_40,"));
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = AlignConfig { algorithm: AlignAlgorithm::Grpo, beta_ref: 0.1, seed: 3, ..Default::default() };
        assert_eq!(AlignConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(AlignConfig::from_text("seed = 1"), Err(Error::MissingKey(k)) if k == "algorithm"));
        assert!(AlignConfig::from_text("algorithm = grpo\nbeta_ref = -1").is_err());
        assert!(matches!(AlignConfig::from_text("algorithm = grpo\nx = 1"), Err(Error::UnknownKey(_))));
    }

    #[test]
    fn slope_of_a_line() {
        let rows: Vec<AlignRow> =
            (0..5).map(|i| AlignRow { iteration: i, mean_reward: 0.0, kl_ref: 2.0 * i as f64 + 1.0, kl_old: 0.0, beta: 0.0 }).collect();
        assert!((kl_ref_slope(&rows) - 2.0).abs() < 1e-12);
    }
}
