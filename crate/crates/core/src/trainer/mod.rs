//! The training loop: rollout, GAE, gated surrogate with the KL penalty,
//! value regression and the β schedule, with PPO, AWR, REINFORCE and plain
//! importance sampling sharing the same loop.
//!
//! One iteration:
//!
//! 1. freeze `π_old`, collect `rollout_steps` transitions (episodes restart
//!    at the start of every rollout; the tail is bootstrapped with `V`);
//! 2. GAE, then per-rollout advantage normalization;
//! 3. `n_epochs` passes over a fresh permutation, in minibatches. Before each
//!    minibatch update the minibatch's `kl_hat` is measured; the update then
//!    runs; if the measured value exceeds `τ` the epoch loop stops (the
//!    offending update is kept);
//! 4. the mean of the measured KLs drives the β schedule.
//!
//! The penalty, the β schedule and the backstop apply to `rgpo` and
//! `identity_is`. The other algorithms log the same KL measurements.

mod config;
mod losses;
mod optim;
mod value;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

pub use config::{Algorithm, EnvKind, TrainConfig};
pub use losses::{
    assembled_gated_gradient, awr_loss, awr_weights, loss_and_grad, ppo_loss, record_gated_surrogate,
    record_ratios, reinforce_loss, rgpo_loss, value_loss, Minibatch,
};
pub use optim::{Optimizer, OptimizerKind};
pub use value::ValueNet;

use crate::advantage::{gae, normalize};
use crate::diagnostics::{ess, grad_variance, write_metrics, IterationMetrics};
use crate::envlab::{ActionSpace, Env, ExactMdp, MdpEnv, PointMassEnv};
use crate::policy::{ActionBatch, Policy};
use crate::rng::{indexed, stream, Rng, Stream};
use crate::trustctl::{is_spike, kl_hat, BetaController};
use crate::{Error, Result};

/// Transitions collected under one frozen policy.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    /// Flat `[n, obs_dim]`.
    pub states: Vec<f64>,
    pub actions: ActionBatch,
    pub rewards: Vec<f64>,
    /// Episode ended after this step (terminal state or horizon).
    pub terminals: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// `V(s_n)` for the unfinished tail; 0 when the last step was terminal.
    pub bootstrap_value: f64,
    /// Undiscounted returns of episodes that finished inside the rollout.
    pub episode_returns: Vec<f64>,
    pub clamped_actions: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Mean return of finished episodes; with none finished, the return of
    /// the partial episode.
    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            self.rewards.iter().sum()
        } else {
            self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
        }
    }
}

/// Collects exactly `n_steps` transitions, starting from a fresh episode.
/// `value` fills the value predictions and the bootstrap (zeros without it).
pub fn rollout(
    env: &mut dyn Env,
    policy: &Policy,
    value: Option<&ValueNet>,
    n_steps: usize,
    rng: &mut Rng,
) -> Result<RolloutBatch> {
    if n_steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if env.obs_dim() != policy.obs_dim() {
        return Err(Error::Dimension(format!("env observes {} values, policy expects {}", env.obs_dim(), policy.obs_dim())));
    }
    let mut actions = match env.action_space() {
        ActionSpace::Discrete(_) => ActionBatch::Discrete(Vec::with_capacity(n_steps)),
        ActionSpace::Continuous(dim) => ActionBatch::Continuous { dim, data: Vec::with_capacity(n_steps * dim) },
    };
    let mut states = Vec::with_capacity(n_steps * env.obs_dim());
    let (mut rewards, mut terminals, mut log_probs) = (vec![], vec![], vec![]);
    let mut episode_returns = vec![];
    let mut clamped_actions = 0;
    let mut ep_return = 0.0;
    let mut obs = env.reset(rng);
    for _ in 0..n_steps {
        let action = policy.sample(&obs, rng)?;
        log_probs.push(policy.log_prob(&obs, &action)?);
        let step = env.step(&action, rng)?;
        states.extend_from_slice(&obs);
        actions.push(&action)?;
        rewards.push(step.reward);
        terminals.push(step.done);
        clamped_actions += usize::from(step.clamped);
        ep_return += step.reward;
        obs = if step.done {
            episode_returns.push(ep_return);
            ep_return = 0.0;
            env.reset(rng)
        } else {
            step.obs
        };
    }
    let (values, bootstrap_value) = match value {
        Some(v) => {
            let values = v.predict(&states)?;
            let boot = if *terminals.last().unwrap_or(&true) { 0.0 } else { v.predict(&obs)?[0] };
            (values, boot)
        }
        None => (vec![0.0; n_steps], 0.0),
    };
    if log_probs.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric("non-finite behavior log-probability".into()));
    }
    Ok(RolloutBatch {
        obs_dim: env.obs_dim(),
        states,
        actions,
        rewards,
        terminals,
        log_probs,
        values,
        bootstrap_value,
        episode_returns,
        clamped_actions,
    })
}

/// Everything that evolves across iterations.
pub struct TrainState {
    pub policy: Policy,
    pub value: ValueNet,
    pub controller: BetaController,
    pub iteration: usize,
    env: Box<dyn Env>,
    policy_opt: Optimizer,
    value_opt: Optimizer,
    rollout_rng: Rng,
    shuffle_rng: Rng,
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("iteration", &self.iteration)
            .field("beta", &self.controller.beta())
            .finish_non_exhaustive()
    }
}

/// Per-minibatch record of the iteration currently being run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateTrace {
    /// `(epoch, minibatch index)` of every processed update.
    pub steps: Vec<(usize, usize)>,
    /// `kl_hat` measured before each update.
    pub kls: Vec<f64>,
    /// The backstop stopped the epoch loop early.
    pub backstopped: bool,
    /// Policy-loss gradients, one per processed minibatch.
    pub gradients: Vec<Vec<f64>>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init = stream(config.seed, Stream::Init);
        let env: Box<dyn Env> = match config.env {
            EnvKind::PointMass => Box::new(PointMassEnv::new(config.horizon, config.env_noise)),
            EnvKind::RandomMdp => {
                let mut env_rng = indexed(config.env_seed, Stream::Init, 1);
                let gamma = config.gamma.min(0.99);
                let mdp = ExactMdp::random(config.mdp_states, config.mdp_actions, gamma, &mut env_rng)?;
                Box::new(MdpEnv::new(mdp, config.horizon))
            }
        };
        let policy = match env.action_space() {
            ActionSpace::Continuous(dim) => Policy::gaussian(env.obs_dim(), dim, &config.hidden, &mut init)?,
            ActionSpace::Discrete(n) => Policy::tabular(env.obs_dim(), n)?,
        };
        let value = ValueNet::new(env.obs_dim(), &config.hidden, &mut init)?;
        let controller =
            BetaController::new(config.beta0, config.beta_min, config.beta_max, config.target_kl, config.backstop_tau)?;
        Ok(Self {
            policy_opt: Optimizer::new(config.optimizer, config.learning_rate, policy.num_params()),
            value_opt: Optimizer::new(config.optimizer, config.learning_rate, value.params().len()),
            policy,
            value,
            controller,
            iteration: 0,
            env,
            rollout_rng: stream(config.seed, Stream::Rollout),
            shuffle_rng: stream(config.seed, Stream::Shuffle),
        })
    }

    pub fn env_mut(&mut self) -> &mut dyn Env {
        self.env.as_mut()
    }

    /// Collects a rollout with the current policy from the run's rollout stream.
    pub fn collect(&mut self, n_steps: usize) -> Result<RolloutBatch> {
        rollout(self.env.as_mut(), &self.policy, Some(&self.value), n_steps, &mut self.rollout_rng)
    }
}

/// Importance weights in the convention each algorithm's ESS uses.
pub fn ess_weights(config: &TrainConfig, ratios: &[f64], advantages: &[f64]) -> Result<Vec<f64>> {
    Ok(match config.algorithm {
        Algorithm::Rgpo => ratios.iter().map(|&r| config.gate.weight(r)).collect::<Result<_>>()?,
        Algorithm::IdentityIs => ratios.to_vec(),
        Algorithm::Ppo => ratios.iter().map(|r| r.clamp(1.0 - config.eps_clip, 1.0 + config.eps_clip)).collect(),
        Algorithm::Awr => awr_weights(advantages, config.awr_beta, config.awr_weight_max),
        Algorithm::Reinforce => vec![1.0; ratios.len()],
    })
}

fn policy_loss(
    config: &TrainConfig,
    policy: &Policy,
    mb: &Minibatch,
    beta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ratios = Vec::new();
    let (_, grad) = loss_and_grad(policy.params(), |tape, p| {
        let (loss, r) = match config.algorithm {
            Algorithm::Rgpo => rgpo_loss(tape, policy, p, mb, &config.gate, beta)?,
            Algorithm::IdentityIs => rgpo_loss(tape, policy, p, mb, &crate::gatebank::Gate::IdentityIs, beta)?,
            Algorithm::Ppo => ppo_loss(tape, policy, p, mb, config.eps_clip)?,
            Algorithm::Awr => {
                let l = awr_loss(tape, policy, p, mb, config.awr_beta, config.awr_weight_max)?;
                let r = record_ratios(tape, policy, p, mb)?;
                (l, r)
            }
            Algorithm::Reinforce => {
                let l = reinforce_loss(tape, policy, p, mb)?;
                let r = record_ratios(tape, policy, p, mb)?;
                (l, r)
            }
        };
        ratios = tape.value(r).data().to_vec();
        Ok(loss)
    })?;
    Ok((grad, ratios))
}

fn select_minibatch(batch: &RolloutBatch, adv: &[f64], returns: &[f64], idx: &[usize]) -> Minibatch {
    let d = batch.obs_dim;
    Minibatch {
        states: idx.iter().flat_map(|&i| batch.states[i * d..(i + 1) * d].iter().copied()).collect(),
        actions: batch.actions.select(idx),
        old_log_probs: idx.iter().map(|&i| batch.log_probs[i]).collect(),
        advantages: idx.iter().map(|&i| adv[i]).collect(),
        returns: idx.iter().map(|&i| returns[i]).collect(),
        old_values: Some(idx.iter().map(|&i| batch.values[i]).collect()),
    }
}

/// Runs one iteration and returns its metrics.
pub fn train_iteration(state: &mut TrainState, config: &TrainConfig) -> Result<IterationMetrics> {
    Ok(train_iteration_traced(state, config)?.0)
}

/// [`train_iteration`] plus the per-minibatch trace.
pub fn train_iteration_traced(state: &mut TrainState, config: &TrainConfig) -> Result<(IterationMetrics, UpdateTrace)> {
    let started = Instant::now();
    let beta = state.controller.beta();
    let batch = state.collect(config.rollout_steps)?;
    let est = gae(&batch.rewards, &batch.values, &batch.terminals, batch.bootstrap_value, config.gamma, config.lam)?;
    let adv = if config.normalize_advantages { normalize(&est.advantages) } else { est.advantages.clone() };

    let mut trace = UpdateTrace::default();
    let mut weights = Vec::new();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    'epochs: for epoch in 0..config.n_epochs {
        order.shuffle(&mut state.shuffle_rng);
        for (m, idx) in order.chunks(config.minibatch_size).enumerate() {
            let mb = select_minibatch(&batch, &adv, &est.returns, idx);
            let (grad, ratios) = policy_loss(config, &state.policy, &mb, beta)?;
            let kl = kl_hat(&ratios)?;
            weights.extend(ess_weights(config, &ratios, &mb.advantages)?);

            let mut params = state.policy.params().to_vec();
            state.policy_opt.step(&mut params, &grad)?;
            state.policy.set_params(params)?;

            let value = &state.value;
            let (_, vgrad) = loss_and_grad(value.params(), |tape, p| {
                value_loss(tape, value, p, &mb.states, &mb.returns, mb.old_values.as_deref(), config.value_clip)
            })?;
            state.value_opt.step(state.value.params_mut(), &vgrad)?;

            trace.steps.push((epoch, m));
            trace.kls.push(kl);
            trace.gradients.push(grad);
            if config.algorithm.uses_kl_penalty() && state.controller.backstop(kl) {
                trace.backstopped = true;
                break 'epochs;
            }
        }
    }

    let mean_kl = trace.kls.iter().sum::<f64>() / trace.kls.len() as f64;
    let max_kl = trace.kls.iter().copied().fold(0.0, f64::max);
    if config.algorithm.uses_kl_penalty() {
        state.controller.update(mean_kl)?;
    }
    let ess = match ess(&weights) {
        Ok(e) => e,
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let grad_variance = if trace.gradients.len() >= 2 { grad_variance(&trace.gradients)? } else { 0.0 };
    let metrics = IterationMetrics {
        iteration: state.iteration,
        mean_return: batch.mean_return(),
        mean_kl,
        max_kl,
        spike: is_spike(mean_kl, config.target_kl),
        ess,
        grad_variance,
        beta,
        wall_seconds: if config.wall_clock { started.elapsed().as_secs_f64() } else { 0.0 },
    };
    state.iteration += 1;
    Ok((metrics, trace))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<IterationMetrics>,
    pub initial_policy: Policy,
    pub policy: Policy,
}

impl TrainOutcome {
    pub fn write(&self, metrics_csv: &Path, params_file: &Path) -> Result<()> {
        write_metrics(metrics_csv, &self.metrics)?;
        self.policy.save(params_file)
    }
}

/// Runs `total_iterations` iterations from a fresh state.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config)?;
    let initial_policy = state.policy.clone();
    let mut metrics = Vec::with_capacity(config.total_iterations);
    for _ in 0..config.total_iterations {
        metrics.push(train_iteration(&mut state, config)?);
    }
    Ok(TrainOutcome { metrics, initial_policy, policy: state.policy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trustctl::next_beta;

    fn small(algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            algorithm,
            rollout_steps: 128,
            minibatch_size: 32,
            n_epochs: 3,
            hidden: vec![16],
            total_iterations: 4,
            optimizer: OptimizerKind::Adam,
            ..Default::default()
        }
    }

    #[test]
    fn rollout_records_behavior_log_probs() {
        let cfg = small(Algorithm::Rgpo);
        let mut state = TrainState::new(&cfg).unwrap();
        let batch = state.collect(250).unwrap();
        assert_eq!(batch.len(), 250);
        assert_eq!(batch.episode_returns.len(), 2);
        assert!(batch.terminals[99] && batch.terminals[199] && !batch.terminals[249]);
        let again = state.policy.log_probs(&batch.states, &batch.actions).unwrap();
        assert_eq!(again, batch.log_probs);
        let one = state.collect(1).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn rollout_is_reproducible() {
        let cfg = small(Algorithm::Ppo);
        let a = TrainState::new(&cfg).unwrap().collect(64).unwrap();
        let b = TrainState::new(&cfg).unwrap().collect(64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        for alg in Algorithm::ALL {
            let cfg = TrainConfig { learning_rate: 0.0, ..small(alg) };
            let mut state = TrainState::new(&cfg).unwrap();
            let before = state.policy.clone();
            let m = train_iteration(&mut state, &cfg).unwrap();
            assert_eq!(state.policy, before);
            assert_eq!((m.mean_kl, m.max_kl, m.spike), (0.0, 0.0, false));
        }
    }

    #[test]
    fn first_minibatch_is_on_policy() {
        let cfg = small(Algorithm::Rgpo);
        let mut state = TrainState::new(&cfg).unwrap();
        let (_, trace) = train_iteration_traced(&mut state, &cfg).unwrap();
        assert_eq!(trace.kls[0], 0.0);
        assert_eq!(trace.steps[0], (0, 0));
    }

    #[test]
    fn beta_trajectory_replays_the_schedule() {
        let cfg = TrainConfig { total_iterations: 6, ..small(Algorithm::Rgpo) };
        let out = train(&cfg).unwrap();
        for w in out.metrics.windows(2) {
            assert_eq!(w[1].beta, next_beta(w[0].beta, w[0].mean_kl, 0.02, 0.01, 5.0));
        }
        assert_eq!(out.metrics[0].beta, 0.5);
    }

    #[test]
    fn training_is_deterministic_and_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { total_iterations: 2, ..small(Algorithm::Rgpo) };
        let (c1, c2, p) = (dir.path().join("a.csv"), dir.path().join("b.csv"), dir.path().join("p.txt"));
        train(&cfg).unwrap().write(&c1, &p).unwrap();
        train(&cfg).unwrap().write(&c2, &p).unwrap();
        assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());

        let zero = TrainConfig { total_iterations: 0, ..cfg };
        let out = train(&zero).unwrap();
        out.write(&c1, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&c1).unwrap().lines().count(), 1);
        assert_eq!(Policy::load(&p).unwrap(), out.initial_policy);
    }

    #[test]
    fn every_algorithm_runs_on_both_envs() {
        for alg in Algorithm::ALL {
            for env in [EnvKind::PointMass, EnvKind::RandomMdp] {
                let cfg = TrainConfig { env, total_iterations: 2, horizon: 20, ..small(alg) };
                let out = train(&cfg).unwrap();
                for m in &out.metrics {
                    assert!(m.ess > 0.0 && m.ess <= 1.0, "{alg} {env}: {m:?}");
                    assert!(m.max_kl >= m.mean_kl && m.mean_kl >= 0.0);
                    assert!(m.mean_return.is_finite());
                }
            }
        }
    }
}
