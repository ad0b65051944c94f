use std::fmt;
use std::str::FromStr;

use crate::gatebank::Gate;
use crate::kv::KvFile;
use crate::{Error, Result};

use super::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Rgpo,
    Ppo,
    Awr,
    Reinforce,
    IdentityIs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::Rgpo, Algorithm::Ppo, Algorithm::Awr, Algorithm::Reinforce, Algorithm::IdentityIs];

    /// Whether the adaptive KL penalty and the backstop apply.
    pub fn uses_kl_penalty(self) -> bool {
        matches!(self, Algorithm::Rgpo | Algorithm::IdentityIs)
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "rgpo" => Algorithm::Rgpo,
            "ppo" => Algorithm::Ppo,
            "awr" => Algorithm::Awr,
            "reinforce" => Algorithm::Reinforce,
            "identity_is" => Algorithm::IdentityIs,
            other => return Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        })
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Rgpo => "rgpo",
            Algorithm::Ppo => "ppo",
            Algorithm::Awr => "awr",
            Algorithm::Reinforce => "reinforce",
            Algorithm::IdentityIs => "identity_is",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    /// Random tabular MDP run episodically with one-hot observations.
    RandomMdp,
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "point_mass" => Ok(EnvKind::PointMass),
            "random_mdp" => Ok(EnvKind::RandomMdp),
            other => Err(Error::invalid(format!("unknown env `{other}`"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::PointMass => "point_mass",
            EnvKind::RandomMdp => "random_mdp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub gate: Gate,
    pub learning_rate: f64,
    pub gamma: f64,
    pub lam: f64,
    pub minibatch_size: usize,
    pub n_epochs: usize,
    pub rollout_steps: usize,
    pub target_kl: f64,
    pub beta0: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub backstop_tau: f64,
    pub eps_clip: f64,
    pub value_clip: f64,
    pub awr_beta: f64,
    pub awr_weight_max: f64,
    pub seed: u64,
    pub total_iterations: usize,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
    pub normalize_advantages: bool,
    pub env: EnvKind,
    pub horizon: usize,
    pub env_noise: f64,
    /// Seed of the generated MDP when `env = random_mdp`.
    pub env_seed: u64,
    pub mdp_states: usize,
    pub mdp_actions: usize,
    /// Record elapsed time in `wall_seconds`; off keeps the CSV reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Rgpo,
            gate: Gate::Sigmoid { k: 5.0 },
            learning_rate: 3e-4,
            gamma: 0.99,
            lam: 0.95,
            minibatch_size: 64,
            n_epochs: 10,
            rollout_steps: 512,
            target_kl: 0.02,
            beta0: 0.5,
            beta_min: 0.01,
            beta_max: 5.0,
            backstop_tau: 0.1,
            eps_clip: 0.2,
            value_clip: 0.2,
            awr_beta: 1.0,
            awr_weight_max: 20.0,
            seed: 0,
            total_iterations: 200,
            optimizer: OptimizerKind::Sgd,
            hidden: vec![64, 64],
            normalize_advantages: true,
            env: EnvKind::PointMass,
            horizon: 100,
            env_noise: 0.05,
            env_seed: 0,
            mdp_states: 4,
            mdp_actions: 2,
            wall_clock: false,
        }
    }
}

macro_rules! take_fields {
    ($kv:expr, $cfg:expr, $($field:ident),* $(,)?) => {
        $( if let Some(v) = $kv.take(stringify!($field))? { $cfg.$field = v; } )*
    };
}

impl TrainConfig {
    /// Parses a config file. `algorithm` is required; every other key
    /// defaults, and unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        if !kv.contains("algorithm") {
            return Err(Error::MissingKey("algorithm".into()));
        }
        let mut cfg = Self::default();
        cfg.apply(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides fields from any keys present in `kv`, consuming them.
    pub fn apply(&mut self, kv: &mut KvFile) -> Result<()> {
        take_fields!(
            kv, self, algorithm, gate, learning_rate, gamma, lam, minibatch_size, n_epochs, rollout_steps,
            target_kl, beta0, beta_min, beta_max, backstop_tau, eps_clip, value_clip, awr_beta,
            awr_weight_max, seed, total_iterations, optimizer, normalize_advantages, env, horizon,
            env_noise, env_seed, mdp_states, mdp_actions, wall_clock,
        );
        if let Some(h) = kv.take_list("hidden")? {
            self.hidden = h;
        }
        Ok(())
    }

    /// Sets one field from its textual value, as a config line would.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut kv = KvFile::parse(&format!("{key} = {value}"))?;
        self.apply(&mut kv)?;
        kv.finish()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        self.gate.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return bad("gamma and lam must lie in [0, 1]");
        }
        if self.minibatch_size == 0 || self.n_epochs == 0 || self.rollout_steps == 0 || self.horizon == 0 {
            return bad("minibatch_size, n_epochs, rollout_steps and horizon must be positive");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) || !(self.value_clip > 0.0) {
            return bad("eps_clip must lie in (0, 1) and value_clip must be positive");
        }
        if !(self.awr_beta > 0.0) || !(self.awr_weight_max > 0.0) {
            return bad("awr_beta and awr_weight_max must be positive");
        }
        if !(self.env_noise >= 0.0) || self.mdp_states == 0 || self.mdp_actions == 0 {
            return bad("env_noise must be nonnegative and MDP sizes positive");
        }
        if self.hidden.contains(&0) || self.hidden.len() > 2 {
            return bad("hidden takes one or two positive layer widths");
        }
        crate::trustctl::BetaController::new(self.beta0, self.beta_min, self.beta_max, self.target_kl, self.backstop_tau)?;
        Ok(())
    }

    /// The config as file text that [`TrainConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        crate::kv::render(&[
            ("algorithm", self.algorithm.to_string()),
            ("gate", self.gate.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lam", self.lam.to_string()),
            ("minibatch_size", self.minibatch_size.to_string()),
            ("n_epochs", self.n_epochs.to_string()),
            ("rollout_steps", self.rollout_steps.to_string()),
            ("target_kl", self.target_kl.to_string()),
            ("beta0", self.beta0.to_string()),
            ("beta_min", self.beta_min.to_string()),
            ("beta_max", self.beta_max.to_string()),
            ("backstop_tau", self.backstop_tau.to_string()),
            ("eps_clip", self.eps_clip.to_string()),
            ("value_clip", self.value_clip.to_string()),
            ("awr_beta", self.awr_beta.to_string()),
            ("awr_weight_max", self.awr_weight_max.to_string()),
            ("seed", self.seed.to_string()),
            ("total_iterations", self.total_iterations.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("hidden", hidden.join(",")),
            ("normalize_advantages", self.normalize_advantages.to_string()),
            ("env", self.env.to_string()),
            ("horizon", self.horizon.to_string()),
            ("env_noise", self.env_noise.to_string()),
            ("env_seed", self.env_seed.to_string()),
            ("mdp_states", self.mdp_states.to_string()),
            ("mdp_actions", self.mdp_actions.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
        ])
    }
}
