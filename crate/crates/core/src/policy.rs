//! Categorical and diagonal-Gaussian policies over flat parameter vectors.
//!
//! Every log-probability, scalar or batched, goes through the same tape
//! recording. Matrix products accumulate each row independently, so the log
//! probability of a transition does not depend on the batch it sits in and an
//! unchanged policy has ratios of exactly 1.
//!
//! # Parameter files
//!
//! Text. A `key = value` header describing the architecture, a line holding
//! `---`, then one value per line in flat order. Values are written with
//! Rust's shortest round-trip formatting, so loading restores every bit.
//!
//! ```text
//! family = gaussian
//! obs_dim = 4
//! act_dim = 2
//! hidden = 64,64
//! n_params = 4610
//! ---
//! 0.0123
//! ...
//! ```
//!
//! Categorical files carry `family = categorical`, `obs_dim`, `n_actions` and
//! `bias` instead.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::diffcore::{logsumexp, Tape, Tensor, Var};
use crate::kv::KvFile;
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Logits `x·W (+ b)`. A tabular policy is the bias-free case fed
    /// one-hot state features.
    Categorical { obs_dim: usize, n_actions: usize, bias: bool },
    /// Mean from a tanh MLP; state-independent `log_std`.
    Gaussian { obs_dim: usize, act_dim: usize, hidden: Vec<usize> },
}

impl Arch {
    pub fn obs_dim(&self) -> usize {
        match self {
            Arch::Categorical { obs_dim, .. } | Arch::Gaussian { obs_dim, .. } => *obs_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Arch::Categorical { obs_dim, n_actions, bias } => obs_dim * n_actions + if *bias { *n_actions } else { 0 },
            Arch::Gaussian { act_dim, .. } => {
                self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>() + act_dim
            }
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        match self {
            Arch::Categorical { obs_dim, n_actions, .. } => vec![*obs_dim, *n_actions],
            Arch::Gaussian { obs_dim, act_dim, hidden } => {
                let mut d = vec![*obs_dim];
                d.extend(hidden);
                d.push(*act_dim);
                d
            }
        }
    }

    fn family(&self) -> &'static str {
        match self {
            Arch::Categorical { .. } => "categorical",
            Arch::Gaussian { .. } => "gaussian",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Arch::Categorical { obs_dim, n_actions, .. } => *obs_dim > 0 && *n_actions > 0,
            Arch::Gaussian { obs_dim, act_dim, hidden } => {
                *obs_dim > 0 && *act_dim > 0 && hidden.iter().all(|&h| h > 0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("zero-sized policy architecture {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// A batch of actions stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionBatch {
    Discrete(Vec<usize>),
    Continuous { dim: usize, data: Vec<f64> },
}

impl ActionBatch {
    pub fn len(&self) -> usize {
        match self {
            ActionBatch::Discrete(a) => a.len(),
            ActionBatch::Continuous { dim, data } => data.len() / dim.max(&1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Action {
        match self {
            ActionBatch::Discrete(a) => Action::Discrete(a[i]),
            ActionBatch::Continuous { dim, data } => Action::Continuous(data[i * dim..(i + 1) * dim].to_vec()),
        }
    }

    pub fn push(&mut self, action: &Action) -> Result<()> {
        match (self, action) {
            (ActionBatch::Discrete(v), Action::Discrete(a)) => v.push(*a),
            (ActionBatch::Continuous { dim, data }, Action::Continuous(a)) if a.len() == *dim => {
                data.extend_from_slice(a)
            }
            _ => return Err(Error::Dimension("action does not fit the batch".into())),
        }
        Ok(())
    }

    /// The rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> ActionBatch {
        match self {
            ActionBatch::Discrete(a) => ActionBatch::Discrete(idx.iter().map(|&i| a[i]).collect()),
            ActionBatch::Continuous { dim, data } => ActionBatch::Continuous {
                dim: *dim,
                data: idx.iter().flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied()).collect(),
            },
        }
    }

    fn from_action(action: &Action) -> ActionBatch {
        match action {
            Action::Discrete(a) => ActionBatch::Discrete(vec![*a]),
            Action::Continuous(a) => ActionBatch::Continuous { dim: a.len(), data: a.clone() },
        }
    }
}

/// Output head recorded on a tape.
pub enum Head {
    /// Row-wise log-probabilities `[B, n_actions]`.
    LogProbs(Var),
    /// Means `[B, act_dim]` and log standard deviations `[act_dim]`.
    Gaussian { mean: Var, log_std: Var },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    arch: Arch,
    params: Vec<f64>,
}

/// A frozen copy of a policy used as `π_old` or `π_ref`.
#[derive(Clone, Debug)]
pub struct PolicySnapshot(Arc<Policy>);

impl std::ops::Deref for PolicySnapshot {
    type Target = Policy;
    fn deref(&self) -> &Policy {
        &self.0
    }
}

pub fn one_hot(index: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    v
}

impl Policy {
    pub fn new(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Dimension(format!(
                "{} parameters for an architecture that needs {}",
                params.len(),
                arch.num_params()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite policy parameter".into()));
        }
        Ok(Self { arch, params })
    }

    /// Uniform tabular policy: zero logits over one-hot states.
    pub fn tabular(n_states: usize, n_actions: usize) -> Result<Self> {
        let arch = Arch::Categorical { obs_dim: n_states, n_actions, bias: false };
        let n = arch.num_params();
        Self::new(arch, vec![0.0; n])
    }

    /// Tabular policy from a row-major `[n_states, n_actions]` logit table.
    pub fn tabular_from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        Self::new(Arch::Categorical { obs_dim: n_states, n_actions, bias: false }, logits)
    }

    /// Linear-softmax policy with bias, near-uniform at initialization.
    pub fn linear_categorical<R: Rng + ?Sized>(obs_dim: usize, n_actions: usize, rng: &mut R) -> Result<Self> {
        let arch = Arch::Categorical { obs_dim, n_actions, bias: true };
        arch.validate()?;
        let bound = 0.01 / (obs_dim as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
        let mut params: Vec<f64> = (0..obs_dim * n_actions).map(|_| u.sample(rng)).collect();
        params.extend(std::iter::repeat_n(0.0, n_actions));
        Self::new(arch, params)
    }

    /// Gaussian MLP policy. Weights are uniform in `±1/√fan_in`, the output
    /// layer is shrunk by 0.01, biases and `log_std` start at 0.
    pub fn gaussian<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let arch = Arch::Gaussian { obs_dim, act_dim, hidden: hidden.to_vec() };
        arch.validate()?;
        let params = init_mlp(&arch.layer_dims(), rng)?;
        let mut params = params;
        params.extend(std::iter::repeat_n(0.0, act_dim));
        Self::new(arch, params)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        *self = Self::new(self.arch.clone(), params)?;
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        self.arch.obs_dim()
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot(Arc::new(self.clone()))
    }

    fn check_states(&self, states: &[f64]) -> Result<usize> {
        let d = self.obs_dim();
        if states.is_empty() || !states.len().is_multiple_of(d) {
            return Err(Error::Dimension(format!("{} state values for observation size {d}", states.len())));
        }
        Ok(states.len() / d)
    }

    fn check_actions(&self, actions: &ActionBatch, batch: usize) -> Result<()> {
        let ok = match (&self.arch, actions) {
            (Arch::Categorical { n_actions, .. }, ActionBatch::Discrete(a)) => {
                a.len() == batch && a.iter().all(|&x| x < *n_actions)
            }
            (Arch::Gaussian { act_dim, .. }, ActionBatch::Continuous { dim, data }) => {
                dim == act_dim && data.len() == batch * dim && data.iter().all(|x| x.is_finite())
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!("actions do not match a {} policy over {batch} states", self.arch.family())))
        }
    }

    /// Records the output head for a `[B, obs_dim]` state batch.
    pub fn record_head(&self, tape: &mut Tape, params: Var, states: &[f64]) -> Result<Head> {
        let b = self.check_states(states)?;
        if tape.shape(params) != [self.num_params()] {
            return Err(Error::Dimension("parameter variable does not match the policy".into()));
        }
        let x = tape.constant(Tensor::matrix(b, self.obs_dim(), states.to_vec())?);
        match &self.arch {
            Arch::Categorical { obs_dim, n_actions, bias } => {
                let w = tape.slice(params, 0, vec![*obs_dim, *n_actions])?;
                let mut logits = tape.matmul(x, w)?;
                if *bias {
                    let bv = tape.slice(params, obs_dim * n_actions, vec![*n_actions])?;
                    logits = tape.add_row(logits, bv)?;
                }
                Ok(Head::LogProbs(tape.log_softmax(logits)?))
            }
            Arch::Gaussian { act_dim, .. } => {
                let (h, off) = record_mlp(tape, params, 0, &self.arch.layer_dims(), x)?;
                let log_std = tape.slice(params, off, vec![*act_dim])?;
                Ok(Head::Gaussian { mean: h, log_std })
            }
        }
    }

    /// Records `log π(a_i | s_i)` as a `[B]` vector.
    pub fn record_log_probs(&self, tape: &mut Tape, params: Var, states: &[f64], actions: &ActionBatch) -> Result<Var> {
        let b = self.check_states(states)?;
        self.check_actions(actions, b)?;
        match (self.record_head(tape, params, states)?, actions) {
            (Head::LogProbs(lp), ActionBatch::Discrete(a)) => Ok(tape.gather(lp, a)?),
            (Head::Gaussian { mean, log_std }, ActionBatch::Continuous { dim, data }) => {
                let a = tape.constant(Tensor::matrix(b, *dim, data.clone())?);
                let diff = tape.sub(a, mean)?;
                let neg = tape.neg(log_std)?;
                let inv_std = tape.exp(neg)?;
                let z = tape.mul_row(diff, inv_std)?;
                let z2 = tape.square(z)?;
                let quad = tape.sum_rows(z2)?;
                let quad = tape.scale(quad, -0.5)?;
                let norm = tape.sum(log_std)?;
                let norm = tape.offset(norm, *dim as f64 * HALF_LN_2PI)?;
                Ok(tape.sub(quad, norm)?)
            }
            _ => unreachable!("actions checked against the architecture"),
        }
    }

    /// Records the per-state `KL(π_θ ‖ other)` as a `[B]` vector, with
    /// `other` held constant.
    pub fn record_kl_to(&self, tape: &mut Tape, params: Var, states: &[f64], other: &Policy) -> Result<Var> {
        self.check_family(other)?;
        let b = self.check_states(states)?;
        match self.record_head(tape, params, states)? {
            Head::LogProbs(lp) => {
                let n = tape.shape(lp)[1];
                let other_lp = Tensor::matrix(b, n, other.log_prob_table(states)?)?;
                let olp = tape.constant(other_lp);
                let p = tape.exp(lp)?;
                let d = tape.sub(lp, olp)?;
                let pd = tape.mul(p, d)?;
                Ok(tape.sum_rows(pd)?)
            }
            Head::Gaussian { mean, log_std } => {
                let (om, ols) = other.gaussian_params(states)?;
                let d = om.len() / b;
                let om = tape.constant(Tensor::matrix(b, d, om)?);
                let inv_var_o = tape.constant(Tensor::vector(ols.iter().map(|l| 0.5 * (-2.0 * l).exp()).collect()));
                // Σ_j [ls_o − ls + (σ² + (μ − μ_o)²) / (2σ_o²) − ½]
                let diff = tape.sub(mean, om)?;
                let diff2 = tape.square(diff)?;
                let two_ls = tape.scale(log_std, 2.0)?;
                let var = tape.exp(two_ls)?;
                let zeros = tape.constant(Tensor::zeros(&[b, d]));
                let var_rows = tape.add_row(zeros, var)?;
                let num = tape.add(diff2, var_rows)?;
                let quad = tape.mul_row(num, inv_var_o)?;
                let quad = tape.sum_rows(quad)?;
                let ls_sum = tape.sum(log_std)?;
                let c = ols.iter().sum::<f64>() - 0.5 * d as f64;
                let ls_term = tape.neg(ls_sum)?;
                let ls_term = tape.offset(ls_term, c)?;
                Ok(tape.add(quad, ls_term)?)
            }
        }
    }

    fn check_family(&self, other: &Policy) -> Result<()> {
        if self.arch == other.arch {
            Ok(())
        } else {
            Err(Error::FamilyMismatch(format!("{:?} vs {:?}", self.arch, other.arch)))
        }
    }

    /// Batched `log π(a_i | s_i)`.
    pub fn log_probs(&self, states: &[f64], actions: &ActionBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(self.params.clone()));
        let lp = self.record_log_probs(&mut tape, p, states, actions)?;
        Ok(tape.value(lp).data().to_vec())
    }

    pub fn log_prob(&self, state: &[f64], action: &Action) -> Result<f64> {
        if state.len() != self.obs_dim() {
            return Err(Error::Dimension(format!("state of size {} for observation size {}", state.len(), self.obs_dim())));
        }
        Ok(self.log_probs(state, &ActionBatch::from_action(action))?[0])
    }

    /// Gradient of `log π(a | s)` with respect to the flat parameters.
    pub fn grad_log_prob(&self, state: &[f64], action: &Action) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(self.params.clone()));
        let lp = self.record_log_probs(&mut tape, p, state, &ActionBatch::from_action(action))?;
        let s = tape.sum(lp)?;
        Ok(tape.backward(s)?.wrt(&tape, p).into_data())
    }

    /// Row-major `[B, n_actions]` log-probabilities of a categorical policy.
    pub fn log_prob_table(&self, states: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(self.params.clone()));
        match self.record_head(&mut tape, p, states)? {
            Head::LogProbs(lp) => Ok(tape.value(lp).data().to_vec()),
            Head::Gaussian { .. } => Err(Error::Unsupported("action table of a Gaussian policy".into())),
        }
    }

    pub fn probs(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_prob_table(state)?.into_iter().map(f64::exp).collect())
    }

    /// Means `[B, act_dim]` and the shared log standard deviations.
    pub fn gaussian_params(&self, states: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(self.params.clone()));
        match self.record_head(&mut tape, p, states)? {
            Head::Gaussian { mean, log_std } => {
                Ok((tape.value(mean).data().to_vec(), tape.value(log_std).data().to_vec()))
            }
            Head::LogProbs(_) => Err(Error::Unsupported("Gaussian parameters of a categorical policy".into())),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Action> {
        match &self.arch {
            Arch::Categorical { .. } => {
                let probs = self.probs(state)?;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last_positive = 0;
                for (i, p) in probs.iter().enumerate() {
                    if *p > 0.0 {
                        last_positive = i;
                    }
                    acc += p;
                    if u < acc {
                        return Ok(Action::Discrete(i));
                    }
                }
                Ok(Action::Discrete(last_positive))
            }
            Arch::Gaussian { .. } => {
                if state.len() != self.obs_dim() {
                    return Err(Error::Dimension("state size".into()));
                }
                let (mean, log_std) = self.gaussian_params(state)?;
                Ok(Action::Continuous(
                    mean.iter()
                        .zip(&log_std)
                        .map(|(m, l)| {
                            let z: f64 = StandardNormal.sample(rng);
                            m + l.exp() * z
                        })
                        .collect(),
                ))
            }
        }
    }

    /// `π_θ(a|s) / π_old(a|s)`.
    pub fn ratio(&self, snapshot: &PolicySnapshot, state: &[f64], action: &Action) -> Result<f64> {
        self.check_family(snapshot)?;
        Ok((self.log_prob(state, action)? - snapshot.log_prob(state, action)?).exp())
    }

    /// Closed-form `KL(π_θ(·|s) ‖ π_old(·|s))`.
    pub fn kl_exact(&self, snapshot: &Policy, state: &[f64]) -> Result<f64> {
        self.check_family(snapshot)?;
        if state.len() != self.obs_dim() {
            return Err(Error::Dimension("state size".into()));
        }
        let kl = match self.arch {
            Arch::Categorical { .. } => {
                let lp = self.log_prob_table(state)?;
                let lq = snapshot.log_prob_table(state)?;
                categorical_kl(&lp, &lq)
            }
            Arch::Gaussian { .. } => {
                let (m1, l1) = self.gaussian_params(state)?;
                let (m0, l0) = snapshot.gaussian_params(state)?;
                (0..m1.len())
                    .map(|j| {
                        let v1 = (2.0 * l1[j]).exp();
                        let v0 = (2.0 * l0[j]).exp();
                        l0[j] - l1[j] + (v1 + (m1[j] - m0[j]).powi(2)) / (2.0 * v0) - 0.5
                    })
                    .sum()
            }
        };
        Ok(kl.max(0.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match &self.arch {
            Arch::Categorical { obs_dim, n_actions, bias } => {
                let _ = write!(out, "family = categorical\nobs_dim = {obs_dim}\nn_actions = {n_actions}\nbias = {bias}\n");
            }
            Arch::Gaussian { obs_dim, act_dim, hidden } => {
                let h: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                let _ = write!(out, "family = gaussian\nobs_dim = {obs_dim}\nact_dim = {act_dim}\nhidden = {}\n", h.join(","));
            }
        }
        let _ = writeln!(out, "n_params = {}\n---", self.params.len());
        for p in &self.params {
            let _ = writeln!(out, "{p}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = String::new();
        let mut header_lines = 0;
        for line in lines.by_ref() {
            header_lines += 1;
            if line.trim() == "---" {
                break;
            }
            header.push_str(line);
            header.push('\n');
        }
        if !text.lines().any(|l| l.trim() == "---") {
            return Err(Error::Parse { line: header_lines, message: "missing `---` separator".into() });
        }
        let mut kv = KvFile::parse(&header)?;
        let family: String = kv.require("family")?;
        let arch = match family.as_str() {
            "categorical" => Arch::Categorical {
                obs_dim: kv.require("obs_dim")?,
                n_actions: kv.require("n_actions")?,
                bias: kv.require("bias")?,
            },
            "gaussian" => Arch::Gaussian {
                obs_dim: kv.require("obs_dim")?,
                act_dim: kv.require("act_dim")?,
                hidden: kv.take_list("hidden")?.unwrap_or_default(),
            },
            other => return Err(Error::Parse { line: 1, message: format!("unknown family `{other}`") }),
        };
        let n: usize = kv.require("n_params")?;
        kv.finish()?;
        arch.validate()?;
        if n != arch.num_params() {
            return Err(Error::Dimension(format!("header says {n} parameters, architecture needs {}", arch.num_params())));
        }
        let mut params = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|_| Error::Parse { line: header_lines + i + 1, message: format!("bad value `{line}`") })?;
            params.push(v);
        }
        Self::new(arch, params)
    }
}

/// Records a tanh MLP whose weights (`[in, out]`, then bias) start at
/// `offset` in `params`. Returns the output and the offset past the last layer.
pub(crate) fn record_mlp(tape: &mut Tape, params: Var, offset: usize, dims: &[usize], x: Var) -> Result<(Var, usize)> {
    let mut h = x;
    let mut off = offset;
    for (i, w) in dims.windows(2).enumerate() {
        let wm = tape.slice(params, off, vec![w[0], w[1]])?;
        off += w[0] * w[1];
        let bv = tape.slice(params, off, vec![w[1]])?;
        off += w[1];
        let z = tape.matmul(h, wm)?;
        h = tape.add_row(z, bv)?;
        if i + 2 < dims.len() {
            h = tape.tanh(h)?;
        }
    }
    Ok((h, off))
}

pub(crate) fn init_mlp<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Vec<f64>> {
    let mut params = Vec::new();
    let n_layers = dims.len() - 1;
    for (i, w) in dims.windows(2).enumerate() {
        let mut bound = 1.0 / (w[0] as f64).sqrt();
        if i + 1 == n_layers {
            bound *= 0.01;
        }
        let u = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
        params.extend((0..w[0] * w[1]).map(|_| u.sample(rng)));
        params.extend(std::iter::repeat_n(0.0, w[1]));
    }
    Ok(params)
}

/// `Σ p (log p − log q)` from log-probabilities.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Log-probabilities of a logit vector.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn gaussian_fixture() -> Policy {
        let mut rng = stream(3, Stream::Init);
        let mut p = Policy::gaussian(3, 2, &[5, 4], &mut rng).unwrap();
        // larger output weights and a nonzero log_std so tests see real curvature
        let n = p.num_params();
        let params: Vec<f64> = p.params().iter().enumerate().map(|(i, v)| if i >= n - 2 { 0.3 } else { v * 30.0 }).collect();
        p.set_params(params).unwrap();
        p
    }

    #[test]
    fn log_prob_examples() {
        let u = Policy::tabular(1, 2).unwrap();
        assert!((u.log_prob(&[1.0], &Action::Discrete(0)).unwrap() - 0.5f64.ln()).abs() < 1e-15);

        let mut rng = stream(0, Stream::Init);
        let mut g = Policy::gaussian(2, 1, &[4], &mut rng).unwrap();
        g.set_params(vec![0.0; g.num_params()]).unwrap();
        let lp = g.log_prob(&[0.3, -0.2], &Action::Continuous(vec![0.0])).unwrap();
        assert!((lp + HALF_LN_2PI).abs() < 1e-15);
        assert!((lp + 0.9189).abs() < 1e-4);

        let t = Policy::tabular_from_logits(1, 2, vec![1.0, 0.0]).unwrap();
        let lp = t.log_prob(&[1.0], &Action::Discrete(0)).unwrap();
        assert!((lp + (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((lp + 0.3133).abs() < 1e-4);
    }

    #[test]
    fn dimension_errors() {
        let t = Policy::tabular(3, 2).unwrap();
        assert!(t.log_prob(&[1.0, 0.0], &Action::Discrete(0)).is_err());
        assert!(t.log_prob(&[1.0, 0.0, 0.0], &Action::Discrete(2)).is_err());
        assert!(t.log_prob(&[1.0, 0.0, 0.0], &Action::Continuous(vec![0.0])).is_err());
        assert!(Policy::new(Arch::Categorical { obs_dim: 2, n_actions: 2, bias: true }, vec![0.0; 4]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = stream(4, Stream::Aux);
        let logits: Vec<f64> = (0..20).map(|_| rng.random_range(-5.0..5.0)).collect();
        let t = Policy::tabular_from_logits(5, 4, logits).unwrap();
        for s in 0..5 {
            let p = t.probs(&one_hot(s, 5)).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let mut rng = stream(5, Stream::Init);
        let mut g = Policy::gaussian(2, 1, &[3], &mut rng).unwrap();
        let mut params = g.params().to_vec();
        *params.last_mut().unwrap() = -0.4;
        g.set_params(params).unwrap();
        let s = [0.7, -1.1];
        let (n, lo, hi) = (20_000, -10.0, 10.0);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let a = lo + i as f64 * h;
            let f = g.log_prob(&s, &Action::Continuous(vec![a])).unwrap().exp();
            total += if i == 0 || i == n { 0.5 * f } else { f };
        }
        assert!((total * h - 1.0).abs() < 1e-9, "{}", total * h);
    }

    #[test]
    fn sampling_is_degenerate_reproducible_and_unbiased() {
        let t = Policy::tabular_from_logits(1, 3, vec![-800.0, -800.0, 0.0]).unwrap();
        let mut rng = stream(1, Stream::Rollout);
        for _ in 0..100 {
            assert_eq!(t.sample(&[1.0], &mut rng).unwrap(), Action::Discrete(2));
        }

        let g = gaussian_fixture();
        let s = [0.2, 0.1, -0.3];
        let run = |seed| {
            let mut rng = stream(seed, Stream::Rollout);
            (0..50).map(|_| g.sample(&s, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));

        let (mean, log_std) = g.gaussian_params(&s).unwrap();
        let n = 100_000;
        let mut rng = stream(12, Stream::Rollout);
        let mut acc = [0.0; 2];
        for _ in 0..n {
            if let Action::Continuous(a) = g.sample(&s, &mut rng).unwrap() {
                acc[0] += a[0];
                acc[1] += a[1];
            }
        }
        for j in 0..2 {
            let sd = log_std[j].exp();
            assert!((acc[j] / n as f64 - mean[j]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn ratio_examples() {
        let g = gaussian_fixture();
        let snap = g.snapshot();
        let mut rng = stream(2, Stream::Rollout);
        for _ in 0..50 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = g.sample(&s, &mut rng).unwrap();
            assert_eq!(g.ratio(&snap, &s, &a).unwrap(), 1.0);
        }
        let new = Policy::tabular_from_logits(1, 2, vec![0.8f64.ln(), 0.2f64.ln()]).unwrap();
        let old = Policy::tabular_from_logits(1, 2, vec![0.4f64.ln(), 0.6f64.ln()]).unwrap();
        assert!((new.ratio(&old.snapshot(), &[1.0], &Action::Discrete(0)).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(new.ratio(&g.snapshot(), &[1.0], &Action::Discrete(0)), Err(Error::FamilyMismatch(_))));
    }

    #[test]
    fn ratio_gradient_is_ratio_times_score() {
        let g = gaussian_fixture();
        let mut moved = g.clone();
        moved.set_params(g.params().iter().enumerate().map(|(i, v)| v + 0.01 * ((i % 7) as f64 - 3.0)).collect()).unwrap();
        let snap = g.snapshot();
        let s = [0.5, -0.4, 1.0];
        let a = Action::Continuous(vec![0.3, -0.8]);
        let old_lp = snap.log_prob(&s, &a).unwrap();

        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(moved.params().to_vec()));
        let lp = moved.record_log_probs(&mut tape, p, &s, &ActionBatch::from_action(&a)).unwrap();
        let d = tape.offset(lp, -old_lp).unwrap();
        let r = tape.exp(d).unwrap();
        let r = tape.sum(r).unwrap();
        let grad_r = tape.backward(r).unwrap().wrt(&tape, p);

        let ratio = moved.ratio(&snap, &s, &a).unwrap();
        let score = moved.grad_log_prob(&s, &a).unwrap();
        for (x, y) in grad_r.data().iter().zip(&score) {
            assert!((x - ratio * y).abs() <= 1e-10 * x.abs().max(1.0));
        }
    }

    #[test]
    fn log_prob_gradients_match_finite_differences() {
        use crate::diffcore::Program;
        for policy in [gaussian_fixture(), {
            let mut rng = stream(6, Stream::Init);
            let mut p = Policy::linear_categorical(3, 4, &mut rng).unwrap();
            p.set_params(p.params().iter().map(|v| v * 100.0 + 0.1).collect()).unwrap();
            p
        }] {
            let states = vec![0.5, -0.4, 1.0, 0.1, 0.2, -0.9];
            let actions = match policy.arch() {
                Arch::Categorical { .. } => ActionBatch::Discrete(vec![1, 3]),
                Arch::Gaussian { .. } => ActionBatch::Continuous { dim: 2, data: vec![0.3, -0.8, 1.0, 0.0] },
            };
            let pol = policy.clone();
            let prog = Program::new(vec![vec![policy.num_params()]], move |tape, v| {
                let lp = pol.record_log_probs(tape, v[0], &states, &actions).map_err(|e| match e {
                    Error::Diff(d) => d,
                    other => crate::diffcore::DiffError::InvalidArgument(other.to_string()),
                })?;
                tape.sum(lp)
            });
            let rep = prog.finite_difference_check(&[Tensor::vector(policy.params().to_vec())], 1e-5, 1e-6).unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn kl_examples() {
        let a = Policy::tabular_from_logits(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Policy::tabular_from_logits(1, 2, vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        assert_eq!(a.kl_exact(&a, &[1.0]).unwrap(), 0.0);
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((a.kl_exact(&b, &[1.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.1438).abs() < 1e-4);

        let mut rng = stream(0, Stream::Init);
        let mut g0 = Policy::gaussian(1, 1, &[], &mut rng).unwrap();
        g0.set_params(vec![0.0, 0.0, 0.0]).unwrap();
        let mut g1 = g0.clone();
        g1.set_params(vec![0.0, 1.0, 0.0]).unwrap();
        assert!((g0.kl_exact(&g1, &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(g0.kl_exact(&a, &[1.0]).is_err());
    }

    #[test]
    fn recorded_kl_matches_closed_form() {
        let g = gaussian_fixture();
        let mut h = g.clone();
        h.set_params(g.params().iter().map(|v| v * 0.9 + 0.01).collect()).unwrap();
        let states = [0.5, -0.4, 1.0, 0.3, 0.3, 0.3];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(h.params().to_vec()));
        let kl = h.record_kl_to(&mut tape, p, &states, &g).unwrap();
        for i in 0..2 {
            let exact = h.kl_exact(&g, &states[i * 3..i * 3 + 3]).unwrap();
            assert!((tape.value(kl).data()[i] - exact).abs() < 1e-12);
        }
        let t1 = Policy::tabular_from_logits(2, 3, vec![0.1, 0.5, -0.3, 1.0, 0.0, 0.2]).unwrap();
        let t0 = Policy::tabular(2, 3).unwrap();
        let states = [1.0, 0.0, 0.0, 1.0];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(t1.params().to_vec()));
        let kl = t1.record_kl_to(&mut tape, p, &states, &t0).unwrap();
        for s in 0..2 {
            let exact = t1.kl_exact(&t0, &one_hot(s, 2)).unwrap();
            assert!((tape.value(kl).data()[s] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = stream(9, Stream::Aux);
        for _ in 0..5 {
            let l1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let l0: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let p = Policy::tabular_from_logits(1, 4, l1).unwrap();
            let q = Policy::tabular_from_logits(1, 4, l0).unwrap();
            let exact = p.kl_exact(&q, &[1.0]).unwrap();
            let n = 20_000;
            let xs: Vec<f64> = (0..n)
                .map(|_| {
                    let a = p.sample(&[1.0], &mut rng).unwrap();
                    p.log_prob(&[1.0], &a).unwrap() - q.log_prob(&[1.0], &a).unwrap()
                })
                .collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            assert!((m - exact).abs() < 3.0 * sd / (n as f64).sqrt(), "{m} vs {exact}");
        }
    }

    #[test]
    fn params_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let mut rng = stream(1, Stream::Init);
        for p in [
            gaussian_fixture(),
            Policy::linear_categorical(4, 3, &mut rng).unwrap(),
            Policy::tabular_from_logits(1, 3, vec![-0.0, 1e-300, f64::MAX]).unwrap(),
        ] {
            p.save(&path).unwrap();
            let q = Policy::load(&path).unwrap();
            assert_eq!(p.arch(), q.arch());
            for (a, b) in p.params().iter().zip(q.params()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(Policy::from_text("family = gaussian\n").is_err());
        assert!(Policy::from_text("family = categorical\nobs_dim = 1\nn_actions = 2\nbias = false\nn_params = 2\n---\n1\n").is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(l1 in prop::collection::vec(-5.0f64..5.0, 4), l0 in prop::collection::vec(-5.0f64..5.0, 4)) {
            let p = Policy::tabular_from_logits(1, 4, l1).unwrap();
            let q = Policy::tabular_from_logits(1, 4, l0).unwrap();
            prop_assert!(p.kl_exact(&q, &[1.0]).unwrap() >= 0.0);
        }
    }
}
