//! Surrogate losses, all written for minimization.

use crate::diffcore::{Tape, Tensor, Var};
use crate::gatebank::Gate;
use crate::policy::{ActionBatch, Policy};
use crate::trustctl::kl_hat_on_tape;
use crate::{Error, Result};

use super::value::ValueNet;

/// The rows of a rollout that one gradient step sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    /// Flat `[B, obs_dim]`.
    pub states: Vec<f64>,
    pub actions: ActionBatch,
    /// `log π_old(a|s)` recorded at collection time.
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Value predictions at collection time, used for value clipping.
    pub old_values: Option<Vec<f64>>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        if n == 0
            || self.actions.len() != n
            || self.old_log_probs.len() != n
            || self.returns.len() != n
            || self.old_values.as_ref().is_some_and(|v| v.len() != n)
        {
            return Err(Error::Dimension("minibatch fields have inconsistent lengths".into()));
        }
        Ok(())
    }
}

/// `r_i = exp(log π_θ − log π_old)` as a `[B]` vector.
pub fn record_ratios(tape: &mut Tape, policy: &Policy, params: Var, mb: &Minibatch) -> Result<Var> {
    mb.check()?;
    let lp = policy.record_log_probs(tape, params, &mb.states, &mb.actions)?;
    let old = tape.constant(Tensor::vector(mb.old_log_probs.clone()));
    let d = tape.sub(lp, old)?;
    Ok(tape.exp(d)?)
}

/// `mean(g(r)·Â)` over the minibatch.
pub fn record_gated_surrogate(tape: &mut Tape, gate: &Gate, ratios: Var, advantages: &[f64]) -> Result<Var> {
    let g = gate.apply(tape, ratios)?;
    let a = tape.constant(Tensor::vector(advantages.to_vec()));
    let ga = tape.mul(g, a)?;
    Ok(tape.mean(ga)?)
}

/// `−mean(g(r)·Â) + β·mean(r − 1 − ln r)`. Returns the loss and the ratios.
pub fn rgpo_loss(tape: &mut Tape, policy: &Policy, params: Var, mb: &Minibatch, gate: &Gate, beta: f64) -> Result<(Var, Var)> {
    let r = record_ratios(tape, policy, params, mb)?;
    let surrogate = record_gated_surrogate(tape, gate, r, &mb.advantages)?;
    let neg = tape.neg(surrogate)?;
    if beta == 0.0 {
        return Ok((neg, r));
    }
    let kl = kl_hat_on_tape(tape, r)?;
    let pen = tape.scale(kl, beta)?;
    Ok((tape.add(neg, pen)?, r))
}

/// `−mean(min(r·Â, clip(r, 1 − ε, 1 + ε)·Â))`; ties take the unclipped branch.
pub fn ppo_loss(tape: &mut Tape, policy: &Policy, params: Var, mb: &Minibatch, eps: f64) -> Result<(Var, Var)> {
    let r = record_ratios(tape, policy, params, mb)?;
    let a = tape.constant(Tensor::vector(mb.advantages.clone()));
    let unclipped = tape.mul(r, a)?;
    let rc = tape.clip(r, 1.0 - eps, 1.0 + eps)?;
    let clipped = tape.mul(rc, a)?;
    let m = tape.min(unclipped, clipped)?;
    let obj = tape.mean(m)?;
    Ok((tape.neg(obj)?, r))
}

/// Advantage weights `min(exp(Â/β), w_max)`.
pub fn awr_weights(advantages: &[f64], awr_beta: f64, weight_max: f64) -> Vec<f64> {
    let cap = weight_max.ln();
    advantages
        .iter()
        .map(|a| {
            let z = a / awr_beta;
            if z >= cap {
                weight_max
            } else {
                z.exp().min(weight_max)
            }
        })
        .collect()
}

/// `−mean(w·log π)` with fixed advantage weights and no ratio correction.
pub fn awr_loss(tape: &mut Tape, policy: &Policy, params: Var, mb: &Minibatch, awr_beta: f64, weight_max: f64) -> Result<Var> {
    mb.check()?;
    let lp = policy.record_log_probs(tape, params, &mb.states, &mb.actions)?;
    let w = tape.constant(Tensor::vector(awr_weights(&mb.advantages, awr_beta, weight_max)));
    let wl = tape.mul(lp, w)?;
    let m = tape.mean(wl)?;
    Ok(tape.neg(m)?)
}

/// `−mean(log π·Â)`.
pub fn reinforce_loss(tape: &mut Tape, policy: &Policy, params: Var, mb: &Minibatch) -> Result<Var> {
    mb.check()?;
    let lp = policy.record_log_probs(tape, params, &mb.states, &mb.actions)?;
    let a = tape.constant(Tensor::vector(mb.advantages.clone()));
    let la = tape.mul(lp, a)?;
    let m = tape.mean(la)?;
    Ok(tape.neg(m)?)
}

/// `mean(max((V − R)², (V_clip − R)²))` with `V_clip = V_old + clip(V − V_old, ±ε)`;
/// plain mean squared error when `old_values` is `None`.
pub fn value_loss(
    tape: &mut Tape,
    value: &ValueNet,
    params: Var,
    states: &[f64],
    returns: &[f64],
    old_values: Option<&[f64]>,
    eps_v: f64,
) -> Result<Var> {
    let v = value.record(tape, params, states)?;
    if tape.shape(v) != [returns.len()] || old_values.is_some_and(|o| o.len() != returns.len()) {
        return Err(Error::Dimension("value targets do not match the states".into()));
    }
    let r = tape.constant(Tensor::vector(returns.to_vec()));
    let err = tape.sub(v, r)?;
    let sq = tape.square(err)?;
    let per = match old_values {
        None => sq,
        Some(old) => {
            let o = tape.constant(Tensor::vector(old.to_vec()));
            let d = tape.sub(v, o)?;
            let d = tape.clip(d, -eps_v, eps_v)?;
            let vc = tape.add(o, d)?;
            let errc = tape.sub(vc, r)?;
            let sqc = tape.square(errc)?;
            tape.max(sq, sqc)?
        }
    };
    Ok(tape.mean(per)?)
}

/// Gradient of a scalar loss recorded by `f` with respect to `params`.
pub fn loss_and_grad(params: &[f64], f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(params.to_vec()));
    let loss = f(&mut tape, p)?;
    let g = tape.backward(loss)?.wrt(&tape, p);
    Ok((tape.value(loss).data()[0], g.into_data()))
}

/// `mean_i w(r_i)·Â_i·∇log π(a_i|s_i)`, assembled from per-sample scores.
pub fn assembled_gated_gradient(policy: &Policy, mb: &Minibatch, gate: &Gate) -> Result<Vec<f64>> {
    mb.check()?;
    let d = policy.obs_dim();
    let mut acc = vec![0.0; policy.num_params()];
    for i in 0..mb.len() {
        let s = &mb.states[i * d..(i + 1) * d];
        let a = mb.actions.get(i);
        let r = (policy.log_prob(s, &a)? - mb.old_log_probs[i]).exp();
        let coef = gate.weight(r)? * mb.advantages[i];
        for (g, x) in acc.iter_mut().zip(policy.grad_log_prob(s, &a)?) {
            *g += coef * x;
        }
    }
    let n = mb.len() as f64;
    acc.iter_mut().for_each(|g| *g /= n);
    Ok(acc)
}
