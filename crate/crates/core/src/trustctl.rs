//! KL estimation, the adaptive penalty coefficient, spike and backstop tests.

use crate::diffcore::{Tape, Var};
use crate::{Error, Result};

/// Mean of `r − 1 − ln r` over a minibatch.
///
/// Under samples from the behavior policy this estimates `KL(π_old ‖ π_θ)`.
pub fn kl_hat(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::invalid("kl_hat of an empty minibatch"));
    }
    let mut acc = 0.0;
    for &r in ratios {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Numeric(format!("kl_hat needs positive finite ratios, got {r}")));
        }
        acc += r - 1.0 - r.ln();
    }
    Ok(acc / ratios.len() as f64)
}

/// Differentiable `kl_hat` over a ratio vector already on the tape.
pub fn kl_hat_on_tape(tape: &mut Tape, ratios: Var) -> Result<Var> {
    let log_r = tape.log(ratios)?;
    let shifted = tape.offset(ratios, -1.0)?;
    let d = tape.sub(shifted, log_r)?;
    Ok(tape.mean(d)?)
}

pub fn is_spike(mean_kl: f64, target_kl: f64) -> bool {
    mean_kl > 2.0 * target_kl
}

pub fn backstop_triggered(mean_kl: f64, tau: f64) -> bool {
    mean_kl > tau
}

/// One step of the β schedule: double on overshoot, halve on undershoot.
pub fn next_beta(beta: f64, mean_kl: f64, target_kl: f64, beta_min: f64, beta_max: f64) -> f64 {
    if mean_kl >= 1.5 * target_kl {
        (2.0 * beta).min(beta_max)
    } else if mean_kl <= target_kl / 1.5 {
        (beta / 2.0).max(beta_min)
    } else {
        beta
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaController {
    beta: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub target_kl: f64,
    pub backstop_tau: f64,
}

impl Default for BetaController {
    fn default() -> Self {
        Self { beta: 0.5, beta_min: 0.01, beta_max: 5.0, target_kl: 0.02, backstop_tau: 0.1 }
    }
}

impl BetaController {
    pub fn new(beta0: f64, beta_min: f64, beta_max: f64, target_kl: f64, backstop_tau: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max.is_finite()) {
            return Err(Error::invalid(format!("beta bounds [{beta_min}, {beta_max}]")));
        }
        if !(beta_min..=beta_max).contains(&beta0) {
            return Err(Error::invalid(format!("beta0 {beta0} outside [{beta_min}, {beta_max}]")));
        }
        if !(target_kl > 0.0) || !(backstop_tau > target_kl) {
            return Err(Error::invalid(format!(
                "need 0 < target_kl < backstop_tau, got {target_kl} and {backstop_tau}"
            )));
        }
        Ok(Self { beta: beta0, beta_min, beta_max, target_kl, backstop_tau })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn update(&mut self, mean_kl: f64) -> Result<()> {
        if !(mean_kl >= 0.0) {
            return Err(Error::invalid(format!("mean KL must be nonnegative, got {mean_kl}")));
        }
        self.beta = next_beta(self.beta, mean_kl, self.target_kl, self.beta_min, self.beta_max);
        Ok(())
    }

    pub fn is_spike(&self, mean_kl: f64) -> bool {
        is_spike(mean_kl, self.target_kl)
    }

    pub fn backstop(&self, mean_kl: f64) -> bool {
        backstop_triggered(mean_kl, self.backstop_tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use proptest::prelude::*;

    #[test]
    fn estimator_values() {
        assert_eq!(kl_hat(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((kl_hat(&[2.0]).unwrap() - 0.306_852_819_440_054_7).abs() < 1e-12);
        let both = (-0.5 - 0.5f64.ln() + 1.0 - 2.0f64.ln()) / 2.0;
        assert!((kl_hat(&[0.5, 2.0]).unwrap() - both).abs() < 1e-15);
        assert!((both - 0.25).abs() < 1e-4);
        assert!(kl_hat(&[0.0]).is_err());
        assert!(kl_hat(&[]).is_err());
    }

    #[test]
    fn tape_path_matches_scalar_path() {
        let rs = vec![0.7, 1.0, 1.9];
        let mut tape = Tape::new();
        let r = tape.param(Tensor::vector(rs.clone()));
        let k = kl_hat_on_tape(&mut tape, r).unwrap();
        assert_eq!(tape.value(k).data()[0], kl_hat(&rs).unwrap());
        // d/dr (r − 1 − ln r)/n = (1 − 1/r)/n
        let g = tape.backward(k).unwrap().wrt(&tape, r);
        for (gi, ri) in g.data().iter().zip(&rs) {
            assert!((gi - (1.0 - 1.0 / ri) / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_schedule_examples() {
        let mut c = BetaController::default();
        c.update(0.05).unwrap();
        assert_eq!(c.beta(), 1.0);
        let mut c = BetaController::default();
        c.update(0.01).unwrap();
        assert_eq!(c.beta(), 0.25);
        let mut c = BetaController::new(5.0, 0.01, 5.0, 0.02, 0.1).unwrap();
        c.update(1.0).unwrap();
        assert_eq!(c.beta(), 5.0);
        let mut c = BetaController::new(0.01, 0.01, 5.0, 0.02, 0.1).unwrap();
        c.update(0.0).unwrap();
        assert_eq!(c.beta(), 0.01);
        assert!(c.update(-1.0).is_err());
        assert!(BetaController::new(0.5, 0.01, 5.0, 0.2, 0.1).is_err());
    }

    #[test]
    fn spike_and_backstop_are_strict() {
        assert!(is_spike(0.041, 0.02));
        assert!(!is_spike(0.04, 0.02));
        assert!(!is_spike(0.0, 0.02));
        assert!(backstop_triggered(0.15, 0.1));
        assert!(!backstop_triggered(0.05, 0.1));
        assert!(!backstop_triggered(0.1, 0.1));
    }

    proptest! {
        #[test]
        fn estimator_is_nonnegative(rs in prop::collection::vec(1e-6f64..1e3, 1..50)) {
            prop_assert!(kl_hat(&rs).unwrap() >= 0.0);
        }

        #[test]
        fn beta_stays_in_bounds_and_middle_branch_is_idempotent(
            beta0 in 0.01f64..=5.0, kls in prop::collection::vec(0.0f64..0.2, 1..40)
        ) {
            let mut c = BetaController::new(beta0, 0.01, 5.0, 0.02, 0.1).unwrap();
            for kl in kls {
                c.update(kl).unwrap();
                prop_assert!((0.01..=5.0).contains(&c.beta()));
            }
            let before = c.beta();
            c.update(0.02).unwrap();
            c.update(0.02).unwrap();
            prop_assert_eq!(c.beta(), before);
        }
    }
}
