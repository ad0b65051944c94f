//! Rejection-gated policy optimization.
//!
//! The importance ratio `r = π_θ/π_old` is passed through a smooth, monotone
//! acceptance gate `g(r)` before it multiplies the advantage, so each sample's
//! gradient contribution is scaled by the effective weight `w(r) = g'(r)·r`.
//! This crate contains the pieces needed to train with that objective and to
//! check its properties numerically:
//!
//! - [`diffcore`]: reverse-mode autodiff over dense arrays
//! - [`policy`]: categorical and Gaussian policies, snapshots, parameter files
//! - [`gatebank`]: gate functions, effective weights, grids and histograms
//! - [`advantage`]: GAE, normalization and group-relative advantages
//! - [`trustctl`]: the `r − 1 − ln r` KL estimator and the adaptive penalty
//! - [`diagnostics`]: ESS, gradient variance and the metrics CSV
//! - [`envlab`]: exactly solvable MDPs, a point-mass task, Pareto ratios
//! - [`trainer`]: the training loop with RGPO, PPO, AWR, REINFORCE and IS objectives
//! - [`theorylab`]: numerical checks of the bias, variance and improvement bounds
//! - [`prefalign`]: a preference-alignment bandit with dual-gate objectives

pub mod advantage;
pub mod diagnostics;
pub mod diffcore;
pub mod envlab;
mod error;
pub mod gatebank;
pub mod kv;
pub mod policy;
pub mod prefalign;
pub mod rng;
pub mod theorylab;
pub mod trainer;
pub mod trustctl;

pub use error::{Error, Result};
