//! Desk-scale laboratory for negative-sample reinforcement objectives on
//! tabular autoregressive policies with verifiable rewards.
//!
//! Everything a language-model-scale RLVR run estimates by sampling is an
//! exact, enumerable quantity here: sequence probabilities, correct-set
//! masses, loss values and their gradients. That makes the full objective
//! family (W-REINFORCE, adaptive schedules, confidence-weighted penalties,
//! clipped variants) testable against independent oracles: finite
//! differences for every gradient, subset enumeration for Pass@k, and
//! Monte Carlo consistency for the sampled estimators.
//!
//! Core math is generic over the [`Scalar`] floating-point type; the
//! orchestration layer (trainer, evaluation, config, CLI) instantiates
//! f64, and the crate root exports concrete f64 aliases.

// validation uses `!(x > 0)` so NaN fails the check; `x <= 0` would let
// NaN through
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod objective;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete f64 aliases for the generic core types.
pub type PolicyTable64 = policy::PolicyTable<f64>;
pub type Distribution64 = policy::Distribution<f64>;
pub type GradTable64 = grad::GradTable<f64>;
pub type Rollout64 = objective::Rollout<f64>;
pub type ObjectiveSpec64 = objective::ObjectiveSpec<f64>;
pub type ScheduleSpec64 = schedule::ScheduleSpec<f64>;
pub type ConfidenceParams64 = confidence::ConfidenceParams<f64>;
