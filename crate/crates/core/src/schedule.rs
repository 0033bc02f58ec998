//! Time-dependent weighting functions for adaptive negative reinforcement.
//!
//! Three schedules drive the PSR weight lambda(t) and the NSR weight
//! beta(t): exponential decay with a linear ramp, cosine annealing, and a
//! performance-driven weight computed from the batch correct ratio. A
//! constant schedule exists for reduction tests and baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Schedule 1: beta decays exponentially, lambda ramps linearly.
    ExponentialLinear,
    /// Schedule 2: beta follows cosine annealing, lambda ramps linearly.
    Cosine,
    /// Schedule 3: beta driven by the batch correct ratio, lambda fixed.
    PerformanceDriven,
    /// Fixed (lambda, beta) pair.
    Constant,
}

/// Parameters for lambda(t) and beta(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec<T> {
    pub kind: ScheduleKind,
    pub beta_max: T,
    pub beta_min: T,
    /// Per-step decay rate for the exponential schedule.
    pub kappa: T,
    pub lambda_min: T,
    pub lambda_max: T,
    pub total_steps: u64,
    /// Fixed lambda for the performance-driven and constant kinds.
    pub constant_lambda: T,
    /// Fixed beta for the constant kind.
    pub constant_beta: T,
}

impl<T: Scalar> ScheduleSpec<T> {
    /// Schedule 1 with the standard defaults: beta 1.5 -> 0.5 at kappa
    /// 0.03, lambda 0.05 -> 0.2.
    pub fn exponential_linear_defaults(total_steps: u64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::ExponentialLinear,
            beta_max: cast(1.5),
            beta_min: cast(0.5),
            kappa: cast(0.03),
            lambda_min: cast(0.05),
            lambda_max: cast(0.2),
            total_steps,
            constant_lambda: cast(0.1),
            constant_beta: T::one(),
        }
    }

    pub fn cosine_defaults(total_steps: u64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            ..Self::exponential_linear_defaults(total_steps)
        }
    }

    pub fn performance_driven_defaults(total_steps: u64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::PerformanceDriven,
            ..Self::exponential_linear_defaults(total_steps)
        }
    }

    pub fn constant(lambda: T, beta: T, total_steps: u64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Constant,
            constant_lambda: lambda,
            constant_beta: beta,
            ..Self::exponential_linear_defaults(total_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > T::zero() && self.beta_max >= self.beta_min) {
            return Err(Error::InvalidArgument(format!(
                "schedule requires beta_max >= beta_min > 0, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.lambda_min > T::zero() && self.lambda_max >= self.lambda_min) {
            return Err(Error::InvalidArgument(format!(
                "schedule requires lambda_max >= lambda_min > 0, got [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(self.kappa > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if self.total_steps < 1 {
            return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
        }
        if !(self.constant_lambda > T::zero() && self.constant_beta > T::zero()) {
            return Err(Error::InvalidArgument(
                "constant schedule weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One evaluated (lambda(t), beta(t)) pair; both strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightPair<T> {
    pub lambda_t: T,
    pub beta_t: T,
}

/// `beta(t) = beta_min + (beta_max - beta_min) e^(-kappa t)`.
pub fn beta_exponential<T: Scalar>(t: u64, spec: &ScheduleSpec<T>) -> T {
    let decay = (-spec.kappa * cast::<T>(t as f64)).exp();
    spec.beta_min + (spec.beta_max - spec.beta_min) * decay
}

/// `lambda(t) = lambda_min + (lambda_max - lambda_min) t / T_total`.
///
/// Steps beyond the horizon clamp to lambda_max with a warning record;
/// training loops may legitimately overrun a nominal horizon.
pub fn lambda_linear<T: Scalar>(t: u64, spec: &ScheduleSpec<T>) -> T {
    if t > spec.total_steps {
        log::warn!(
            "lambda_linear: step {t} beyond horizon {}, clamping to lambda_max",
            spec.total_steps
        );
        return spec.lambda_max;
    }
    let frac = cast::<T>(t as f64) / cast::<T>(spec.total_steps as f64);
    spec.lambda_min + (spec.lambda_max - spec.lambda_min) * frac
}

/// `beta(t) = beta_min + (beta_max - beta_min)(1 + cos(pi t / T_total)) / 2`.
pub fn beta_cosine<T: Scalar>(t: u64, spec: &ScheduleSpec<T>) -> T {
    if t > spec.total_steps {
        log::warn!(
            "beta_cosine: step {t} beyond horizon {}, clamping to beta_min",
            spec.total_steps
        );
        return spec.beta_min;
    }
    let phase =
        cast::<T>(std::f64::consts::PI) * cast::<T>(t as f64) / cast::<T>(spec.total_steps as f64);
    let half: T = cast(0.5);
    spec.beta_min + half * (spec.beta_max - spec.beta_min) * (T::one() + phase.cos())
}

/// Analytic derivative of the cosine schedule:
/// `beta'(t) = -(pi / (2 T_total))(beta_max - beta_min) sin(pi t / T_total)`.
/// Zero at both endpoints.
pub fn cosine_derivative<T: Scalar>(t: u64, spec: &ScheduleSpec<T>) -> T {
    let pi: T = cast(std::f64::consts::PI);
    let total = cast::<T>(spec.total_steps as f64);
    let phase = pi * cast::<T>(t as f64) / total;
    -(pi / (cast::<T>(2.0) * total)) * (spec.beta_max - spec.beta_min) * phase.sin()
}

/// `beta = beta_min + (beta_max - beta_min)(1 - p_correct)`: high penalty
/// while the batch is mostly wrong, low once accuracy improves.
pub fn beta_adaptive<T: Scalar>(p_correct: T, spec: &ScheduleSpec<T>) -> Result<T> {
    if !(p_correct >= T::zero() && p_correct <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "correct ratio {p_correct} outside [0, 1]"
        )));
    }
    Ok(spec.beta_min + (spec.beta_max - spec.beta_min) * (T::one() - p_correct))
}

/// Effective NSR-to-PSR ratio `rho(t) = beta(t) / lambda(t)` for the
/// time-based kinds. The performance-driven kind has no time-only ratio.
pub fn effective_ratio<T: Scalar>(t: u64, spec: &ScheduleSpec<T>) -> Result<T> {
    let pair = match spec.kind {
        ScheduleKind::PerformanceDriven => {
            return Err(Error::InvalidArgument(
                "effective_ratio is undefined for the performance-driven schedule".into(),
            ))
        }
        _ => weights(t, spec, None)?,
    };
    Ok(pair.beta_t / pair.lambda_t)
}

/// Evaluates the schedule at step `t`. The performance-driven kind
/// requires the batch correct ratio.
pub fn weights<T: Scalar>(
    t: u64,
    spec: &ScheduleSpec<T>,
    p_correct: Option<T>,
) -> Result<WeightPair<T>> {
    let pair = match spec.kind {
        ScheduleKind::ExponentialLinear => WeightPair {
            lambda_t: lambda_linear(t, spec),
            beta_t: beta_exponential(t, spec),
        },
        ScheduleKind::Cosine => WeightPair {
            lambda_t: lambda_linear(t, spec),
            beta_t: beta_cosine(t, spec),
        },
        ScheduleKind::PerformanceDriven => {
            let p = p_correct.ok_or_else(|| {
                Error::InvalidArgument(
                    "performance-driven schedule needs the batch correct ratio".into(),
                )
            })?;
            WeightPair {
                lambda_t: spec.constant_lambda,
                beta_t: beta_adaptive(p, spec)?,
            }
        }
        ScheduleKind::Constant => WeightPair {
            lambda_t: spec.constant_lambda,
            beta_t: spec.constant_beta,
        },
    };
    debug_assert!(pair.lambda_t > T::zero() && pair.beta_t > T::zero());
    Ok(pair)
}
