//! Sequence-level confidence and hardness weighting for incorrect samples.
//!
//! Confidence is the geometric mean of the per-token probabilities a
//! rollout was sampled with, so it is invariant to response length. The
//! hardness weight `max(epsilon, conf^alpha)` scales the penalty on an
//! incorrect sample: confident mistakes get corrected harder, uncertain
//! guesses more gently. Both are detached scalars computed once at
//! sampling time; no gradient ever flows through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams<T> {
    /// Sensitivity exponent alpha > 0.
    pub alpha: T,
    /// Minimum weight floor in (0, 1].
    pub epsilon_floor: T,
}

impl<T: Scalar> ConfidenceParams<T> {
    /// Default weighting: alpha = 1.0, floor = 0.1.
    pub fn defaults() -> Self {
        ConfidenceParams {
            alpha: T::one(),
            epsilon_floor: cast(0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon_floor > T::zero() && self.epsilon_floor <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon_floor must lie in (0, 1], got {}",
                self.epsilon_floor
            )));
        }
        Ok(())
    }
}

/// Geometric mean of per-token probabilities, computed in log space:
/// `Conf = exp((1/T) sum log p_t)`.
///
/// Rejects entries outside (0, 1]; exact zeros cannot arise from softmax,
/// so they indicate a caller bug rather than something to clamp.
pub fn confidence<T: Scalar>(per_token_probs: &[T]) -> Result<T> {
    if per_token_probs.is_empty() {
        return Err(Error::InvalidArgument(
            "confidence needs at least one token probability".into(),
        ));
    }
    let mut log_sum = T::zero();
    for &p in per_token_probs {
        if !(p > T::zero() && p <= T::one()) {
            return Err(Error::InvalidArgument(format!(
                "token probability {p} outside (0, 1]"
            )));
        }
        log_sum += p.ln();
    }
    Ok((log_sum / cast::<T>(per_token_probs.len() as f64)).exp())
}

/// Hardness weight `w = max(epsilon, conf^alpha)`, in [epsilon, 1].
///
/// Monotone nondecreasing in confidence; the floor guarantees every
/// incorrect sample keeps a minimum penalty. Caller guarantees
/// `conf` in (0, 1].
pub fn hardness<T: Scalar>(conf: T, params: &ConfidenceParams<T>) -> T {
    debug_assert!(conf > T::zero() && conf <= T::one());
    params.epsilon_floor.max(conf.powf(params.alpha))
}
