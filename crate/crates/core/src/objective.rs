//! Loss functionals: exact (enumeration) and Monte Carlo (sampled) forms.
//!
//! Sign conventions are fixed so gradient descent on every returned
//! scalar implements the intended update: correct-sample mass is rewarded
//! (enters with a minus sign), incorrect-sample mass is penalized (enters
//! with a plus sign). The per-token Monte Carlo losses carry a 1/T mean.

use serde::{Deserialize, Serialize};

use crate::confidence::{confidence, hardness, ConfidenceParams};
use crate::env::{EnvSpec, Reward};
use crate::error::{Error, Result};
use crate::policy::{sequence_index, Distribution, PolicyTable, Token};
use crate::scalar::{cast, Scalar};
use crate::schedule::{weights, ScheduleSpec};

/// Which loss family applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveFamily {
    /// Plain RLVR: unit weight on both signs.
    Rlvr,
    /// Positive sample reinforcement only.
    PsrOnly,
    /// Negative sample reinforcement only.
    NsrOnly,
    /// Fixed lambda on PSR, unit weight on NSR.
    WReinforce,
    /// Scheduled lambda(t) / beta(t).
    ANsr,
    /// Fixed lambda on PSR, per-sample hardness weight on NSR.
    CwNsr,
    /// Scheduled weights multiplied with per-sample hardness (experimental
    /// composition; the natural product form).
    ACwNsr,
}

impl ObjectiveFamily {
    pub fn needs_schedule(self) -> bool {
        matches!(self, ObjectiveFamily::ANsr | ObjectiveFamily::ACwNsr)
    }

    pub fn needs_confidence(self) -> bool {
        matches!(self, ObjectiveFamily::CwNsr | ObjectiveFamily::ACwNsr)
    }

    pub fn label(self) -> &'static str {
        match self {
            ObjectiveFamily::Rlvr => "rlvr",
            ObjectiveFamily::PsrOnly => "psr-only",
            ObjectiveFamily::NsrOnly => "nsr-only",
            ObjectiveFamily::WReinforce => "w-reinforce",
            ObjectiveFamily::ANsr => "a-nsr",
            ObjectiveFamily::CwNsr => "cw-nsr",
            ObjectiveFamily::ACwNsr => "a-cw-nsr",
        }
    }
}

/// Loss family plus every weighting hyperparameter it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec<T> {
    pub family: ObjectiveFamily,
    /// Fixed PSR weight for the unscheduled families. Default 0.1.
    pub lambda: T,
    pub schedule: Option<ScheduleSpec<T>>,
    pub confidence_params: Option<ConfidenceParams<T>>,
    /// Clip radius for the clipped objective. Default 0.2.
    pub clip_epsilon: Option<T>,
}

impl<T: Scalar> ObjectiveSpec<T> {
    pub fn new(family: ObjectiveFamily) -> Self {
        ObjectiveSpec {
            family,
            lambda: cast(0.1),
            schedule: None,
            confidence_params: None,
            clip_epsilon: None,
        }
    }

    pub fn w_reinforce() -> Self {
        Self::new(ObjectiveFamily::WReinforce)
    }

    pub fn a_nsr(schedule: ScheduleSpec<T>) -> Self {
        ObjectiveSpec {
            schedule: Some(schedule),
            ..Self::new(ObjectiveFamily::ANsr)
        }
    }

    pub fn cw_nsr(params: ConfidenceParams<T>) -> Self {
        ObjectiveSpec {
            confidence_params: Some(params),
            ..Self::new(ObjectiveFamily::CwNsr)
        }
    }

    pub fn a_cw_nsr(schedule: ScheduleSpec<T>, params: ConfidenceParams<T>) -> Self {
        ObjectiveSpec {
            schedule: Some(schedule),
            confidence_params: Some(params),
            ..Self::new(ObjectiveFamily::ACwNsr)
        }
    }

    pub fn with_lambda(mut self, lambda: T) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_clip_epsilon(mut self, eps: T) -> Self {
        self.clip_epsilon = Some(eps);
        self
    }

    /// Clip radius, defaulting to 0.2.
    pub fn clip_epsilon(&self) -> T {
        self.clip_epsilon.unwrap_or_else(|| cast(0.2))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > T::zero()) {
            return Err(Error::config(
                "objective.lambda",
                format!("must be positive, got {}", self.lambda),
            ));
        }
        if self.family.needs_schedule() && self.schedule.is_none() {
            return Err(Error::config(
                "objective.family",
                format!(
                    "family `{}` requires a `schedule` section",
                    self.family.label()
                ),
            ));
        }
        if self.family.needs_confidence() && self.confidence_params.is_none() {
            return Err(Error::config(
                "objective.family",
                format!(
                    "family `{}` requires a `confidence` section",
                    self.family.label()
                ),
            ));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        if let Some(c) = &self.confidence_params {
            c.validate()?;
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps > T::zero() && eps < T::one()) {
                return Err(Error::config(
                    "objective.clip_epsilon",
                    format!("must lie in (0, 1), got {eps}"),
                ));
            }
        }
        Ok(())
    }

    /// Base (positive, negative) weights at step `t`. Hardness weights are
    /// applied per rollout on top of the negative base.
    pub fn base_weights(&self, t: u64, batch_p_correct: Option<T>) -> Result<(T, T)> {
        match self.family {
            ObjectiveFamily::Rlvr => Ok((T::one(), T::one())),
            ObjectiveFamily::PsrOnly => Ok((T::one(), T::zero())),
            ObjectiveFamily::NsrOnly => Ok((T::zero(), T::one())),
            ObjectiveFamily::WReinforce | ObjectiveFamily::CwNsr => Ok((self.lambda, T::one())),
            ObjectiveFamily::ANsr | ObjectiveFamily::ACwNsr => {
                let schedule = self.schedule.as_ref().ok_or_else(|| {
                    Error::config("schedule", "scheduled family without a schedule")
                })?;
                let pair = weights(t, schedule, batch_p_correct)?;
                Ok((pair.lambda_t, pair.beta_t))
            }
        }
    }

    /// Effective weight of one rollout: positive base for correct samples,
    /// negative base times the (detached) hardness weight for incorrect
    /// ones when the family is confidence-weighted.
    pub fn rollout_weight(&self, rollout: &Rollout<T>, base: (T, T)) -> T {
        match rollout.reward {
            Reward::Correct => base.0,
            Reward::Incorrect => {
                if self.family.needs_confidence() {
                    base.1 * rollout.hardness
                } else {
                    base.1
                }
            }
        }
    }
}

/// A sampled sequence with everything the objectives need: per-token
/// probabilities under the behavior policy, the verifier reward, and the
/// detached confidence/hardness scalars computed at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    pub prompt: usize,
    pub tokens: Vec<Token>,
    pub behavior_probs: Vec<T>,
    pub reward: Reward,
    pub confidence: T,
    /// In [epsilon_floor, 1] for incorrect rollouts; 1 by convention for
    /// correct ones (the weight only ever applies to negatives).
    pub hardness: T,
}

impl<T: Scalar> Rollout<T> {
    /// Builds a rollout, computing confidence from the behavior-policy
    /// probabilities and freezing the hardness weight as a plain scalar.
    pub fn new(
        prompt: usize,
        tokens: Vec<Token>,
        behavior_probs: Vec<T>,
        reward: Reward,
        params: Option<&ConfidenceParams<T>>,
    ) -> Result<Self> {
        if tokens.len() != behavior_probs.len() || tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "rollout needs one behavior probability per token".into(),
            ));
        }
        let conf = confidence(&behavior_probs)?;
        let hard = match (reward, params) {
            (Reward::Incorrect, Some(p)) => hardness(conf, p),
            _ => T::one(),
        };
        Ok(Rollout {
            prompt,
            tokens,
            behavior_probs,
            reward,
            confidence: conf,
            hardness: hard,
        })
    }
}

/// Exact PSR loss by enumeration: `-E_x[correct_mass]`.
pub fn exact_psr_loss<T: Scalar>(policy: &PolicyTable<T>, env: &EnvSpec) -> Result<T> {
    Ok(-env.mean_correct_mass(policy)?)
}

/// Exact NSR loss by enumeration: `+E_x[incorrect_mass]` (the double
/// negative in the NSR definition turns it into a penalty on incorrect
/// mass).
pub fn exact_nsr_loss<T: Scalar>(policy: &PolicyTable<T>, env: &EnvSpec) -> Result<T> {
    let mut total = T::zero();
    for prompt in 0..env.num_prompts() {
        total += env.incorrect_mass(policy, prompt)?;
    }
    Ok(total / cast(env.num_prompts() as f64))
}

/// Exact RLVR loss: `E_x[incorrect_mass - correct_mass]`, evaluated in a
/// single enumeration pass (the decomposition identity against
/// PSR + NSR is a test, not an implementation shortcut).
pub fn exact_rlvr_loss<T: Scalar>(policy: &PolicyTable<T>, env: &EnvSpec) -> Result<T> {
    let mut total = T::zero();
    for prompt in 0..env.num_prompts() {
        let c = env.correct_mass(policy, prompt)?;
        total += (T::one() - c) - c;
    }
    Ok(total / cast(env.num_prompts() as f64))
}

/// Per-sequence hardness weights under the current policy, indexed by
/// `[prompt][sequence_index]`. Correct sequences get weight 1 (unused).
/// Sequence confidence uses the identity `Conf(y) = pi(y)^(1/T)`.
pub fn exact_hardness_table<T: Scalar>(
    policy: &PolicyTable<T>,
    env: &EnvSpec,
    params: &ConfidenceParams<T>,
) -> Result<Vec<Vec<T>>> {
    env.check_policy(policy)?;
    let inv_t = T::one() / cast::<T>(env.seq_len() as f64);
    let mut table = Vec::with_capacity(env.num_prompts());
    for prompt in 0..env.num_prompts() {
        let mut row = vec![T::one(); env.num_sequences()];
        let mut verify_err = None;
        policy.for_each_sequence_prob(prompt, |seq, p| {
            if verify_err.is_some() {
                return;
            }
            match env.verify(prompt, seq) {
                Ok(Reward::Incorrect) => {
                    let conf = p.powf(inv_t);
                    row[sequence_index(env.vocab(), seq)] = hardness(conf, params);
                }
                Ok(Reward::Correct) => {}
                Err(e) => verify_err = Some(e),
            }
        })?;
        if let Some(e) = verify_err {
            return Err(e);
        }
        table.push(row);
    }
    Ok(table)
}

/// Exact weighted loss for any family, with hardness weights recomputed
/// live from the current policy (for confidence-weighted families).
pub fn weighted_loss<T: Scalar>(
    policy: &PolicyTable<T>,
    env: &EnvSpec,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
) -> Result<T> {
    let frozen = if spec.family.needs_confidence() {
        let params = spec.confidence_params.as_ref().ok_or_else(|| {
            Error::config(
                "confidence",
                "confidence-weighted family without parameters",
            )
        })?;
        Some(exact_hardness_table(policy, env, params)?)
    } else {
        None
    };
    weighted_loss_impl(policy, env, spec, t, batch_p_correct, frozen.as_deref())
}

/// Exact weighted loss with externally frozen hardness weights. This is
/// the detached-weight form: finite differences of this functional (with
/// the table held fixed) match the analytic gradient.
pub fn weighted_loss_frozen<T: Scalar>(
    policy: &PolicyTable<T>,
    env: &EnvSpec,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
    hardness_table: &[Vec<T>],
) -> Result<T> {
    weighted_loss_impl(policy, env, spec, t, batch_p_correct, Some(hardness_table))
}

fn weighted_loss_impl<T: Scalar>(
    policy: &PolicyTable<T>,
    env: &EnvSpec,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
    hardness_table: Option<&[Vec<T>]>,
) -> Result<T> {
    env.check_policy(policy)?;
    spec.validate()?;
    let (w_pos, w_neg) = spec.base_weights(t, batch_p_correct)?;
    let cw = spec.family.needs_confidence();
    let mut total = T::zero();
    for prompt in 0..env.num_prompts() {
        let mut acc = T::zero();
        let mut verify_err = None;
        policy.for_each_sequence_prob(prompt, |seq, p| {
            if verify_err.is_some() {
                return;
            }
            match env.verify(prompt, seq) {
                Ok(Reward::Correct) => acc -= w_pos * p,
                Ok(Reward::Incorrect) => {
                    let w = if cw {
                        let table = hardness_table.expect("cw family resolved a hardness table");
                        w_neg * table[prompt][sequence_index(env.vocab(), seq)]
                    } else {
                        w_neg
                    };
                    acc += w * p;
                }
                Err(e) => verify_err = Some(e),
            }
        })?;
        if let Some(e) = verify_err {
            return Err(e);
        }
        total += acc;
    }
    Ok(total / cast(env.num_prompts() as f64))
}

/// Monte Carlo loss: mean over rollouts of
/// `-w_eff * R * (1/T) sum_t pi_theta(y_t | prefix)`, with the per-token
/// probabilities recomputed under `policy` (so the functional can be
/// differentiated); hardness weights stay the detached scalars recorded
/// at sampling time.
pub fn mc_loss<T: Scalar>(
    batch: &[Rollout<T>],
    policy: &PolicyTable<T>,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty rollout batch".into()));
    }
    let base = spec.base_weights(t, batch_p_correct)?;
    let mut total = T::zero();
    for rollout in batch {
        let w = spec.rollout_weight(rollout, base);
        let (_, per_token) = policy.sequence_prob(rollout.prompt, &rollout.tokens)?;
        let mean_prob: T = per_token.iter().copied().sum::<T>() / cast::<T>(per_token.len() as f64);
        total += -w * rollout.reward.sign::<T>() * mean_prob;
    }
    Ok(total / cast(batch.len() as f64))
}

/// Clipped Monte Carlo loss over importance ratios
/// `r_t = pi_theta(y_t) / pi_behavior(y_t)`:
/// per token `-w_eff * min(R r_t, R clip(r_t, 1-eps, 1+eps))`, averaged
/// over tokens then rollouts. With `policy` equal to the behavior policy
/// every ratio is exactly 1 and the clip is inactive.
pub fn clipped_mc_loss<T: Scalar>(
    batch: &[Rollout<T>],
    policy: &PolicyTable<T>,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty rollout batch".into()));
    }
    let eps = spec.clip_epsilon();
    let (lo, hi) = (T::one() - eps, T::one() + eps);
    let base = spec.base_weights(t, batch_p_correct)?;
    let mut total = T::zero();
    for (idx, rollout) in batch.iter().enumerate() {
        let w = spec.rollout_weight(rollout, base);
        let sign = rollout.reward.sign::<T>();
        let (_, per_token) = policy.sequence_prob(rollout.prompt, &rollout.tokens)?;
        let mut acc = T::zero();
        for (t_idx, (&cur, &old)) in per_token.iter().zip(&rollout.behavior_probs).enumerate() {
            let ratio = cur / old;
            if !ratio.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite importance ratio at rollout {idx}, token {t_idx}"
                )));
            }
            let clipped = ratio.max(lo).min(hi);
            acc += (sign * ratio).min(sign * clipped);
        }
        total += -w * acc / cast::<T>(per_token.len() as f64);
    }
    Ok(total / cast(batch.len() as f64))
}

/// Gradient of the entropy bonus with respect to the logits:
/// `dH/dz_v = -pi_v (log pi_v - lbar)` with `lbar = sum pi log pi`.
/// Components sum to zero; the gradient vanishes exactly at the uniform
/// distribution. Used to contrast unconditional flattening with NSR's
/// correctness-conditioned updates.
pub fn entropy_bonus_grad<T: Scalar>(dist: &Distribution<T>) -> Vec<T> {
    let lbar: T = dist
        .probs()
        .iter()
        .map(|&p| if p > T::zero() { p * p.ln() } else { T::zero() })
        .sum();
    dist.probs()
        .iter()
        .map(|&p| {
            if p > T::zero() {
                -p * (p.ln() - lbar)
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Unlikelihood descent direction: `-pi_v` on the sampled token and
/// `pi_yt / (1 - pi_yt) * pi_v` on the rest. The 1/(1 - pi) factor
/// diverges as the sampled probability approaches 1, which is exactly the
/// failure mode the NSR damping factor avoids; this exists for the
/// comparative property tests only.
pub fn unlikelihood_grad<T: Scalar>(dist: &Distribution<T>, sampled: Token) -> Result<Vec<T>> {
    let p_s = dist.prob(sampled);
    if (T::one() - p_s).abs() < cast(1e-12) {
        return Err(Error::Numerical(
            "unlikelihood gradient singular: sampled probability is 1".into(),
        ));
    }
    let boost = p_s / (T::one() - p_s);
    Ok(dist
        .probs()
        .iter()
        .enumerate()
        .map(|(v, &p)| if v == sampled as usize { -p } else { boost * p })
        .collect())
}
