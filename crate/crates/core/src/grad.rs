//! Analytic token-level gradients, a finite-difference oracle, and update
//! application.
//!
//! Gradients are implemented from the closed forms, not autodiff. For the
//! per-token probability loss the two patterns are, at a visited node with
//! sampled token y and distribution pi:
//!
//!   d pi_y / d z_v = pi_y (1 - pi_y)   if v == y
//!                  = -pi_y pi_v        otherwise
//!
//! `psr_token_grad` and `nsr_token_grad` return the descent directions in
//! that convention (what a step should add to the logits, up to the
//! learning rate); `batch_gradient` assembles the loss gradient proper, so
//! `apply_update`'s `z <- z - lr * g` performs descent.
//!
//! `batch_gradient` is the gradient of the batch-summed objective
//! (`batch.len() x mc_loss`): each rollout contributes its full per-token
//! mean gradient, the classic incremental policy-gradient accumulation.

use crate::env::{EnvSpec, Reward};
use crate::error::{Error, Result};
use crate::objective::{exact_hardness_table, ObjectiveSpec, Rollout};
use crate::policy::{layer_offset, step_entropy, Distribution, PolicyTable, Token};
use crate::scalar::{cast, Scalar};

/// Per-(prompt, prefix) gradient vectors, same index structure as
/// `PolicyTable`; untouched nodes stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable<T> {
    vocab: usize,
    seq_len: usize,
    num_prompts: usize,
    nodes_per_prompt: usize,
    grads: Vec<T>,
}

impl<T: Scalar> GradTable<T> {
    pub fn zeros_like(policy: &PolicyTable<T>) -> Self {
        GradTable {
            vocab: policy.vocab(),
            seq_len: policy.seq_len(),
            num_prompts: policy.num_prompts(),
            nodes_per_prompt: policy.nodes_per_prompt(),
            grads: vec![
                T::zero();
                policy.num_prompts() * policy.nodes_per_prompt() * policy.vocab()
            ],
        }
    }

    #[inline]
    fn base(&self, prompt: usize, node: usize) -> usize {
        (prompt * self.nodes_per_prompt + node) * self.vocab
    }

    pub fn node_grads(&self, prompt: usize, node: usize) -> &[T] {
        let b = self.base(prompt, node);
        &self.grads[b..b + self.vocab]
    }

    pub fn node_grads_mut(&mut self, prompt: usize, node: usize) -> &mut [T] {
        let b = self.base(prompt, node);
        &mut self.grads[b..b + self.vocab]
    }

    pub fn entry(&self, prompt: usize, node: usize, token: usize) -> T {
        self.grads[self.base(prompt, node) + token]
    }

    pub fn raw(&self) -> &[T] {
        &self.grads
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn nodes_per_prompt(&self) -> usize {
        self.nodes_per_prompt
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            *g *= factor;
        }
    }

    pub fn l2_norm(&self) -> T {
        self.grads.iter().map(|&g| g * g).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.grads
            .iter()
            .fold(T::zero(), |acc, &g| acc.max(g.abs()))
    }

    pub fn max_abs_diff(&self, other: &GradTable<T>) -> T {
        debug_assert_eq!(self.grads.len(), other.grads.len());
        self.grads
            .iter()
            .zip(&other.grads)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }

    fn matches_policy(&self, policy: &PolicyTable<T>) -> bool {
        self.vocab == policy.vocab()
            && self.seq_len == policy.seq_len()
            && self.num_prompts == policy.num_prompts()
    }
}

/// PSR descent direction at one step (reward +1): `pi_y (1 - pi_y)` on the
/// sampled token, `-pi_y pi_v` on the rest. Components sum to zero.
pub fn psr_token_grad<T: Scalar>(dist: &Distribution<T>, sampled: Token) -> Vec<T> {
    let p_y = dist.prob(sampled);
    dist.probs()
        .iter()
        .enumerate()
        .map(|(v, &p)| {
            if v == sampled as usize {
                p_y * (T::one() - p_y)
            } else {
                -p_y * p
            }
        })
        .collect()
}

/// NSR descent direction at one step (reward -1): the exact negation of
/// the PSR direction, so the sampled token is suppressed with the
/// `(1 - pi_y)` damping factor and unsampled tokens are boosted
/// proportionally to their current probability.
pub fn nsr_token_grad<T: Scalar>(dist: &Distribution<T>, sampled: Token) -> Vec<T> {
    psr_token_grad(dist, sampled)
        .into_iter()
        .map(|g| -g)
        .collect()
}

/// Confidence-weighted NSR direction: exactly `w` times the standard NSR
/// direction, componentwise.
pub fn cwnsr_token_grad<T: Scalar>(dist: &Distribution<T>, sampled: Token, w: T) -> Vec<T> {
    nsr_token_grad(dist, sampled)
        .into_iter()
        .map(|g| w * g)
        .collect()
}

/// Gradient of the batch-summed per-token-mean loss
/// `sum_i -w_i R_i (1/T) sum_t pi_theta(y_t)` at the current policy.
/// Accumulation order is fixed: batch order, then token order.
pub fn batch_gradient<T: Scalar>(
    batch: &[Rollout<T>],
    policy: &PolicyTable<T>,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
) -> Result<GradTable<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty rollout batch".into()));
    }
    let base = spec.base_weights(t, batch_p_correct)?;
    let inv_t = T::one() / cast::<T>(policy.seq_len() as f64);
    let mut grad = GradTable::zeros_like(policy);
    for rollout in batch {
        let w = spec.rollout_weight(rollout, base);
        let coef = -w * rollout.reward.sign::<T>() * inv_t;
        let nodes = policy.path_nodes(rollout.prompt, &rollout.tokens)?;
        for (&node, &tok) in nodes.iter().zip(&rollout.tokens) {
            let dist = policy.distribution(rollout.prompt, node)?;
            accumulate_prob_pattern(&mut grad, rollout.prompt, node, &dist, tok, coef);
        }
    }
    Ok(grad)
}

/// Gradient of the batch-summed clipped objective at the current policy.
/// Tokens whose importance ratio falls on the flat side of the clip
/// contribute nothing (positive samples with r > 1+eps, negative samples
/// with r < 1-eps); on-policy every ratio is 1 and nothing is clipped.
pub fn clipped_batch_gradient<T: Scalar>(
    batch: &[Rollout<T>],
    policy: &PolicyTable<T>,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
) -> Result<GradTable<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty rollout batch".into()));
    }
    let eps = spec.clip_epsilon();
    let base = spec.base_weights(t, batch_p_correct)?;
    let inv_t = T::one() / cast::<T>(policy.seq_len() as f64);
    let mut grad = GradTable::zeros_like(policy);
    for (idx, rollout) in batch.iter().enumerate() {
        let w = spec.rollout_weight(rollout, base);
        let sign = rollout.reward.sign::<T>();
        let nodes = policy.path_nodes(rollout.prompt, &rollout.tokens)?;
        for ((t_idx, &node), (&tok, &p_old)) in nodes
            .iter()
            .enumerate()
            .zip(rollout.tokens.iter().zip(&rollout.behavior_probs))
        {
            let dist = policy.distribution(rollout.prompt, node)?;
            let ratio = dist.prob(tok) / p_old;
            if !ratio.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite importance ratio at rollout {idx}, token {t_idx}"
                )));
            }
            let active = if rollout.reward.is_correct() {
                ratio <= T::one() + eps
            } else {
                ratio >= T::one() - eps
            };
            if !active {
                continue;
            }
            // d ratio / d z_v = ratio * (delta - pi_v); fold the ratio and
            // 1/p_old into the coefficient via coef * pi_y / p_old
            let coef = -w * sign * inv_t / p_old;
            accumulate_prob_pattern(&mut grad, rollout.prompt, node, &dist, tok, coef);
        }
    }
    Ok(grad)
}

/// Adds `coef * d pi_y / d z_v` into the gradient table at one node.
fn accumulate_prob_pattern<T: Scalar>(
    grad: &mut GradTable<T>,
    prompt: usize,
    node: usize,
    dist: &Distribution<T>,
    sampled: Token,
    coef: T,
) {
    let p_y = dist.prob(sampled);
    let row = grad.node_grads_mut(prompt, node);
    for (v, (&p, g)) in dist.probs().iter().zip(row.iter_mut()).enumerate() {
        if v == sampled as usize {
            *g += coef * p_y * (T::one() - p);
        } else {
            *g -= coef * p_y * p;
        }
    }
}

/// Gradient of the exact enumeration loss `weighted_loss` (prompt-averaged),
/// with hardness weights detached: for confidence-weighted families the
/// weights are computed once from the current policy and held fixed, per
/// the stop-gradient rule.
pub fn exact_gradient<T: Scalar>(
    policy: &PolicyTable<T>,
    env: &EnvSpec,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
) -> Result<GradTable<T>> {
    env.check_policy(policy)?;
    let (w_pos, w_neg) = spec.base_weights(t, batch_p_correct)?;
    let cw = spec.family.needs_confidence();
    let hardness = if cw {
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
    let inv_p = T::one() / cast::<T>(env.num_prompts() as f64);
    let mut grad = GradTable::zeros_like(policy);
    for prompt in 0..env.num_prompts() {
        let dists = policy.node_distributions(prompt)?;
        let mut verify_err = None;
        policy.for_each_sequence_prob(prompt, |seq, p| {
            if verify_err.is_some() {
                return;
            }
            let coef = match env.verify(prompt, seq) {
                Ok(Reward::Correct) => -w_pos,
                Ok(Reward::Incorrect) => {
                    let h = match &hardness {
                        Some(table) => {
                            table[prompt][crate::policy::sequence_index(env.vocab(), seq)]
                        }
                        None => T::one(),
                    };
                    w_neg * h
                }
                Err(e) => {
                    verify_err = Some(e);
                    return;
                }
            };
            if coef == T::zero() {
                return;
            }
            // d pi(y) / d z_{node, v} = pi(y) (delta_{v, y_t} - pi_v)
            let scale = coef * p * inv_p;
            let mut pos = 0usize;
            for (layer, &tok) in seq.iter().enumerate() {
                let node = layer_offset(env.vocab(), layer) + pos;
                let dist = &dists[node];
                let row = grad.node_grads_mut(prompt, node);
                for (v, (&pv, g)) in dist.probs().iter().zip(row.iter_mut()).enumerate() {
                    if v == tok as usize {
                        *g += scale * (T::one() - pv);
                    } else {
                        *g -= scale * pv;
                    }
                }
                pos = pos * env.vocab() + tok as usize;
            }
        })?;
        if let Some(e) = verify_err {
            return Err(e);
        }
    }
    Ok(grad)
}

/// Plain gradient descent step: `z <- z - lr * g`, returning the updated
/// table. Deterministic; a zero gradient returns a bit-identical policy.
pub fn apply_update<T: Scalar>(
    policy: &PolicyTable<T>,
    grad: &GradTable<T>,
    lr: T,
) -> Result<PolicyTable<T>> {
    if !grad.matches_policy(policy) {
        return Err(Error::InconsistentPolicy(
            "gradient table shape does not match policy table".into(),
        ));
    }
    if !(lr >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be nonnegative, got {lr}"
        )));
    }
    let mut updated = policy.clone();
    for (z, &g) in updated.raw_mut().iter_mut().zip(grad.raw()) {
        if g != T::zero() {
            *z -= lr * g;
        }
    }
    Ok(updated)
}

/// A probed logit coordinate for the finite-difference oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub prompt: usize,
    pub node: usize,
    pub token: usize,
}

/// Central-difference check: perturbs each probed logit by +-`step`,
/// evaluates `loss`, and compares `(L+ - L-) / (2 step)` against the
/// analytic table entry. Returns the max relative error with an absolute
/// floor of 1e-10 in the denominator.
pub fn finite_difference_check<T, F>(
    mut loss: F,
    policy: &PolicyTable<T>,
    analytic: &GradTable<T>,
    probes: &[Probe],
    step: T,
) -> Result<T>
where
    T: Scalar,
    F: FnMut(&PolicyTable<T>) -> Result<T>,
{
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probe coordinates given".into()));
    }
    if !(step > T::zero()) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let floor: T = cast(1e-10);
    let mut max_rel = T::zero();
    let mut workspace = policy.clone();
    for probe in probes {
        let original = workspace.node_logits(probe.prompt, probe.node)[probe.token];

        workspace.node_logits_mut(probe.prompt, probe.node)[probe.token] = original + step;
        let plus = loss(&workspace)?;
        workspace.node_logits_mut(probe.prompt, probe.node)[probe.token] = original - step;
        let minus = loss(&workspace)?;
        workspace.node_logits_mut(probe.prompt, probe.node)[probe.token] = original;

        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at perturbed probe {probe:?}"
            )));
        }
        let fd = (plus - minus) / (step + step);
        let an = analytic.entry(probe.prompt, probe.node, probe.token);
        let denom = fd.abs().max(an.abs()).max(floor);
        let rel = (fd - an).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Default finite-difference step: balances truncation against round-off
/// for f64 logits of magnitude up to ~20.
pub fn default_fd_step<T: Scalar>() -> T {
    cast(1e-5)
}

/// Applies one beta-scaled NSR step (learning rate `lr`) for a single
/// incorrect rollout and reports the entropy change at each visited node,
/// in step order. First-order, the change at every node scales linearly
/// in beta.
pub fn entropy_rate_probe<T: Scalar>(
    policy: &PolicyTable<T>,
    rollout: &Rollout<T>,
    beta: T,
    lr: T,
) -> Result<Vec<T>> {
    if rollout.reward.is_correct() {
        return Err(Error::InvalidArgument(
            "entropy_rate_probe requires an incorrect rollout".into(),
        ));
    }
    let inv_t = T::one() / cast::<T>(policy.seq_len() as f64);
    let nodes = policy.path_nodes(rollout.prompt, &rollout.tokens)?;
    let mut deltas = Vec::with_capacity(nodes.len());
    for (&node, &tok) in nodes.iter().zip(&rollout.tokens) {
        let dist = policy.distribution(rollout.prompt, node)?;
        let before = step_entropy(&dist);
        // NSR penalty gradient at this node: beta/T * pi_y (delta - pi)
        let p_y = dist.prob(tok);
        let coef = beta * inv_t * p_y;
        let logits = policy.node_logits(rollout.prompt, node);
        let updated: Vec<T> = logits
            .iter()
            .zip(dist.probs())
            .enumerate()
            .map(|(v, (&z, &p))| {
                let g = if v == tok as usize {
                    coef * (T::one() - p)
                } else {
                    -coef * p
                };
                z - lr * g
            })
            .collect();
        let after = step_entropy(&crate::policy::softmax(&updated)?);
        deltas.push(after - before);
    }
    Ok(deltas)
}
