//! Pass@k estimation, policy evaluation, and diversity metrics.
//!
//! The estimator is the standard unbiased one,
//! `Pass@k = 1 - C(n-c, k) / C(n, k)`, computed with an overflow-safe
//! ratio product. An independent subset-enumeration oracle covers every
//! (n <= 12, c, k) triple exactly.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::policy::{layer_offset, step_entropy, PolicyTable, Sequence};
use crate::rng::{substream, StreamDomain};
use crate::scalar::{cast, Scalar};

/// Unbiased Pass@k for one prompt: probability that at least one of k
/// draws (without replacement from n samples, c of them correct) is
/// correct.
///
/// Uses `1 - prod_{i=0}^{k-1} (n - c - i) / (n - i)`; no raw factorials,
/// and an exact early exit to 1 when k > n - c.
pub fn pass_at_k<T: Scalar>(n: u64, c: u64, k: u64) -> Result<T> {
    check_pass_at_k_args(n, c, k)?;
    if k > n - c {
        return Ok(T::one());
    }
    let mut miss_prob = T::one();
    for i in 0..k {
        miss_prob = miss_prob * cast::<T>((n - c - i) as f64) / cast::<T>((n - i) as f64);
    }
    Ok(T::one() - miss_prob)
}

/// Independent oracle: enumerates all C(n, k) subsets of a pool whose
/// first c items are correct and returns the exact fraction containing at
/// least one correct item. Enumeration-bounded to n <= 12.
pub fn pass_at_k_oracle(n: u64, c: u64, k: u64) -> Result<f64> {
    check_pass_at_k_args(n, c, k)?;
    if n > 12 {
        return Err(Error::OutOfRange(format!(
            "oracle enumerates subsets only up to n = 12, got {n}"
        )));
    }
    let correct_mask: u32 = (1u32 << c) - 1;
    let mut total = 0u64;
    let mut hits = 0u64;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as u64 != k {
            continue;
        }
        total += 1;
        if mask & correct_mask != 0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

fn check_pass_at_k_args(n: u64, c: u64, k: u64) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k must satisfy 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    if c > n {
        return Err(Error::InvalidArgument(format!(
            "correct count {c} exceeds sample count {n}"
        )));
    }
    Ok(())
}

/// Exact expected per-token entropy of one prompt's policy: the
/// visitation-probability-weighted mean of step entropies over the whole
/// tree, divided by T. Equals log V for the uniform policy.
pub fn expected_step_entropy<T: Scalar>(policy: &PolicyTable<T>, prompt: usize) -> Result<T> {
    let vocab = policy.vocab();
    let dists = policy.node_distributions(prompt)?;
    let mut visit = vec![T::one()];
    let mut total = T::zero();
    for layer in 0..policy.seq_len() {
        let offset = layer_offset(vocab, layer);
        let mut next = vec![T::zero(); visit.len() * vocab];
        for (pos, &v) in visit.iter().enumerate() {
            let dist = &dists[offset + pos];
            total += v * step_entropy(dist);
            for (tok, &p) in dist.probs().iter().enumerate() {
                next[pos * vocab + tok] = v * p;
            }
        }
        visit = next;
    }
    Ok(total / cast(policy.seq_len() as f64))
}

/// Mean of `expected_step_entropy` across prompts.
pub fn mean_expected_step_entropy<T: Scalar>(policy: &PolicyTable<T>) -> Result<T> {
    let mut total = T::zero();
    for prompt in 0..policy.num_prompts() {
        total += expected_step_entropy(policy, prompt)?;
    }
    Ok(total / cast(policy.num_prompts() as f64))
}

/// Per-prompt sampling outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptEval {
    pub prompt: usize,
    /// Samples drawn (n).
    pub samples: u64,
    /// Correct samples (c).
    pub correct: u64,
    /// Distinct correct sequences generated, a diversity proxy.
    pub distinct_correct: usize,
    /// Exact correct mass under the policy, when enumeration is enabled.
    pub exact_correct_mass: Option<f64>,
}

/// Evaluation result: the Pass@k table over the k-grid plus entropy and
/// diversity metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_per_prompt: u64,
    pub temperature: f64,
    pub k_grid: Vec<u64>,
    /// Mean Pass@k across prompts, aligned with `k_grid`.
    pub pass_at_k: Vec<f64>,
    pub per_prompt: Vec<PromptEval>,
    /// Mean over sampled rollouts of the mean step entropy along the
    /// visited nodes (at temperature 1).
    pub mean_step_entropy: f64,
    /// Exact visitation-weighted policy entropy, when enumeration is
    /// enabled.
    pub exact_expected_entropy: Option<f64>,
    /// Exact mean correct mass across prompts, when enumeration is
    /// enabled.
    pub exact_correct_mass: Option<f64>,
    pub distinct_correct_total: usize,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table for humans.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "samples/prompt: {}   temperature: {}\n",
            self.samples_per_prompt, self.temperature
        ));
        out.push_str(&format!("{:>8} | {:>10}\n", "k", "pass@k"));
        out.push_str("---------+-----------\n");
        for (k, v) in self.k_grid.iter().zip(&self.pass_at_k) {
            out.push_str(&format!("{k:>8} | {v:>10.6}\n"));
        }
        out.push_str(&format!(
            "mean step entropy: {:.6}\n",
            self.mean_step_entropy
        ));
        if let Some(e) = self.exact_expected_entropy {
            out.push_str(&format!("exact policy entropy: {e:.6}\n"));
        }
        if let Some(m) = self.exact_correct_mass {
            out.push_str(&format!("exact correct mass: {m:.6}\n"));
        }
        out.push_str(&format!(
            "distinct correct sequences: {}\n",
            self.distinct_correct_total
        ));
        out
    }
}

/// Draws `samples_per_prompt` rollouts per prompt (parallel across
/// prompts, each on its own RNG substream), verifies them, and assembles
/// the Pass@k table averaged across prompts.
pub fn evaluate_policy(
    policy: &PolicyTable<f64>,
    env: &EnvSpec,
    samples_per_prompt: u64,
    k_grid: &[u64],
    temperature: f64,
    seed: u64,
    exact_metrics: bool,
) -> Result<EvalReport> {
    env.check_policy(policy)?;
    if k_grid.is_empty() {
        return Err(Error::InvalidArgument("empty k grid".into()));
    }
    let max_k = *k_grid.iter().max().expect("nonempty grid");
    if samples_per_prompt < max_k {
        return Err(Error::InvalidArgument(format!(
            "samples per prompt ({samples_per_prompt}) must cover the largest k ({max_k})"
        )));
    }

    struct PromptOutcome {
        eval: PromptEval,
        entropy_sum: f64,
        entropy_count: usize,
    }

    let outcomes: Vec<Result<PromptOutcome>> = (0..env.num_prompts())
        .into_par_iter()
        .map(|prompt| {
            let mut rng = substream(seed, StreamDomain::Eval, 0, prompt as u64);
            let mut correct = 0u64;
            let mut distinct: HashSet<Sequence> = HashSet::new();
            let mut entropy_sum = 0.0;
            let mut entropy_count = 0usize;
            for _ in 0..samples_per_prompt {
                let (tokens, _) =
                    policy.sample_sequence_with_temperature(prompt, temperature, &mut rng)?;
                for &node in &policy.path_nodes(prompt, &tokens)? {
                    entropy_sum += step_entropy(&policy.distribution(prompt, node)?);
                    entropy_count += 1;
                }
                if env.verify(prompt, &tokens)?.is_correct() {
                    correct += 1;
                    distinct.insert(tokens);
                }
            }
            let exact_correct_mass = if exact_metrics {
                Some(env.correct_mass(policy, prompt)?)
            } else {
                None
            };
            Ok(PromptOutcome {
                eval: PromptEval {
                    prompt,
                    samples: samples_per_prompt,
                    correct,
                    distinct_correct: distinct.len(),
                    exact_correct_mass,
                },
                entropy_sum,
                entropy_count,
            })
        })
        .collect();

    let mut per_prompt = Vec::with_capacity(env.num_prompts());
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    for outcome in outcomes {
        let o = outcome?;
        entropy_sum += o.entropy_sum;
        entropy_count += o.entropy_count;
        per_prompt.push(o.eval);
    }

    let mut pass = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let mut sum = 0.0;
        for p in &per_prompt {
            sum += pass_at_k::<f64>(p.samples, p.correct, k)?;
        }
        pass.push(sum / per_prompt.len() as f64);
    }

    let exact_correct_mass = if exact_metrics {
        let sum: f64 = per_prompt.iter().filter_map(|p| p.exact_correct_mass).sum();
        Some(sum / per_prompt.len() as f64)
    } else {
        None
    };
    let exact_expected_entropy = if exact_metrics {
        Some(mean_expected_step_entropy(policy)?)
    } else {
        None
    };

    Ok(EvalReport {
        samples_per_prompt,
        temperature,
        k_grid: k_grid.to_vec(),
        pass_at_k: pass,
        distinct_correct_total: per_prompt.iter().map(|p| p.distinct_correct).sum(),
        per_prompt,
        mean_step_entropy: entropy_sum / entropy_count as f64,
        exact_expected_entropy,
        exact_correct_mass,
    })
}

/// The Pass@k column grid used by the evaluation protocol.
pub fn default_k_grid() -> Vec<u64> {
    vec![1, 2, 4, 8, 16, 32, 64, 128, 256]
}
