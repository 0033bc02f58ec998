//! The training loop: rollout collection, reward assignment, schedule and
//! confidence weighting, gradient updates, and metric logging.
//!
//! Rollout collection runs in parallel across prompts (each prompt on its
//! own RNG substream keyed by step and prompt id), so results are
//! independent of scheduling order; gradient accumulation and the update
//! itself are strictly sequential. Two runs with the same config and seed
//! produce byte-identical metrics.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::grad::{apply_update, batch_gradient, clipped_batch_gradient, GradTable};
use crate::objective::{clipped_mc_loss, mc_loss, ObjectiveSpec, Rollout};
use crate::policy::{step_entropy, PolicyTable, Vocabulary};
use crate::rng::{substream, StreamDomain};
use crate::scalar::{cast, Scalar};

/// Everything one training run needs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub objective: ObjectiveSpec<f64>,
    pub total_steps: u64,
    pub prompts_per_batch: usize,
    pub rollouts_per_prompt: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train on the clipped objective (ratio form). With one inner epoch
    /// the behavior policy equals the current one and the clip is
    /// inactive, but gradients are still the ratio-form ones.
    pub use_clipping: bool,
    /// Passes over the collected rollout set per step. Values above 1
    /// make the clipped objective bite.
    pub inner_epochs: usize,
    /// Mini-batch size for inner passes; `None` uses the full batch.
    pub minibatch_size: Option<usize>,
    pub eval_every: u64,
    /// Compute exact enumeration metrics (correct mass) per step.
    pub exact_metrics: bool,
    /// Optional exponential smoothing factor for the correct ratio fed to
    /// the performance-driven schedule. Off by default: the schedule reads
    /// the current batch only.
    pub p_correct_smoothing: Option<f64>,
    /// When set, metrics.csv and policy snapshots are written here.
    pub output_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale defaults: V=6, T=3, 8 prompts, G=8, lr=0.05, 2000 steps.
    /// Tabular logits tolerate far larger steps than a neural policy, so
    /// the learning rate is orders of magnitude above LLM-scale practice.
    pub fn desk_default(objective: ObjectiveSpec<f64>, seed: u64) -> Self {
        TrainConfig {
            env: EnvSpec::mod_sum(6, 3, 8, None).expect("desk env is valid"),
            objective,
            total_steps: 2000,
            prompts_per_batch: 8,
            rollouts_per_prompt: 8,
            learning_rate: 0.05,
            seed,
            use_clipping: true,
            inner_epochs: 1,
            minibatch_size: None,
            eval_every: 50,
            exact_metrics: true,
            p_correct_smoothing: None,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.prompts_per_batch < 1 || self.rollouts_per_prompt < 1 {
            return Err(Error::config(
                "training",
                "prompts_per_batch and rollouts_per_prompt must be >= 1",
            ));
        }
        if self.prompts_per_batch > self.env.num_prompts() {
            return Err(Error::config(
                "training.prompts_per_batch",
                format!(
                    "{} exceeds the environment's {} prompts",
                    self.prompts_per_batch,
                    self.env.num_prompts()
                ),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(
                "training.learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if self.inner_epochs < 1 {
            return Err(Error::config("training.inner_epochs", "must be >= 1"));
        }
        if self.eval_every < 1 {
            return Err(Error::config("training.eval_every", "must be >= 1"));
        }
        if let Some(m) = self.minibatch_size {
            if m < 1 {
                return Err(Error::config("training.minibatch_size", "must be >= 1"));
            }
        }
        if let Some(s) = self.p_correct_smoothing {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::config(
                    "training.p_correct_smoothing",
                    format!("must lie in [0, 1), got {s}"),
                ));
            }
        }
        Ok(())
    }
}

/// One row of the metrics timeline. Optional fields are empty CSV cells
/// when unavailable (enumeration disabled, no incorrect rollouts, or a
/// batch too small for a variance).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lambda: f64,
    pub beta: f64,
    pub rho: f64,
    pub p_correct: f64,
    /// Mean step entropy over the batch's visited nodes (visit-weighted),
    /// under the policy the batch was sampled from.
    pub entropy: f64,
    pub correct_mass: Option<f64>,
    pub mean_conf_incorrect: Option<f64>,
    pub gradnorm_var: Option<f64>,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,loss,lambda,beta,rho,p_correct,entropy,correct_mass,mean_conf_incorrect,gradnorm_var";

    pub fn to_csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.lambda,
            self.beta,
            self.rho,
            self.p_correct,
            self.entropy,
            opt(self.correct_mass),
            opt(self.mean_conf_incorrect),
            opt(self.gradnorm_var)
        )
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub policy: PolicyTable<f64>,
    /// Steps at which snapshots were written (when an output dir was set).
    pub snapshot_steps: Vec<u64>,
}

/// Fraction of rollouts with reward +1.
pub fn batch_correct_ratio<T: Scalar>(batch: &[Rollout<T>]) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty rollout batch".into()));
    }
    let correct = batch.iter().filter(|r| r.reward.is_correct()).count();
    Ok(cast::<T>(correct as f64) / cast::<T>(batch.len() as f64))
}

/// Population variance (divide by N) of per-rollout gradient L2 norms
/// under the given objective (unclipped form); duplicating every rollout
/// leaves the value unchanged. Reported as a measurement only.
pub fn grad_norm_variance<T: Scalar>(
    batch: &[Rollout<T>],
    policy: &PolicyTable<T>,
    spec: &ObjectiveSpec<T>,
    t: u64,
    batch_p_correct: Option<T>,
) -> Result<T> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(
            "gradient-norm variance needs at least 2 rollouts".into(),
        ));
    }
    let mut norms = Vec::with_capacity(batch.len());
    for rollout in batch {
        let g = batch_gradient(
            std::slice::from_ref(rollout),
            policy,
            spec,
            t,
            batch_p_correct,
        )?;
        norms.push(g.l2_norm());
    }
    let n = cast::<T>(norms.len() as f64);
    let mean = norms.iter().copied().sum::<T>() / n;
    let var = norms.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    Ok(var)
}

/// Samples `rollouts_per_prompt` rollouts for each selected prompt under
/// the current policy, in parallel across prompts with per-(step, prompt)
/// substreams. Output order is (prompt order, rollout order) regardless of
/// scheduling.
fn collect_rollouts(
    policy: &PolicyTable<f64>,
    env: &EnvSpec,
    spec: &ObjectiveSpec<f64>,
    prompts: &[usize],
    rollouts_per_prompt: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<Rollout<f64>>> {
    let per_prompt: Vec<Result<Vec<Rollout<f64>>>> = prompts
        .par_iter()
        .map(|&prompt| {
            let mut rng = substream(seed, StreamDomain::Train, step, prompt as u64);
            let mut rollouts = Vec::with_capacity(rollouts_per_prompt);
            for _ in 0..rollouts_per_prompt {
                let (tokens, probs) = policy.sample_sequence(prompt, &mut rng)?;
                let reward = env.verify(prompt, &tokens)?;
                rollouts.push(Rollout::new(
                    prompt,
                    tokens,
                    probs,
                    reward,
                    spec.confidence_params.as_ref(),
                )?);
            }
            Ok(rollouts)
        })
        .collect();
    let mut batch = Vec::with_capacity(prompts.len() * rollouts_per_prompt);
    for group in per_prompt {
        batch.extend(group?);
    }
    Ok(batch)
}

/// Visit-weighted mean step entropy over the batch's visited nodes.
fn batch_entropy(policy: &PolicyTable<f64>, batch: &[Rollout<f64>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for rollout in batch {
        for &node in &policy.path_nodes(rollout.prompt, &rollout.tokens)? {
            sum += step_entropy(&policy.distribution(rollout.prompt, node)?);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Runs the full RLVR loop. Per step: sample rollouts under the current
/// (behavior) policy, verify, compute detached confidence and hardness
/// weights, evaluate the schedule, assemble the gradient (clipped variant
/// when configured), update, and append a metrics row describing the state
/// the batch was sampled from.
pub fn run_training(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let env = &config.env;
    let spec = &config.objective;

    let mut policy = PolicyTable::<f64>::uniform(
        env.num_prompts(),
        Vocabulary::new(env.vocab())?,
        env.seq_len(),
    )?;

    let mut writer = match &config.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let file = fs::File::create(dir.join("metrics.csv"))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "{}", MetricsRow::CSV_HEADER)?;
            Some(w)
        }
        None => None,
    };

    let mut metrics = Vec::with_capacity(config.total_steps as usize);
    let mut snapshot_steps = Vec::new();
    let mut smoothed_p: Option<f64> = None;

    for step in 0..config.total_steps {
        let prompts = select_prompts(env.num_prompts(), config.prompts_per_batch, step);
        let batch = collect_rollouts(
            &policy,
            env,
            spec,
            &prompts,
            config.rollouts_per_prompt,
            config.seed,
            step,
        )?;

        let p_raw = batch_correct_ratio(&batch)?;
        let p_used = match config.p_correct_smoothing {
            Some(alpha) => {
                let s = match smoothed_p {
                    Some(prev) => alpha * prev + (1.0 - alpha) * p_raw,
                    None => p_raw,
                };
                smoothed_p = Some(s);
                s
            }
            None => p_raw,
        };

        let (w_pos, w_neg) = spec.base_weights(step, Some(p_used))?;
        let loss = if config.use_clipping {
            clipped_mc_loss(&batch, &policy, spec, step, Some(p_used))?
        } else {
            mc_loss(&batch, &policy, spec, step, Some(p_used))?
        };
        let entropy = batch_entropy(&policy, &batch)?;
        let gradnorm_var = if batch.len() >= 2 {
            Some(grad_norm_variance(
                &batch,
                &policy,
                spec,
                step,
                Some(p_used),
            )?)
        } else {
            None
        };
        let correct_mass = if config.exact_metrics {
            Some(env.mean_correct_mass(&policy)?)
        } else {
            None
        };
        let incorrect: Vec<&Rollout<f64>> =
            batch.iter().filter(|r| !r.reward.is_correct()).collect();
        let mean_conf_incorrect = if incorrect.is_empty() {
            None
        } else {
            Some(incorrect.iter().map(|r| r.confidence).sum::<f64>() / incorrect.len() as f64)
        };

        let row = MetricsRow {
            step,
            loss,
            lambda: w_pos,
            beta: w_neg,
            rho: w_neg / w_pos,
            p_correct: p_raw,
            entropy,
            correct_mass,
            mean_conf_incorrect,
            gradnorm_var,
        };
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", row.to_csv_row())?;
        }
        metrics.push(row);

        // update: one pass by default; more passes (or mini-batches) keep
        // the behavior probs in the rollouts while the policy moves, which
        // is what makes the clip active
        let chunk = config.minibatch_size.unwrap_or(batch.len()).max(1);
        for _ in 0..config.inner_epochs {
            for minibatch in batch.chunks(chunk) {
                let grad: GradTable<f64> = if config.use_clipping {
                    clipped_batch_gradient(minibatch, &policy, spec, step, Some(p_used))?
                } else {
                    batch_gradient(minibatch, &policy, spec, step, Some(p_used))?
                };
                policy = apply_update(&policy, &grad, config.learning_rate)?;
            }
        }

        if let Some(dir) = &config.output_dir {
            if step % config.eval_every == 0 || step + 1 == config.total_steps {
                let path = dir.join(format!("policy_step_{step:06}.json"));
                fs::write(path, policy.to_snapshot_json())?;
                snapshot_steps.push(step);
            }
        }
    }

    if let Some(mut w) = writer {
        w.flush()?;
    }
    if let Some(dir) = &config.output_dir {
        fs::write(dir.join("policy_final.json"), policy.to_snapshot_json())?;
    }

    Ok(TrainOutcome {
        metrics,
        policy,
        snapshot_steps,
    })
}

/// Deterministic rotating window over prompt ids.
fn select_prompts(num_prompts: usize, per_batch: usize, step: u64) -> Vec<usize> {
    if per_batch >= num_prompts {
        return (0..num_prompts).collect();
    }
    let start = (step as usize * per_batch) % num_prompts;
    (0..per_batch).map(|i| (start + i) % num_prompts).collect()
}
