//! Experiment configuration: a single JSON document with `env`,
//! `objective`, `schedule`, `confidence`, `training`, and `eval` sections.
//!
//! Parsing is permissive (every field has a default); `resolve` then
//! validates cross-section consistency before any work happens and
//! produces the concrete specs. Validation errors carry the dotted field
//! path. The resolved configuration can be echoed back as JSON with every
//! default materialized, and that echo re-parses to an equivalent
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceParams;
use crate::env::{EnvSpec, RewardRule};
use crate::error::{Error, Result};
use crate::eval::default_k_grid;
use crate::objective::{ObjectiveFamily, ObjectiveSpec};
use crate::policy::Sequence;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvRuleKind {
    ModSum,
    MembershipList,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_num_prompts")]
    pub num_prompts: usize,
    #[serde(default = "default_rule")]
    pub rule: EnvRuleKind,
    /// Per-prompt target residues for mod-sum; defaults to `prompt % V`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
    /// Inline membership lists (one list of sequences per prompt).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub membership_lists: Option<Vec<Vec<Sequence>>>,
    /// Sidecar JSON file of integer arrays, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub membership_file: Option<String>,
}

fn default_vocab() -> usize {
    6
}
fn default_seq_len() -> usize {
    3
}
fn default_num_prompts() -> usize {
    8
}
fn default_rule() -> EnvRuleKind {
    EnvRuleKind::ModSum
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            vocab_size: default_vocab(),
            seq_len: default_seq_len(),
            num_prompts: default_num_prompts(),
            rule: default_rule(),
            targets: None,
            membership_lists: None,
            membership_file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    #[serde(default = "default_family")]
    pub family: ObjectiveFamily,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_clip_epsilon")]
    pub clip_epsilon: f64,
}

fn default_family() -> ObjectiveFamily {
    ObjectiveFamily::WReinforce
}
fn default_lambda() -> f64 {
    0.1
}
fn default_clip_epsilon() -> f64 {
    0.2
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            family: default_family(),
            lambda: default_lambda(),
            clip_epsilon: default_clip_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "default_schedule_kind")]
    pub kind: ScheduleKind,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    /// Schedule horizon; defaults to `training.total_steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    #[serde(default = "default_constant_lambda")]
    pub constant_lambda: f64,
    #[serde(default = "default_constant_beta")]
    pub constant_beta: f64,
}

fn default_schedule_kind() -> ScheduleKind {
    ScheduleKind::ExponentialLinear
}
fn default_beta_max() -> f64 {
    1.5
}
fn default_beta_min() -> f64 {
    0.5
}
fn default_kappa() -> f64 {
    0.03
}
fn default_lambda_min() -> f64 {
    0.05
}
fn default_lambda_max() -> f64 {
    0.2
}
fn default_constant_lambda() -> f64 {
    0.1
}
fn default_constant_beta() -> f64 {
    1.0
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: default_schedule_kind(),
            beta_max: default_beta_max(),
            beta_min: default_beta_min(),
            kappa: default_kappa(),
            lambda_min: default_lambda_min(),
            lambda_max: default_lambda_max(),
            total_steps: None,
            constant_lambda: default_constant_lambda(),
            constant_beta: default_constant_beta(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_epsilon_floor")]
    pub epsilon_floor: f64,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_epsilon_floor() -> f64 {
    0.1
}

impl Default for ConfidenceSection {
    fn default() -> Self {
        ConfidenceSection {
            alpha: default_alpha(),
            epsilon_floor: default_epsilon_floor(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_total_steps")]
    pub total_steps: u64,
    /// Defaults to all of the environment's prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_per_batch: Option<usize>,
    #[serde(default = "default_rollouts_per_prompt")]
    pub rollouts_per_prompt: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_use_clipping")]
    pub use_clipping: bool,
    #[serde(default = "default_inner_epochs")]
    pub inner_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch_size: Option<usize>,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_exact_metrics")]
    pub exact_metrics: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_correct_smoothing: Option<f64>,
}

fn default_total_steps() -> u64 {
    2000
}
fn default_rollouts_per_prompt() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_seed() -> u64 {
    42
}
fn default_use_clipping() -> bool {
    true
}
fn default_inner_epochs() -> usize {
    1
}
fn default_eval_every() -> u64 {
    50
}
fn default_exact_metrics() -> bool {
    true
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            total_steps: default_total_steps(),
            prompts_per_batch: None,
            rollouts_per_prompt: default_rollouts_per_prompt(),
            learning_rate: default_learning_rate(),
            seed: default_seed(),
            use_clipping: default_use_clipping(),
            inner_epochs: default_inner_epochs(),
            minibatch_size: None,
            eval_every: default_eval_every(),
            exact_metrics: default_exact_metrics(),
            p_correct_smoothing: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_samples_per_prompt")]
    pub samples_per_prompt: u64,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<u64>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_samples_per_prompt() -> u64 {
    256
}
fn default_temperature() -> f64 {
    1.0
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples_per_prompt: default_samples_per_prompt(),
            k_grid: default_k_grid(),
            temperature: default_temperature(),
        }
    }
}

/// The experiment config document. Every section is optional in the JSON;
/// absent sections take the documented defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form description (JSON has no comments).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default = "default_run_name")]
    pub run_name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<ConfidenceSection>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_run_name() -> String {
    "run".to_string()
}
fn default_output_dir() -> String {
    "out".to_string()
}

/// A validated experiment: concrete specs ready to run.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub env: EnvSpec,
    pub objective: ObjectiveSpec<f64>,
    pub train: TrainConfig,
    pub eval: EvalSection,
    /// The fully materialized config document (defaults filled in).
    pub resolved: ExperimentConfig,
}

impl ExperimentConfig {
    /// Parses a config file; parse errors carry the dotted field path.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validates cross-section consistency and builds the concrete specs.
    /// `base_dir` anchors relative sidecar paths (usually the config
    /// file's directory).
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedExperiment> {
        let env = self.build_env(base_dir)?;

        let schedule_spec: Option<ScheduleSpec<f64>> =
            self.schedule.as_ref().map(|s| ScheduleSpec {
                kind: s.kind,
                beta_max: s.beta_max,
                beta_min: s.beta_min,
                kappa: s.kappa,
                lambda_min: s.lambda_min,
                lambda_max: s.lambda_max,
                total_steps: s.total_steps.unwrap_or(self.training.total_steps),
                constant_lambda: s.constant_lambda,
                constant_beta: s.constant_beta,
            });
        let confidence_params: Option<ConfidenceParams<f64>> =
            self.confidence.as_ref().map(|c| ConfidenceParams {
                alpha: c.alpha,
                epsilon_floor: c.epsilon_floor,
            });

        let family = self.objective.family;
        if family.needs_schedule() && schedule_spec.is_none() {
            return Err(Error::config(
                "objective.family",
                format!("family `{}` requires a `schedule` section", family.label()),
            ));
        }
        if family.needs_confidence() && confidence_params.is_none() {
            return Err(Error::config(
                "objective.family",
                format!(
                    "family `{}` requires a `confidence` section",
                    family.label()
                ),
            ));
        }

        let objective = ObjectiveSpec {
            family,
            lambda: self.objective.lambda,
            schedule: schedule_spec,
            confidence_params,
            clip_epsilon: Some(self.objective.clip_epsilon),
        };
        objective.validate()?;

        let prompts_per_batch = self
            .training
            .prompts_per_batch
            .unwrap_or_else(|| env.num_prompts());

        let train = TrainConfig {
            env: env.clone(),
            objective: objective.clone(),
            total_steps: self.training.total_steps,
            prompts_per_batch,
            rollouts_per_prompt: self.training.rollouts_per_prompt,
            learning_rate: self.training.learning_rate,
            seed: self.training.seed,
            use_clipping: self.training.use_clipping,
            inner_epochs: self.training.inner_epochs,
            minibatch_size: self.training.minibatch_size,
            eval_every: self.training.eval_every,
            exact_metrics: self.training.exact_metrics,
            p_correct_smoothing: self.training.p_correct_smoothing,
            output_dir: None,
        };
        train.validate()?;

        if self.eval.k_grid.is_empty() {
            return Err(Error::config("eval.k_grid", "must not be empty"));
        }
        let max_k = *self.eval.k_grid.iter().max().expect("nonempty");
        if self.eval.samples_per_prompt < max_k {
            return Err(Error::config(
                "eval.samples_per_prompt",
                format!(
                    "{} does not cover the largest k in eval.k_grid ({max_k})",
                    self.eval.samples_per_prompt
                ),
            ));
        }
        if !(self.eval.temperature > 0.0) {
            return Err(Error::config(
                "eval.temperature",
                format!("must be positive, got {}", self.eval.temperature),
            ));
        }

        let resolved = self.materialized(&env, prompts_per_batch);
        Ok(ResolvedExperiment {
            run_name: self.run_name.clone(),
            output_dir: PathBuf::from(&self.output_dir),
            env,
            objective,
            train,
            eval: self.eval.clone(),
            resolved,
        })
    }

    fn build_env(&self, base_dir: &Path) -> Result<EnvSpec> {
        let e = &self.env;
        match e.rule {
            EnvRuleKind::ModSum => {
                EnvSpec::mod_sum(e.vocab_size, e.seq_len, e.num_prompts, e.targets.clone())
            }
            EnvRuleKind::MembershipList => {
                let lists = match (&e.membership_lists, &e.membership_file) {
                    (Some(lists), _) => lists.clone(),
                    (None, Some(file)) => {
                        let path = base_dir.join(file);
                        let text = fs::read_to_string(&path).map_err(|err| {
                            Error::config(
                                "env.membership_file",
                                format!("{}: {err}", path.display()),
                            )
                        })?;
                        serde_json::from_str(&text)
                            .map_err(|err| Error::config("env.membership_file", err.to_string()))?
                    }
                    (None, None) => {
                        return Err(Error::config(
                            "env.membership_lists",
                            "membership-list rule needs inline lists or a membership_file",
                        ))
                    }
                };
                EnvSpec::membership_list(e.vocab_size, e.seq_len, e.num_prompts, lists)
            }
        }
    }

    /// The config with every default materialized, for the resolved echo.
    fn materialized(&self, env: &EnvSpec, prompts_per_batch: usize) -> ExperimentConfig {
        let mut out = self.clone();
        if let RewardRule::ModSum { targets } = env.rule() {
            out.env.targets = Some(targets.clone());
        }
        out.training.prompts_per_batch = Some(prompts_per_batch);
        if let Some(s) = out.schedule.as_mut() {
            s.total_steps = Some(s.total_steps.unwrap_or(self.training.total_steps));
        }
        out
    }
}
