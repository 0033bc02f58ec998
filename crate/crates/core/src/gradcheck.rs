//! The full gradient oracle suite: every objective family's analytic
//! gradient checked against central finite differences on randomized
//! configurations. Backs the `gradcheck` CLI command and the acceptance
//! tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::confidence::ConfidenceParams;
use crate::env::EnvSpec;
use crate::error::Result;
use crate::grad::{
    batch_gradient, clipped_batch_gradient, default_fd_step, exact_gradient,
    finite_difference_check, Probe,
};
use crate::objective::{
    clipped_mc_loss, exact_hardness_table, mc_loss, weighted_loss_frozen, ObjectiveFamily,
    ObjectiveSpec, Rollout,
};
use crate::policy::{PolicyTable, Vocabulary};
use crate::rng::{substream, StreamDomain};
use crate::schedule::ScheduleSpec;
use crate::trainer::batch_correct_ratio;

/// Pass threshold for the suite's max relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Coordinates whose analytic entry is below this cannot be resolved
/// relatively by central differences (the difference of two O(1) loss
/// values carries ~1e-11 round-off); they are checked for absolute
/// agreement instead.
pub const TINY_ENTRY_THRESHOLD: f64 = 1e-6;

/// Absolute agreement required at sub-threshold coordinates.
pub const TINY_ABS_TOLERANCE: f64 = 1e-8;

/// Outcome for one objective family.
#[derive(Debug, Clone)]
pub struct FamilyReport {
    pub family: String,
    pub cases: usize,
    pub probes: usize,
    /// Max relative error over coordinates with a resolvable analytic
    /// entry.
    pub max_rel_err: f64,
    /// Max |fd - analytic| over near-zero coordinates (cancellations).
    pub tiny_abs_err: f64,
}

impl FamilyReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOLERANCE && self.tiny_abs_err <= TINY_ABS_TOLERANCE
    }
}

pub fn suite_passes(reports: &[FamilyReport]) -> bool {
    reports.iter().all(FamilyReport::passed)
}

/// Renders the per-family table the `gradcheck` command prints.
pub fn format_report_table(reports: &[FamilyReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>6} {:>7} {:>14} {:>14}  result\n",
        "family", "cases", "probes", "max rel err", "max tiny abs"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<28} {:>6} {:>7} {:>14.3e} {:>14.3e}  {}\n",
            r.family,
            r.cases,
            r.probes,
            r.max_rel_err,
            r.tiny_abs_err,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    out
}

/// Splits probes by whether their analytic entry is large enough for a
/// relative finite-difference comparison.
fn partition_probes(
    probes: Vec<Probe>,
    analytic: &crate::grad::GradTable<f64>,
) -> (Vec<Probe>, Vec<Probe>) {
    probes
        .into_iter()
        .partition(|p| analytic.entry(p.prompt, p.node, p.token).abs() >= TINY_ENTRY_THRESHOLD)
}

/// Central difference at one coordinate; used for the absolute check at
/// near-zero analytic entries.
fn central_diff<F>(mut loss: F, policy: &PolicyTable<f64>, probe: &Probe, h: f64) -> Result<f64>
where
    F: FnMut(&PolicyTable<f64>) -> Result<f64>,
{
    let mut workspace = policy.clone();
    let original = workspace.node_logits(probe.prompt, probe.node)[probe.token];
    workspace.node_logits_mut(probe.prompt, probe.node)[probe.token] = original + h;
    let plus = loss(&workspace)?;
    workspace.node_logits_mut(probe.prompt, probe.node)[probe.token] = original - h;
    let minus = loss(&workspace)?;
    Ok((plus - minus) / (2.0 * h))
}

struct Case {
    env: EnvSpec,
    policy: PolicyTable<f64>,
    batch: Vec<Rollout<f64>>,
    p_correct: f64,
    t: u64,
}

fn build_case(seed: u64, idx: u64, params: Option<&ConfidenceParams<f64>>) -> Result<Case> {
    let mut rng = substream(seed, StreamDomain::Test, 1000 + idx, 0);
    let vocab = [3usize, 4][rng.random_range(0..2)];
    let seq_len = [2usize, 3][rng.random_range(0..2)];
    let num_prompts = rng.random_range(1..=2usize);
    let env = EnvSpec::mod_sum(vocab, seq_len, num_prompts, None)?;
    let policy = PolicyTable::random(num_prompts, Vocabulary::new(vocab)?, seq_len, 1.0, &mut rng)?;
    let mut batch = Vec::new();
    for prompt in 0..num_prompts {
        for _ in 0..3 {
            let (tokens, probs) = policy.sample_sequence(prompt, &mut rng)?;
            let reward = env.verify(prompt, &tokens)?;
            batch.push(Rollout::new(prompt, tokens, probs, reward, params)?);
        }
    }
    let p_correct = batch_correct_ratio(&batch)?;
    let t = rng.random_range(0..150u64);
    Ok(Case {
        env,
        policy,
        batch,
        p_correct,
        t,
    })
}

/// Probe coordinates at the batch's visited nodes (all vocabulary slots),
/// capped at `limit` by seeded subsampling.
fn visited_probes(case: &Case, rng: &mut ChaCha8Rng, limit: usize) -> Vec<Probe> {
    let mut probes = Vec::new();
    for rollout in &case.batch {
        let nodes = case
            .policy
            .path_nodes(rollout.prompt, &rollout.tokens)
            .expect("batch paths are valid");
        for node in nodes {
            for token in 0..case.env.vocab() {
                probes.push(Probe {
                    prompt: rollout.prompt,
                    node,
                    token,
                });
            }
        }
    }
    probes.sort_by_key(|p| (p.prompt, p.node, p.token));
    probes.dedup();
    while probes.len() > limit {
        let drop = rng.random_range(0..probes.len());
        probes.swap_remove(drop);
    }
    probes
}

/// Random probe coordinates anywhere in the table (exact losses touch
/// every node).
fn table_probes(case: &Case, rng: &mut ChaCha8Rng, count: usize) -> Vec<Probe> {
    (0..count)
        .map(|_| Probe {
            prompt: rng.random_range(0..case.env.num_prompts()),
            node: rng.random_range(0..case.policy.nodes_per_prompt()),
            token: rng.random_range(0..case.env.vocab()),
        })
        .collect()
}

fn spec_for(family: ObjectiveFamily, schedule_kind: u8) -> ObjectiveSpec<f64> {
    let schedule = match schedule_kind {
        0 => ScheduleSpec::exponential_linear_defaults(200),
        1 => ScheduleSpec::cosine_defaults(200),
        _ => ScheduleSpec::performance_driven_defaults(200),
    };
    match family {
        ObjectiveFamily::ANsr => ObjectiveSpec::a_nsr(schedule),
        ObjectiveFamily::ACwNsr => ObjectiveSpec::a_cw_nsr(schedule, ConfidenceParams::defaults()),
        ObjectiveFamily::CwNsr => ObjectiveSpec::cw_nsr(ConfidenceParams::defaults()),
        other => ObjectiveSpec::new(other),
    }
}

fn run_mc_family(
    name: &str,
    spec_template: ObjectiveSpec<f64>,
    seed: u64,
    cases: usize,
    clipped: bool,
    off_policy: bool,
) -> Result<FamilyReport> {
    let mut max_rel: f64 = 0.0;
    let mut tiny_abs: f64 = 0.0;
    let mut probe_total = 0usize;
    let params = spec_template.confidence_params;
    for idx in 0..cases {
        let case = build_case(seed, (idx as u64) * 31 + name.len() as u64, params.as_ref())?;
        let mut rng = substream(
            seed,
            StreamDomain::Test,
            2000 + idx as u64,
            name.len() as u64,
        );
        let spec = spec_template.clone();
        let p = Some(case.p_correct);
        let n = case.batch.len() as f64;

        // off-policy: nudge the current policy away from the behavior one
        let policy = if off_policy {
            let mut moved = case.policy.clone();
            for z in moved.raw_mut() {
                *z += 0.05 * (rng.random::<f64>() - 0.5);
            }
            moved
        } else {
            case.policy.clone()
        };

        let grad = if clipped {
            clipped_batch_gradient(&case.batch, &policy, &spec, case.t, p)?
        } else {
            batch_gradient(&case.batch, &policy, &spec, case.t, p)?
        };
        let loss = |pt: &PolicyTable<f64>| -> Result<f64> {
            if clipped {
                clipped_mc_loss(&case.batch, pt, &spec, case.t, p).map(|l| l * n)
            } else {
                mc_loss(&case.batch, pt, &spec, case.t, p).map(|l| l * n)
            }
        };

        let probes = visited_probes(&case, &mut rng, 24);
        probe_total += probes.len();
        let (resolvable, tiny) = partition_probes(probes, &grad);
        if !resolvable.is_empty() {
            let err =
                finite_difference_check(loss, &policy, &grad, &resolvable, default_fd_step())?;
            max_rel = max_rel.max(err);
        }
        for probe in &tiny {
            let fd = central_diff(loss, &policy, probe, default_fd_step())?;
            let an = grad.entry(probe.prompt, probe.node, probe.token);
            tiny_abs = tiny_abs.max((fd - an).abs());
        }
    }
    Ok(FamilyReport {
        family: name.to_string(),
        cases,
        probes: probe_total,
        max_rel_err: max_rel,
        tiny_abs_err: tiny_abs,
    })
}

fn run_exact_family(
    name: &str,
    spec_template: ObjectiveSpec<f64>,
    seed: u64,
    cases: usize,
) -> Result<FamilyReport> {
    let mut max_rel: f64 = 0.0;
    let mut tiny_abs: f64 = 0.0;
    let mut probe_total = 0usize;
    for idx in 0..cases {
        let case = build_case(seed, (idx as u64) * 97 + name.len() as u64, None)?;
        let mut rng = substream(
            seed,
            StreamDomain::Test,
            3000 + idx as u64,
            name.len() as u64,
        );
        let spec = spec_template.clone();
        let p = Some(case.p_correct);
        let probes = table_probes(&case, &mut rng, 24);
        probe_total += probes.len();

        let grad = exact_gradient(&case.policy, &case.env, &spec, case.t, p)?;
        // detached weights: the FD functional holds the hardness table
        // fixed at the center policy's values
        let frozen = if spec.family.needs_confidence() {
            let params = spec.confidence_params.as_ref().expect("cw family");
            Some(exact_hardness_table(&case.policy, &case.env, params)?)
        } else {
            None
        };
        let loss = |pt: &PolicyTable<f64>| -> Result<f64> {
            match &frozen {
                Some(table) => weighted_loss_frozen(pt, &case.env, &spec, case.t, p, table),
                None => crate::objective::weighted_loss(pt, &case.env, &spec, case.t, p),
            }
        };
        let (resolvable, tiny) = partition_probes(probes, &grad);
        if !resolvable.is_empty() {
            let err =
                finite_difference_check(loss, &case.policy, &grad, &resolvable, default_fd_step())?;
            max_rel = max_rel.max(err);
        }
        for probe in &tiny {
            let fd = central_diff(loss, &case.policy, probe, default_fd_step())?;
            let an = grad.entry(probe.prompt, probe.node, probe.token);
            tiny_abs = tiny_abs.max((fd - an).abs());
        }
    }
    Ok(FamilyReport {
        family: name.to_string(),
        cases,
        probes: probe_total,
        max_rel_err: max_rel,
        tiny_abs_err: tiny_abs,
    })
}

/// Runs the whole oracle suite: exact-loss gradients and Monte Carlo
/// batch gradients for every family, plus the clipped objective on- and
/// off-policy. `cases_per_family = 8` gives 128 randomized configurations.
pub fn run_gradcheck_suite(seed: u64, cases_per_family: usize) -> Result<Vec<FamilyReport>> {
    use ObjectiveFamily as F;
    let mut reports = Vec::new();

    for (name, family) in [
        ("exact-psr", F::PsrOnly),
        ("exact-nsr", F::NsrOnly),
        ("exact-rlvr", F::Rlvr),
        ("exact-w-reinforce", F::WReinforce),
        ("exact-cw-nsr", F::CwNsr),
    ] {
        reports.push(run_exact_family(
            name,
            spec_for(family, 0),
            seed,
            cases_per_family,
        )?);
    }

    for (name, family, sched) in [
        ("mc-psr-only", F::PsrOnly, 0u8),
        ("mc-nsr-only", F::NsrOnly, 0),
        ("mc-rlvr", F::Rlvr, 0),
        ("mc-w-reinforce", F::WReinforce, 0),
        ("mc-a-nsr-exp-linear", F::ANsr, 0),
        ("mc-a-nsr-cosine", F::ANsr, 1),
        ("mc-a-nsr-performance", F::ANsr, 2),
        ("mc-cw-nsr", F::CwNsr, 0),
        ("mc-a-cw-nsr", F::ACwNsr, 0),
    ] {
        reports.push(run_mc_family(
            name,
            spec_for(family, sched),
            seed,
            cases_per_family,
            false,
            false,
        )?);
    }

    reports.push(run_mc_family(
        "clipped-on-policy",
        ObjectiveSpec::w_reinforce().with_clip_epsilon(0.2),
        seed,
        cases_per_family,
        true,
        false,
    )?);
    reports.push(run_mc_family(
        "clipped-off-policy",
        ObjectiveSpec::w_reinforce().with_clip_epsilon(0.2),
        seed,
        cases_per_family,
        true,
        true,
    )?);

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_default_seed() {
        let reports = run_gradcheck_suite(2024, 3).unwrap();
        assert!(reports.len() >= 16);
        for r in &reports {
            assert!(
                r.passed(),
                "family {} failed with max rel err {}",
                r.family,
                r.max_rel_err
            );
        }
    }

    #[test]
    fn report_table_formats() {
        let reports = vec![FamilyReport {
            family: "exact-psr".into(),
            cases: 3,
            probes: 72,
            max_rel_err: 1.2e-8,
            tiny_abs_err: 0.0,
        }];
        let table = format_report_table(&reports);
        assert!(table.contains("exact-psr"));
        assert!(table.contains("ok"));
    }
}
