//! Monte Carlo consistency: the sampled estimators converge to their
//! exact enumeration counterparts.

use nsrlab_core::env::EnvSpec;
use nsrlab_core::objective::{mc_loss, ObjectiveFamily, ObjectiveSpec, Rollout};
use nsrlab_core::policy::{enumerate_sequences, sequence_index, PolicyTable, Vocabulary};
use nsrlab_core::rng::{substream, StreamDomain};

fn random_policy(seed: u64, env: &EnvSpec, scale: f64) -> PolicyTable<f64> {
    let mut rng = substream(seed, StreamDomain::Test, 0, 0);
    PolicyTable::random(
        env.num_prompts(),
        Vocabulary::new(env.vocab()).unwrap(),
        env.seq_len(),
        scale,
        &mut rng,
    )
    .unwrap()
}

/// Exact expectation of the per-rollout Monte Carlo loss by enumeration:
/// `sum_y pi(y) * (-w(y) R(y) * mean_t pi(y_t))`, averaged over prompts.
/// This re-derives the functional independently of `mc_loss`.
fn exact_expected_mc_loss(
    policy: &PolicyTable<f64>,
    env: &EnvSpec,
    spec: &ObjectiveSpec<f64>,
) -> f64 {
    let mut total = 0.0;
    for prompt in 0..env.num_prompts() {
        for seq in enumerate_sequences(env.vocab(), env.seq_len()) {
            let (p, per_token) = policy.sequence_prob(prompt, &seq).unwrap();
            let reward = env.verify(prompt, &seq).unwrap();
            let rollout = Rollout::new(
                prompt,
                seq,
                per_token.clone(),
                reward,
                spec.confidence_params.as_ref(),
            )
            .unwrap();
            let w = spec.rollout_weight(&rollout, spec.base_weights(0, None).unwrap());
            let mean_prob = per_token.iter().sum::<f64>() / per_token.len() as f64;
            total += p * (-w * reward.sign::<f64>() * mean_prob);
        }
    }
    total / env.num_prompts() as f64
}

fn mc_consistency_case(
    seed: u64,
    policy: &PolicyTable<f64>,
    env: &EnvSpec,
    family: ObjectiveFamily,
) {
    let spec = ObjectiveSpec::<f64>::new(family);
    let exact = exact_expected_mc_loss(policy, env, &spec);
    let total = 1_000_000usize;
    let per_prompt = total / env.num_prompts();
    let mut values = Vec::with_capacity(per_prompt * env.num_prompts());
    for prompt in 0..env.num_prompts() {
        let mut rng = substream(seed, StreamDomain::Test, 7, prompt as u64);
        for _ in 0..per_prompt {
            let (tokens, probs) = policy.sample_sequence(prompt, &mut rng).unwrap();
            let reward = env.verify(prompt, &tokens).unwrap();
            let rollout = Rollout::new(prompt, tokens, probs, reward, None).unwrap();
            values.push(mc_loss(std::slice::from_ref(&rollout), policy, &spec, 0, None).unwrap());
        }
    }
    let n = values.len() as f64;
    let mean: f64 = values.iter().sum::<f64>() / n;
    let var: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let se = (var / n).sqrt();
    assert!(
        (mean - exact).abs() < 5.0 * se.max(1e-12),
        "family {family:?}: mc {mean} vs exact {exact} (se {se})"
    );
}

#[test]
fn mc_loss_converges_to_exact_expectation() {
    let env = EnvSpec::mod_sum(4, 2, 2, None).unwrap();
    let uniform = PolicyTable::<f64>::uniform(2, Vocabulary::new(4).unwrap(), 2).unwrap();
    mc_consistency_case(101, &uniform, &env, ObjectiveFamily::Rlvr);
    let random = random_policy(102, &env, 1.0);
    mc_consistency_case(103, &random, &env, ObjectiveFamily::Rlvr);
    mc_consistency_case(104, &random, &env, ObjectiveFamily::WReinforce);
}

/// Sampling frequency of every sequence matches its exact probability
/// within 5 standard errors over 10^6 draws (uniform and random policy).
#[test]
fn sampling_frequencies_match_sequence_probabilities() {
    let env = EnvSpec::mod_sum(4, 2, 1, None).unwrap();
    let uniform = PolicyTable::<f64>::uniform(1, Vocabulary::new(4).unwrap(), 2).unwrap();
    let random = random_policy(105, &env, 1.0);
    for (label, policy, seed) in [("uniform", &uniform, 106u64), ("random", &random, 107)] {
        let n = 1_000_000usize;
        let mut counts = vec![0usize; env.num_sequences()];
        let mut rng = substream(seed, StreamDomain::Test, 8, 0);
        for _ in 0..n {
            let (tokens, _) = policy.sample_sequence(0, &mut rng).unwrap();
            counts[sequence_index(env.vocab(), &tokens)] += 1;
        }
        for seq in enumerate_sequences(env.vocab(), env.seq_len()) {
            let (p, _) = policy.sequence_prob(0, &seq).unwrap();
            let freq = counts[sequence_index(env.vocab(), &seq)] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 5.0 * se.max(1e-9),
                "{label} policy, seq {seq:?}: freq {freq} vs prob {p}"
            );
        }
    }
}
