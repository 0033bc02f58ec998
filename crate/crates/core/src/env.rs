//! Synthetic verifiable-reward tasks.
//!
//! Each prompt carries a deterministic verifier r(x, y) in {-1, +1}, and
//! the V^T sequence space is small enough to enumerate, so the correct and
//! incorrect probability masses are exact quantities rather than
//! estimates.
//!
//! The default mod-sum rule marks a sequence correct iff its token sum is
//! congruent to the prompt's target residue mod V; exactly V^(T-1) of the
//! V^T sequences qualify, so chance accuracy is exactly 1/V. The
//! membership-list rule supports degenerate correct sets down to a single
//! sequence.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::policy::{PolicyTable, Sequence, Token, MAX_SEQUENCES_PER_PROMPT};
use crate::scalar::Scalar;

/// Verifier outcome: exactly -1 or +1, never 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reward {
    Correct,
    Incorrect,
}

impl Reward {
    /// The reward value in {-1, +1}.
    #[inline]
    pub fn value(self) -> i8 {
        match self {
            Reward::Correct => 1,
            Reward::Incorrect => -1,
        }
    }

    #[inline]
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            Reward::Correct => T::one(),
            Reward::Incorrect => -T::one(),
        }
    }

    #[inline]
    pub fn is_correct(self) -> bool {
        matches!(self, Reward::Correct)
    }
}

/// Which verification rule the environment applies.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardRule {
    /// Correct iff `sum(tokens) mod V == targets[prompt]`.
    ModSum { targets: Vec<usize> },
    /// Correct iff the sequence appears in the prompt's explicit list.
    MembershipList { lists: Vec<Vec<Sequence>> },
}

/// A fully specified environment: dimensions plus the verification rule.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    vocab: usize,
    seq_len: usize,
    num_prompts: usize,
    rule: RewardRule,
    membership_sets: Vec<HashSet<Sequence>>,
}

impl EnvSpec {
    /// Mod-sum environment. `targets` defaults to `prompt % V` when not
    /// given.
    pub fn mod_sum(
        vocab: usize,
        seq_len: usize,
        num_prompts: usize,
        targets: Option<Vec<usize>>,
    ) -> Result<Self> {
        check_dims(vocab, seq_len, num_prompts)?;
        let targets = targets.unwrap_or_else(|| (0..num_prompts).map(|p| p % vocab).collect());
        if targets.len() != num_prompts {
            return Err(Error::InvalidArgument(format!(
                "expected {num_prompts} target residues, got {}",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&r| r >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "target residue {bad} outside [0, {vocab})"
            )));
        }
        Ok(EnvSpec {
            vocab,
            seq_len,
            num_prompts,
            rule: RewardRule::ModSum { targets },
            membership_sets: Vec::new(),
        })
    }

    /// Membership-list environment with one nonempty list per prompt.
    pub fn membership_list(
        vocab: usize,
        seq_len: usize,
        num_prompts: usize,
        lists: Vec<Vec<Sequence>>,
    ) -> Result<Self> {
        check_dims(vocab, seq_len, num_prompts)?;
        if lists.len() != num_prompts {
            return Err(Error::InvalidArgument(format!(
                "expected {num_prompts} membership lists, got {}",
                lists.len()
            )));
        }
        let mut sets = Vec::with_capacity(num_prompts);
        for (p, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "membership list for prompt {p} is empty"
                )));
            }
            for seq in list {
                check_sequence(vocab, seq_len, seq)?;
            }
            sets.push(list.iter().cloned().collect());
        }
        Ok(EnvSpec {
            vocab,
            seq_len,
            num_prompts,
            rule: RewardRule::MembershipList { lists },
            membership_sets: sets,
        })
    }

    #[inline]
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    #[inline]
    pub fn rule(&self) -> &RewardRule {
        &self.rule
    }

    pub fn num_sequences(&self) -> usize {
        self.vocab.pow(self.seq_len as u32)
    }

    /// Deterministic verification of one sequence.
    pub fn verify(&self, prompt: usize, seq: &[Token]) -> Result<Reward> {
        if prompt >= self.num_prompts {
            return Err(Error::InvalidArgument(format!(
                "prompt {prompt} outside environment with {} prompts",
                self.num_prompts
            )));
        }
        check_sequence(self.vocab, self.seq_len, seq)?;
        let correct = match &self.rule {
            RewardRule::ModSum { targets } => {
                let sum: usize = seq.iter().map(|&t| t as usize).sum();
                sum % self.vocab == targets[prompt]
            }
            RewardRule::MembershipList { .. } => self.membership_sets[prompt].contains(seq),
        };
        Ok(if correct {
            Reward::Correct
        } else {
            Reward::Incorrect
        })
    }

    /// Exact probability mass the policy puts on the correct set, by
    /// enumeration of all V^T sequences.
    pub fn correct_mass<T: Scalar>(&self, policy: &PolicyTable<T>, prompt: usize) -> Result<T> {
        self.check_policy(policy)?;
        let mut mass = T::zero();
        let mut verify_err = None;
        policy.for_each_sequence_prob(prompt, |seq, p| {
            if verify_err.is_some() {
                return;
            }
            match self.verify(prompt, seq) {
                Ok(Reward::Correct) => mass += p,
                Ok(Reward::Incorrect) => {}
                Err(e) => verify_err = Some(e),
            }
        })?;
        if let Some(e) = verify_err {
            return Err(e);
        }
        Ok(mass)
    }

    pub fn incorrect_mass<T: Scalar>(&self, policy: &PolicyTable<T>, prompt: usize) -> Result<T> {
        Ok(T::one() - self.correct_mass(policy, prompt)?)
    }

    /// Mean correct mass across prompts.
    pub fn mean_correct_mass<T: Scalar>(&self, policy: &PolicyTable<T>) -> Result<T> {
        let mut total = T::zero();
        for prompt in 0..self.num_prompts {
            total += self.correct_mass(policy, prompt)?;
        }
        Ok(total / crate::scalar::cast(self.num_prompts as f64))
    }

    pub(crate) fn check_policy<T: Scalar>(&self, policy: &PolicyTable<T>) -> Result<()> {
        if policy.vocab() != self.vocab
            || policy.seq_len() != self.seq_len
            || policy.num_prompts() != self.num_prompts
        {
            return Err(Error::InconsistentPolicy(format!(
                "policy dims (V={}, T={}, P={}) do not match environment (V={}, T={}, P={})",
                policy.vocab(),
                policy.seq_len(),
                policy.num_prompts(),
                self.vocab,
                self.seq_len,
                self.num_prompts
            )));
        }
        Ok(())
    }
}

fn check_dims(vocab: usize, seq_len: usize, num_prompts: usize) -> Result<()> {
    if vocab < 2 {
        return Err(Error::InvalidArgument("vocabulary must have V >= 2".into()));
    }
    if seq_len == 0 || num_prompts == 0 {
        return Err(Error::InvalidArgument(
            "seq_len and num_prompts must be positive".into(),
        ));
    }
    match vocab.checked_pow(seq_len as u32) {
        Some(n) if n <= MAX_SEQUENCES_PER_PROMPT => Ok(()),
        _ => Err(Error::OutOfRange(format!(
            "V^T = {vocab}^{seq_len} exceeds the enumeration cap {MAX_SEQUENCES_PER_PROMPT}"
        ))),
    }
}

fn check_sequence(vocab: usize, seq_len: usize, seq: &[Token]) -> Result<()> {
    if seq.len() != seq_len {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} does not match environment length {seq_len}",
            seq.len()
        )));
    }
    if let Some(bad) = seq.iter().find(|&&t| (t as usize) >= vocab) {
        return Err(Error::InvalidArgument(format!(
            "token {bad} outside vocabulary of size {vocab}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{enumerate_sequences, PolicyTable, Vocabulary};
    use crate::rng::{substream, StreamDomain};

    fn mod_sum_env() -> EnvSpec {
        EnvSpec::mod_sum(4, 3, 2, Some(vec![2, 0])).unwrap()
    }

    #[test]
    fn mod_sum_verify_examples() {
        let env = mod_sum_env();
        assert_eq!(env.verify(0, &[1, 1, 0]).unwrap(), Reward::Correct);
        assert_eq!(env.verify(0, &[1, 1, 1]).unwrap(), Reward::Incorrect);
    }

    #[test]
    fn verify_rejects_invalid_sequence() {
        let env = mod_sum_env();
        assert!(env.verify(0, &[1, 1]).is_err());
        assert!(env.verify(0, &[1, 1, 9]).is_err());
        assert!(env.verify(5, &[1, 1, 0]).is_err());
    }

    #[test]
    fn mod_sum_correct_set_cardinality_by_enumeration() {
        let env = mod_sum_env();
        for prompt in 0..2 {
            let correct = enumerate_sequences(4, 3)
                .iter()
                .filter(|s| env.verify(prompt, s).unwrap().is_correct())
                .count();
            assert_eq!(correct, 4usize.pow(2)); // V^(T-1)
        }
    }

    #[test]
    fn verify_is_deterministic() {
        let env = mod_sum_env();
        for seq in enumerate_sequences(4, 3) {
            let a = env.verify(1, &seq).unwrap();
            let b = env.verify(1, &seq).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn uniform_policy_correct_mass_is_one_over_v() {
        let env = mod_sum_env();
        let policy = PolicyTable::<f64>::uniform(2, Vocabulary::new(4).unwrap(), 3).unwrap();
        for prompt in 0..2 {
            let mass = env.correct_mass(&policy, prompt).unwrap();
            assert!((mass - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_policy_mass_saturates() {
        let env = mod_sum_env();
        let mut policy = PolicyTable::<f64>::uniform(2, Vocabulary::new(4).unwrap(), 3).unwrap();
        // push all mass onto (1, 1, 0), which verifies +1 for prompt 0
        for &tok in &[1u16, 1, 0] {
            let _ = tok;
        }
        let path = [1u16, 1, 0];
        let mut prefix: Vec<Token> = Vec::new();
        for &tok in &path {
            let node = policy.node_of_prefix(0, &prefix).unwrap();
            policy.node_logits_mut(0, node)[tok as usize] = 200.0;
            prefix.push(tok);
        }
        let mass = env.correct_mass(&policy, 0).unwrap();
        assert!((mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn partition_correct_plus_incorrect_is_one() {
        let env = mod_sum_env();
        let mut rng = substream(21, StreamDomain::Test, 0, 0);
        let policy =
            PolicyTable::<f64>::random(2, Vocabulary::new(4).unwrap(), 3, 2.0, &mut rng).unwrap();
        for prompt in 0..2 {
            let c = env.correct_mass(&policy, prompt).unwrap();
            let i = env.incorrect_mass(&policy, prompt).unwrap();
            assert!((c + i - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn correct_mass_matches_independent_enumeration() {
        // second pass: per-sequence chain recomputation, no shared code path
        let env = mod_sum_env();
        let mut rng = substream(22, StreamDomain::Test, 0, 0);
        let policy =
            PolicyTable::<f64>::random(2, Vocabulary::new(4).unwrap(), 3, 1.0, &mut rng).unwrap();
        for prompt in 0..2 {
            let fast = env.correct_mass(&policy, prompt).unwrap();
            let mut slow = 0.0;
            for seq in enumerate_sequences(4, 3) {
                if env.verify(prompt, &seq).unwrap().is_correct() {
                    slow += policy.sequence_prob(prompt, &seq).unwrap().0;
                }
            }
            assert!((fast - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn membership_list_env() {
        let env = EnvSpec::membership_list(3, 2, 1, vec![vec![vec![0, 1], vec![2, 2]]]).unwrap();
        assert_eq!(env.verify(0, &[0, 1]).unwrap(), Reward::Correct);
        assert_eq!(env.verify(0, &[1, 0]).unwrap(), Reward::Incorrect);
        assert!(EnvSpec::membership_list(3, 2, 1, vec![vec![]]).is_err());
        assert!(EnvSpec::membership_list(3, 2, 1, vec![vec![vec![0, 7]]]).is_err());
    }

    #[test]
    fn reward_values() {
        assert_eq!(Reward::Correct.value(), 1);
        assert_eq!(Reward::Incorrect.value(), -1);
        assert_eq!(Reward::Correct.sign::<f64>(), 1.0);
        assert_eq!(Reward::Incorrect.sign::<f64>(), -1.0);
    }
}
