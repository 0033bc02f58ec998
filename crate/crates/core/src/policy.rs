//! Tabular autoregressive softmax policy over a small vocabulary.
//!
//! The policy is a complete V-ary tree of depth T per prompt: every prefix
//! of length 0..T-1 owns one logit vector of length V. That makes every
//! sequence probability and every gradient exactly computable by
//! enumeration, which is the whole point of the laboratory.
//!
//! Node layout: nodes of a prompt are stored layer by layer. Layer `k`
//! holds the V^k prefixes of length k; `layer_offset(k) = (V^k - 1)/(V - 1)`
//! is the index of its first node. Walking a sequence keeps a running
//! position `pos` inside the layer with `pos' = pos * V + token`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

/// Token ids are integers in `[0, V)`.
pub type Token = u16;

/// A fixed-length response: `T` token ids.
pub type Sequence = Vec<Token>;

/// Enumeration cap: V^T per prompt must not exceed this.
pub const MAX_SEQUENCES_PER_PROMPT: usize = 65_536;

/// Vocabulary size with the `V >= 2` invariant enforced at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        Ok(Vocabulary { size })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }
}

/// A probability vector over the vocabulary: entries in [0, 1], summing
/// to 1 within 1e-12 (relative to the scalar's precision).
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<T> {
    probs: Vec<T>,
}

impl<T: Scalar> Distribution<T> {
    /// Validates an externally supplied probability vector.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArgument(
                "distribution needs at least 2 entries".into(),
            ));
        }
        let mut sum = T::zero();
        for &p in &probs {
            if !(p >= T::zero() && p <= T::one()) {
                return Err(Error::InvalidArgument(format!(
                    "probability entry {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        let tol = simplex_tolerance::<T>();
        if (sum - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Distribution { probs })
    }

    #[inline]
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    #[inline]
    pub fn prob(&self, token: Token) -> T {
        self.probs[token as usize]
    }
}

fn simplex_tolerance<T: Scalar>() -> T {
    let strict = cast::<T>(1e-12);
    let eps = T::epsilon() * cast::<T>(100.0);
    if eps > strict {
        eps
    } else {
        strict
    }
}

/// Numerically stabilized softmax: subtracts the max logit before
/// exponentiation, so arbitrary finite shifts cannot overflow.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Distribution<T>> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(
            "softmax needs at least 2 logits".into(),
        ));
    }
    let mut max = logits[0];
    for &z in logits {
        if !z.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite logit {z}")));
        }
        if z > max {
            max = z;
        }
    }
    let mut probs: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let norm: T = probs.iter().copied().sum();
    for p in &mut probs {
        *p = *p / norm;
    }
    Ok(Distribution { probs })
}

/// Shannon entropy of a distribution in nats: `H = -sum_v pi_v log pi_v`,
/// with zero-probability entries contributing 0. Bounded by log V.
pub fn step_entropy<T: Scalar>(dist: &Distribution<T>) -> T {
    let mut h = T::zero();
    for &p in dist.probs() {
        if p > T::zero() {
            h -= p * p.ln();
        }
    }
    h
}

/// Per-(prompt, prefix) logit table defining the tabular policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable<T> {
    vocab: usize,
    seq_len: usize,
    num_prompts: usize,
    nodes_per_prompt: usize,
    logits: Vec<T>,
}

impl<T: Scalar> PolicyTable<T> {
    /// Uniform policy: all logits zero.
    pub fn uniform(num_prompts: usize, vocab: Vocabulary, seq_len: usize) -> Result<Self> {
        Self::check_dims(num_prompts, vocab.size(), seq_len)?;
        let nodes = nodes_per_prompt(vocab.size(), seq_len);
        Ok(PolicyTable {
            vocab: vocab.size(),
            seq_len,
            num_prompts,
            nodes_per_prompt: nodes,
            logits: vec![T::zero(); num_prompts * nodes * vocab.size()],
        })
    }

    /// Random init: logits i.i.d. uniform in [-scale, scale].
    pub fn random<R: Rng>(
        num_prompts: usize,
        vocab: Vocabulary,
        seq_len: usize,
        scale: T,
        rng: &mut R,
    ) -> Result<Self> {
        let mut table = Self::uniform(num_prompts, vocab, seq_len)?;
        for z in &mut table.logits {
            let u: f64 = rng.random();
            *z = (cast::<T>(u) * cast(2.0) - T::one()) * scale;
        }
        Ok(table)
    }

    fn check_dims(num_prompts: usize, vocab: usize, seq_len: usize) -> Result<()> {
        if num_prompts == 0 || seq_len == 0 {
            return Err(Error::InvalidArgument(
                "num_prompts and seq_len must be positive".into(),
            ));
        }
        if vocab < 2 {
            return Err(Error::InvalidArgument("vocabulary must have V >= 2".into()));
        }
        match vocab.checked_pow(seq_len as u32) {
            Some(n) if n <= MAX_SEQUENCES_PER_PROMPT => Ok(()),
            _ => Err(Error::OutOfRange(format!(
                "V^T = {vocab}^{seq_len} exceeds the enumeration cap {MAX_SEQUENCES_PER_PROMPT}"
            ))),
        }
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
    pub fn nodes_per_prompt(&self) -> usize {
        self.nodes_per_prompt
    }

    pub fn num_sequences(&self) -> usize {
        self.vocab.pow(self.seq_len as u32)
    }

    #[inline]
    fn base(&self, prompt: usize, node: usize) -> usize {
        (prompt * self.nodes_per_prompt + node) * self.vocab
    }

    /// Logit vector of one prefix node.
    pub fn node_logits(&self, prompt: usize, node: usize) -> &[T] {
        let b = self.base(prompt, node);
        &self.logits[b..b + self.vocab]
    }

    pub fn node_logits_mut(&mut self, prompt: usize, node: usize) -> &mut [T] {
        let b = self.base(prompt, node);
        &mut self.logits[b..b + self.vocab]
    }

    /// Flat logit storage in (prompt, node, token) order.
    pub fn raw(&self) -> &[T] {
        &self.logits
    }

    pub fn raw_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }

    /// Node index for a prefix, or an inconsistent-policy error if the
    /// prompt or any token is out of range.
    pub fn node_of_prefix(&self, prompt: usize, prefix: &[Token]) -> Result<usize> {
        self.check_prompt(prompt)?;
        if prefix.len() >= self.seq_len {
            return Err(Error::InconsistentPolicy(format!(
                "prefix length {} has no node in a depth-{} tree",
                prefix.len(),
                self.seq_len
            )));
        }
        let mut pos = 0usize;
        for &tok in prefix {
            if (tok as usize) >= self.vocab {
                return Err(Error::InconsistentPolicy(format!(
                    "token {tok} outside vocabulary of size {}",
                    self.vocab
                )));
            }
            pos = pos * self.vocab + tok as usize;
        }
        Ok(layer_offset(self.vocab, prefix.len()) + pos)
    }

    /// Inverse of `node_of_prefix`.
    pub fn prefix_of_node(&self, node: usize) -> Vec<Token> {
        let (mut layer, mut pos) = (0usize, node);
        while pos >= self.vocab.pow(layer as u32) {
            pos -= self.vocab.pow(layer as u32);
            layer += 1;
        }
        let mut prefix = vec![0 as Token; layer];
        for slot in prefix.iter_mut().rev() {
            *slot = (pos % self.vocab) as Token;
            pos /= self.vocab;
        }
        prefix
    }

    fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.num_prompts {
            return Err(Error::InconsistentPolicy(format!(
                "prompt {prompt} outside table with {} prompts",
                self.num_prompts
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &[Token]) -> Result<()> {
        if seq.len() != self.seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} does not match environment length {}",
                seq.len(),
                self.seq_len
            )));
        }
        for &tok in seq {
            if (tok as usize) >= self.vocab {
                return Err(Error::InconsistentPolicy(format!(
                    "token {tok} outside vocabulary of size {}",
                    self.vocab
                )));
            }
        }
        Ok(())
    }

    /// Softmax distribution at one prefix node.
    pub fn distribution(&self, prompt: usize, node: usize) -> Result<Distribution<T>> {
        self.check_prompt(prompt)?;
        softmax(self.node_logits(prompt, node))
    }

    /// Node indices visited when emitting `seq` (one per step).
    pub fn path_nodes(&self, prompt: usize, seq: &[Token]) -> Result<Vec<usize>> {
        self.check_prompt(prompt)?;
        self.check_sequence(seq)?;
        let mut nodes = Vec::with_capacity(self.seq_len);
        let mut pos = 0usize;
        for (t, &tok) in seq.iter().enumerate() {
            nodes.push(layer_offset(self.vocab, t) + pos);
            pos = pos * self.vocab + tok as usize;
        }
        Ok(nodes)
    }

    /// Exact sequence probability under the policy.
    ///
    /// Returns the total probability and the per-token chain. The total is
    /// accumulated in log space so it cannot underflow for T up to 8.
    pub fn sequence_prob(&self, prompt: usize, seq: &[Token]) -> Result<(T, Vec<T>)> {
        self.check_prompt(prompt)?;
        self.check_sequence(seq)?;
        let mut per_token = Vec::with_capacity(self.seq_len);
        let mut log_total = T::zero();
        let mut pos = 0usize;
        for (t, &tok) in seq.iter().enumerate() {
            let node = layer_offset(self.vocab, t) + pos;
            let dist = softmax(self.node_logits(prompt, node))?;
            let p = dist.prob(tok);
            per_token.push(p);
            log_total += p.ln();
            pos = pos * self.vocab + tok as usize;
        }
        Ok((log_total.exp(), per_token))
    }

    /// Ancestral sampling at temperature 1. Identical seed and policy give
    /// identical sequences.
    pub fn sample_sequence<R: Rng>(
        &self,
        prompt: usize,
        rng: &mut R,
    ) -> Result<(Sequence, Vec<T>)> {
        self.sample_sequence_with_temperature(prompt, T::one(), rng)
    }

    /// Ancestral sampling with logits divided by `temperature` before the
    /// softmax. The recorded per-token probabilities are the tempered ones
    /// actually used for the draw.
    pub fn sample_sequence_with_temperature<R: Rng>(
        &self,
        prompt: usize,
        temperature: T,
        rng: &mut R,
    ) -> Result<(Sequence, Vec<T>)> {
        self.check_prompt(prompt)?;
        if !(temperature > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut tokens = Vec::with_capacity(self.seq_len);
        let mut probs = Vec::with_capacity(self.seq_len);
        let mut pos = 0usize;
        let mut scratch = vec![T::zero(); self.vocab];
        for t in 0..self.seq_len {
            let node = layer_offset(self.vocab, t) + pos;
            let logits = self.node_logits(prompt, node);
            for (dst, &z) in scratch.iter_mut().zip(logits) {
                *dst = z / temperature;
            }
            let dist = softmax(&scratch)?;
            let u: T = cast(rng.random::<f64>());
            let tok = sample_categorical(&dist, u);
            tokens.push(tok);
            probs.push(dist.prob(tok));
            pos = pos * self.vocab + tok as usize;
        }
        Ok((tokens, probs))
    }

    /// Calls `f` for every sequence of the V^T tree in lexicographic
    /// order, passing the sequence and its exact probability. The chain
    /// is built incrementally with one softmax per node.
    pub fn for_each_sequence_prob(
        &self,
        prompt: usize,
        mut f: impl FnMut(&[Token], T),
    ) -> Result<()> {
        self.check_prompt(prompt)?;
        let dists = self.node_distributions(prompt)?;
        let mut seq = vec![0 as Token; self.seq_len];
        self.walk(&dists, 0, 0, T::one(), &mut seq, &mut f);
        Ok(())
    }

    fn walk(
        &self,
        dists: &[Distribution<T>],
        layer: usize,
        pos: usize,
        prob: T,
        seq: &mut Vec<Token>,
        f: &mut impl FnMut(&[Token], T),
    ) {
        if layer == self.seq_len {
            f(seq, prob);
            return;
        }
        let dist = &dists[layer_offset(self.vocab, layer) + pos];
        for tok in 0..self.vocab {
            seq[layer] = tok as Token;
            self.walk(
                dists,
                layer + 1,
                pos * self.vocab + tok,
                prob * dist.probs()[tok],
                seq,
                f,
            );
        }
    }

    /// Softmax at every node of one prompt, in node order.
    pub fn node_distributions(&self, prompt: usize) -> Result<Vec<Distribution<T>>> {
        self.check_prompt(prompt)?;
        (0..self.nodes_per_prompt)
            .map(|n| softmax(self.node_logits(prompt, n)))
            .collect()
    }

    /// Flat snapshot document: `"prompt/prefix"` keys (dash-joined token
    /// ids, empty prefix for the root) mapping to logit arrays.
    pub fn to_snapshot(&self) -> PolicySnapshot {
        let mut logits = BTreeMap::new();
        for prompt in 0..self.num_prompts {
            for node in 0..self.nodes_per_prompt {
                let key = snapshot_key(prompt, &self.prefix_of_node(node));
                let row = self
                    .node_logits(prompt, node)
                    .iter()
                    .map(|z| z.to_f64().expect("logit converts to f64"))
                    .collect();
                logits.insert(key, row);
            }
        }
        PolicySnapshot {
            vocab_size: self.vocab,
            seq_len: self.seq_len,
            num_prompts: self.num_prompts,
            logits,
        }
    }

    /// Rebuilds a table from a snapshot, validating completeness and
    /// finiteness. Round-trips are bit-exact for finite doubles.
    pub fn from_snapshot(snapshot: &PolicySnapshot) -> Result<Self> {
        let vocab = Vocabulary::new(snapshot.vocab_size)?;
        let mut table = Self::uniform(snapshot.num_prompts, vocab, snapshot.seq_len)?;
        let expected = snapshot.num_prompts * table.nodes_per_prompt;
        if snapshot.logits.len() != expected {
            return Err(Error::InconsistentPolicy(format!(
                "snapshot has {} prefix entries, complete tree needs {expected}",
                snapshot.logits.len()
            )));
        }
        for (key, row) in &snapshot.logits {
            let (prompt, prefix) = parse_snapshot_key(key)?;
            if row.len() != snapshot.vocab_size {
                return Err(Error::InconsistentPolicy(format!(
                    "logit vector at `{key}` has length {}, expected {}",
                    row.len(),
                    snapshot.vocab_size
                )));
            }
            for &z in row {
                if !z.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "non-finite logit {z} at `{key}`"
                    )));
                }
            }
            let node = table.node_of_prefix(prompt, &prefix)?;
            for (dst, &z) in table.node_logits_mut(prompt, node).iter_mut().zip(row) {
                *dst = cast(z);
            }
        }
        Ok(table)
    }

    pub fn to_snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_snapshot()).expect("snapshot serializes")
    }

    pub fn from_snapshot_json(json: &str) -> Result<Self> {
        let snapshot: PolicySnapshot = serde_json::from_str(json)?;
        Self::from_snapshot(&snapshot)
    }
}

/// Serialized form of a policy table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_prompts: usize,
    pub logits: BTreeMap<String, Vec<f64>>,
}

fn snapshot_key(prompt: usize, prefix: &[Token]) -> String {
    let joined = prefix
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join("-");
    format!("{prompt}/{joined}")
}

fn parse_snapshot_key(key: &str) -> Result<(usize, Vec<Token>)> {
    let (prompt_part, prefix_part) = key
        .split_once('/')
        .ok_or_else(|| Error::InconsistentPolicy(format!("malformed snapshot key `{key}`")))?;
    let prompt: usize = prompt_part
        .parse()
        .map_err(|_| Error::InconsistentPolicy(format!("bad prompt id in key `{key}`")))?;
    let mut prefix = Vec::new();
    if !prefix_part.is_empty() {
        for digit in prefix_part.split('-') {
            let tok: Token = digit
                .parse()
                .map_err(|_| Error::InconsistentPolicy(format!("bad token in key `{key}`")))?;
            prefix.push(tok);
        }
    }
    Ok((prompt, prefix))
}

/// Number of prefix nodes in a complete V-ary tree of depth T:
/// `(V^T - 1) / (V - 1)`.
pub fn nodes_per_prompt(vocab: usize, seq_len: usize) -> usize {
    (vocab.pow(seq_len as u32) - 1) / (vocab - 1)
}

/// Index of the first node of `layer` within a prompt's node block.
#[inline]
pub fn layer_offset(vocab: usize, layer: usize) -> usize {
    (vocab.pow(layer as u32) - 1) / (vocab - 1)
}

/// Layer (prefix length) a node index belongs to.
pub fn layer_of_node(vocab: usize, node: usize) -> usize {
    let mut layer = 0;
    let mut pos = node;
    while pos >= vocab.pow(layer as u32) {
        pos -= vocab.pow(layer as u32);
        layer += 1;
    }
    layer
}

/// CDF walk; the final bucket absorbs rounding in the tail.
fn sample_categorical<T: Scalar>(dist: &Distribution<T>, u: T) -> Token {
    let mut acc = T::zero();
    let last = dist.len() - 1;
    for (i, &p) in dist.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return i as Token;
        }
    }
    last as Token
}

/// All V^T sequences in lexicographic order.
pub fn enumerate_sequences(vocab: usize, seq_len: usize) -> Vec<Sequence> {
    let total = vocab.pow(seq_len as u32);
    let mut out = Vec::with_capacity(total);
    let mut seq = vec![0 as Token; seq_len];
    loop {
        out.push(seq.clone());
        let mut i = seq_len;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if (seq[i] as usize) + 1 < vocab {
                seq[i] += 1;
                for slot in seq.iter_mut().skip(i + 1) {
                    *slot = 0;
                }
                break;
            }
        }
    }
}

/// Lexicographic index of a sequence (big-endian base-V digits).
pub fn sequence_index(vocab: usize, seq: &[Token]) -> usize {
    seq.iter().fold(0usize, |acc, &t| acc * vocab + t as usize)
}
