//! Sequence policies, sampling, Monte-Carlo rollout rewards and the
//! REINFORCE per-step weights shared by every policy implementation.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Sampled,
    Greedy,
    /// Externally supplied sequence, e.g. a gold title.
    Forced,
}

/// A decoded sequence with per-step log-probabilities and, once the
/// trainer has scored it, per-step rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub ids: Vec<usize>,
    pub step_log_probs: Vec<f64>,
    pub step_rewards: Vec<f64>,
    pub mode: DecodeMode,
}

impl GenerationTrace {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// An autoregressive distribution over token sequences.
///
/// `State` summarises the consumed prefix. [`Policy::next_log_probs`]
/// returns the next-token log-probabilities (`-inf` for tokens that can
/// never be emitted) together with the state to [`Policy::feed`] the chosen
/// token into.
pub trait Policy {
    type Context: ?Sized;
    type State: Clone;

    fn initial_state(&self, ctx: &Self::Context) -> Self::State;
    fn next_log_probs(&self, ctx: &Self::Context, state: &Self::State) -> (Vec<f64>, Self::State);
    fn feed(&self, state: Self::State, token: usize) -> Self::State;
    /// True once `ids` is a complete sequence.
    fn is_terminal(&self, ids: &[usize]) -> bool;
}

/// Reward model over complete sequences, e.g. the discriminator.
pub trait SequenceScorer {
    fn score(&self, ids: &[usize]) -> f64;
}

impl<F: Fn(&[usize]) -> f64> SequenceScorer for F {
    fn score(&self, ids: &[usize]) -> f64 {
        self(ids)
    }
}

/// Inverse-CDF draw from log-probabilities.
pub fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last = None;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        cum += lp.exp();
        last = Some(i);
        if u < cum {
            return i;
        }
    }
    last.expect("distribution has at least one finite entry")
}

/// Argmax with ties broken towards the smallest id.
pub fn argmax(log_probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &lp) in log_probs.iter().enumerate() {
        if lp > log_probs[best] {
            best = i;
        }
    }
    best
}

fn decode<P: Policy, F: FnMut(&[f64]) -> usize>(
    policy: &P,
    ctx: &P::Context,
    mut state: P::State,
    mut ids: Vec<usize>,
    mode: DecodeMode,
    mut choose: F,
) -> GenerationTrace {
    let mut step_log_probs = Vec::new();
    while !policy.is_terminal(&ids) {
        let (lp, next) = policy.next_log_probs(ctx, &state);
        let tok = choose(&lp);
        step_log_probs.push(lp[tok]);
        ids.push(tok);
        state = policy.feed(next, tok);
    }
    GenerationTrace {
        ids,
        step_log_probs,
        step_rewards: Vec::new(),
        mode,
    }
}

/// Ancestral sampling until the policy reports a terminal sequence.
pub fn sample_trace<P: Policy, R: Rng + ?Sized>(policy: &P, ctx: &P::Context, rng: &mut R) -> GenerationTrace {
    let state = policy.initial_state(ctx);
    decode(policy, ctx, state, Vec::new(), DecodeMode::Sampled, |lp| {
        sample_categorical(lp, rng)
    })
}

pub fn greedy_trace<P: Policy>(policy: &P, ctx: &P::Context) -> GenerationTrace {
    let state = policy.initial_state(ctx);
    decode(policy, ctx, state, Vec::new(), DecodeMode::Greedy, argmax)
}

/// Per-step log-probabilities of a given sequence (teacher forcing).
pub fn score_sequence<P: Policy>(policy: &P, ctx: &P::Context, ids: &[usize]) -> Vec<f64> {
    let mut state = policy.initial_state(ctx);
    let mut out = Vec::with_capacity(ids.len());
    for &tok in ids {
        let (lp, next) = policy.next_log_probs(ctx, &state);
        out.push(lp[tok]);
        state = policy.feed(next, tok);
    }
    out
}

/// Samples a completion of `prefix`, where `state` has consumed `prefix`.
pub fn complete<P: Policy, R: Rng + ?Sized>(
    policy: &P,
    ctx: &P::Context,
    state: P::State,
    prefix: &[usize],
    rng: &mut R,
) -> Vec<usize> {
    decode(policy, ctx, state, prefix.to_vec(), DecodeMode::Sampled, |lp| {
        sample_categorical(lp, rng)
    })
    .ids
}

fn prefix_state<P: Policy>(policy: &P, ctx: &P::Context, prefix: &[usize]) -> P::State {
    let mut state = policy.initial_state(ctx);
    for &tok in prefix {
        let (_, next) = policy.next_log_probs(ctx, &state);
        state = policy.feed(next, tok);
    }
    state
}

fn rollout_mean<P: Policy, S: SequenceScorer + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    ctx: &P::Context,
    state: &P::State,
    prefix: &[usize],
    scorer: &S,
    n_rollouts: usize,
    rng: &mut R,
) -> f64 {
    let total: f64 = (0..n_rollouts)
        .map(|_| scorer.score(&complete(policy, ctx, state.clone(), prefix, rng)))
        .sum();
    total / n_rollouts as f64
}

/// Reward for choosing `ids[t-1]` after `ids[..t-1]` (1-based `t`).
///
/// For `t < N` the prefix `ids[..t]` is completed `n_rollouts` times under
/// the policy and the scorer's mean over the completions is returned. At
/// `t = N` the full sequence is scored directly, with no rollouts.
pub fn mc_rollout_reward<P: Policy, S: SequenceScorer + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    ctx: &P::Context,
    ids: &[usize],
    t: usize,
    scorer: &S,
    n_rollouts: usize,
    rng: &mut R,
) -> f64 {
    assert!(t >= 1 && t <= ids.len(), "step {t} outside 1..={}", ids.len());
    if t == ids.len() {
        return scorer.score(ids);
    }
    let state = prefix_state(policy, ctx, &ids[..t]);
    rollout_mean(policy, ctx, &state, &ids[..t], scorer, n_rollouts, rng)
}

/// [`mc_rollout_reward`] for every step of `ids`, sharing prefix states.
pub fn rollout_rewards<P: Policy, S: SequenceScorer + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    ctx: &P::Context,
    ids: &[usize],
    scorer: &S,
    n_rollouts: usize,
    rng: &mut R,
) -> Vec<f64> {
    let n = ids.len();
    let mut state = policy.initial_state(ctx);
    let mut out = Vec::with_capacity(n);
    for t in 1..=n {
        let (_, next) = policy.next_log_probs(ctx, &state);
        state = policy.feed(next, ids[t - 1]);
        if t == n {
            out.push(scorer.score(ids));
        } else {
            out.push(rollout_mean(policy, ctx, &state, &ids[..t], scorer, n_rollouts, rng));
        }
    }
    out
}

/// Samples one trace and attaches its rollout rewards. The returned trace
/// carries the raw rewards in `step_rewards`.
pub fn sample_with_rewards<P: Policy, S: SequenceScorer + ?Sized, R: Rng + ?Sized>(
    policy: &P,
    ctx: &P::Context,
    scorer: &S,
    n_rollouts: usize,
    rng: &mut R,
) -> GenerationTrace {
    let mut trace = sample_trace(policy, ctx, rng);
    trace.step_rewards = rollout_rewards(policy, ctx, &trace.ids, scorer, n_rollouts, rng);
    trace
}

/// Per-step weights `R'_t - baseline` multiplying `grad log pi(s_t)`.
pub fn reinforce_weights(rewards: &[f64], baseline: f64) -> Vec<f64> {
    rewards.iter().map(|r| r - baseline).collect()
}

/// Fixed-length softmax policy with one logit table per position, indexed
/// by the previous token. Small enough to enumerate exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub vocab: usize,
    pub length: usize,
    /// Position 0 uses `logits[0..vocab]`; position `t >= 1` with previous
    /// token `p` uses the block starting at `vocab * (1 + (t - 1) * vocab + p)`.
    pub logits: Vec<f64>,
}

impl TabularPolicy {
    pub fn num_params(vocab: usize, length: usize) -> usize {
        vocab + length.saturating_sub(1) * vocab * vocab
    }

    pub fn new(vocab: usize, length: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), Self::num_params(vocab, length));
        TabularPolicy {
            vocab,
            length,
            logits,
        }
    }

    fn block(&self, prefix: &[usize]) -> usize {
        match prefix.len() {
            0 => 0,
            t => self.vocab * (1 + (t - 1) * self.vocab + prefix[t - 1]),
        }
    }

    fn log_probs_at(&self, prefix: &[usize]) -> Vec<f64> {
        let b = self.block(prefix);
        crate::nn::log_softmax_masked(&self.logits[b..b + self.vocab], None)
    }

    /// Gradient of `sum_t weights[t] * log pi(ids[t] | ids[..t])` w.r.t. the logits.
    pub fn grad_weighted_log_prob(&self, ids: &[usize], weights: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.logits.len()];
        for t in 0..ids.len() {
            let b = self.block(&ids[..t]);
            let lp = self.log_probs_at(&ids[..t]);
            for v in 0..self.vocab {
                let onehot = if v == ids[t] { 1.0 } else { 0.0 };
                g[b + v] += weights[t] * (onehot - lp[v].exp());
            }
        }
        g
    }

    pub fn sequence_prob(&self, ids: &[usize]) -> f64 {
        (0..ids.len())
            .map(|t| self.log_probs_at(&ids[..t])[ids[t]])
            .sum::<f64>()
            .exp()
    }
}

impl Policy for TabularPolicy {
    type Context = ();
    type State = Vec<usize>;

    fn initial_state(&self, _: &()) -> Vec<usize> {
        Vec::new()
    }

    fn next_log_probs(&self, _: &(), state: &Vec<usize>) -> (Vec<f64>, Vec<usize>) {
        (self.log_probs_at(state), state.clone())
    }

    fn feed(&self, mut state: Vec<usize>, token: usize) -> Vec<usize> {
        state.push(token);
        state
    }

    fn is_terminal(&self, ids: &[usize]) -> bool {
        ids.len() >= self.length
    }
}
