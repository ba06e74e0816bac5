//! Canned base-policy generators used by experiments and tests.
//!
//! All generators return unfrozen [`TabularPolicy`] values; freeze them with
//! [`AutoregressivePolicy::clone_frozen`] when they act as reference models.

use alloc::vec;
use core::fmt;

// Unused whenever std is in the crate graph (its inherent f64 methods win);
// required for the pure no_std build.
#[allow(unused_imports)]
use num_traits::Float;

use crate::math::{derive_stream, uniform_f64};
use crate::policy::{PolicyError, TabularPolicy};
use crate::seqspace::{SeqSpaceError, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub enum BaseGenError {
    /// constant-rate needs e^c * vocab.size == 1; softmax policies cannot
    /// realize any other constant per-token log-probability.
    BadConstantRate { token_logp: f64, vocab_size: usize },
    BadModeParams(&'static str),
    Policy(PolicyError),
}

impl fmt::Display for BaseGenError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseGenError::BadConstantRate { token_logp, vocab_size } => write!(
                f,
                "constant-rate log-probability {token_logp} is unrealizable: it must equal \
                 -ln(vocab size) = {} for a vocabulary of {vocab_size} tokens",
                -(*vocab_size as f64).ln()
            ),
            BaseGenError::BadModeParams(msg) => write!(f, "bad two-mode parameters: {msg}"),
            BaseGenError::Policy(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for BaseGenError {}

impl From<PolicyError> for BaseGenError {
    fn from(e: PolicyError) -> Self {
        BaseGenError::Policy(e)
    }
}

impl From<SeqSpaceError> for BaseGenError {
    fn from(e: SeqSpaceError) -> Self {
        BaseGenError::Policy(PolicyError::Trajectory(e))
    }
}

/// Uniform next-token conditionals everywhere (all logits zero).
pub fn uniform_base(vocab: Vocab, max_len: usize, num_queries: usize) -> Result<TabularPolicy, BaseGenError> {
    Ok(TabularPolicy::zeros(vocab, max_len, num_queries)?)
}

/// A base whose every generation step assigns the chosen token probability
/// `exp(token_logp)`, for any token at any prefix. Softmax policies can only
/// realize this with uniform conditionals, so `token_logp` must equal
/// `-ln(vocab.size)` (validated to 1e-9); the value is taken explicitly so the
/// intended rate is stated and checked rather than silently implied.
pub fn constant_rate_base(
    vocab: Vocab,
    max_len: usize,
    num_queries: usize,
    token_logp: f64,
) -> Result<TabularPolicy, BaseGenError> {
    if (token_logp.exp() * vocab.size as f64 - 1.0).abs() > 1e-9 {
        return Err(BaseGenError::BadConstantRate { token_logp, vocab_size: vocab.size });
    }
    uniform_base(vocab, max_len, num_queries)
}

/// Two-branch stressor: a short low-per-token-confidence branch (EOS straight
/// from the root, probability `short_p`) against a long high-per-token-
/// confidence branch (repeat token continued with probability `long_p` up to
/// `long_len`). Trajectory-level sharpening favours the short branch while
/// per-token averaging favours the long repetitive one, so the two pull the
/// learned length in opposite directions.
pub fn two_mode_base(
    num_queries: usize,
    short_p: f64,
    long_p: f64,
    long_len: usize,
) -> Result<TabularPolicy, BaseGenError> {
    if !(short_p > 0.0 && short_p < 1.0) {
        return Err(BaseGenError::BadModeParams("short_p must lie in (0, 1)"));
    }
    if !(long_p > 0.0 && long_p < 1.0) {
        return Err(BaseGenError::BadModeParams("long_p must lie in (0, 1)"));
    }
    if long_len < 2 {
        return Err(BaseGenError::BadModeParams("long_len must be >= 2"));
    }
    let vocab = Vocab::plain(2, 0)?;
    // softmax(ln p_i) reproduces (p_i) exactly when the p_i sum to one.
    let root = vec![short_p.ln(), (1.0 - short_p).ln()];
    let cont = vec![(1.0 - long_p).ln(), long_p.ln()];
    Ok(TabularPolicy::from_fn(vocab, long_len, num_queries, |_, prefix| {
        if prefix.is_empty() {
            root.clone()
        } else {
            cont.clone()
        }
    })?)
}

/// Independent logits drawn uniformly from [-2, 2) under a seeded stream.
pub fn random_base(
    vocab: Vocab,
    max_len: usize,
    num_queries: usize,
    seed: u64,
) -> Result<TabularPolicy, BaseGenError> {
    let mut rng = derive_stream(seed, &[0x6261_7365]); // "base"
    let size = vocab.size;
    Ok(TabularPolicy::from_fn(vocab, max_len, num_queries, |_, _| {
        (0..size).map(|_| uniform_f64(&mut rng, -2.0, 2.0)).collect()
    })?)
}

/// The canonical two-step instance where per-step tempering provably cannot
/// reproduce trajectory-level power sharpening. Vocabulary {EOS, a, b},
/// max_len 2; the root splits evenly between `a` and `b` (tied logits), `a`
/// continues deterministically to EOS, and after `b` the policy splits evenly
/// between EOS and `a`. The reachable universe is then
/// {[a,EOS]: 1/2, [b,EOS]: 1/4, [b,a]: 1/4} up to a ~1e-21 leak from the
/// saturated logits. Because the root logits are tied, scaling logits by any
/// factor leaves the first-token marginal at (1/2, 1/2), while the true
/// power target at alpha = 2 moves it to (2/3, 1/3).
pub fn tempering_gap_base(num_queries: usize) -> Result<TabularPolicy, BaseGenError> {
    const SAT: f64 = -50.0;
    let vocab = Vocab::plain(3, 0)?;
    Ok(TabularPolicy::from_fn(vocab, 2, num_queries, |_, prefix| match prefix {
        [] => vec![SAT, 0.0, 0.0],
        [1] => vec![0.0, SAT, SAT],
        [2] => vec![0.0, 0.0, SAT],
        _ => vec![0.0, 0.0, 0.0], // unreachable at max_len 2
    })?)
}
