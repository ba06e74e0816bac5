//! Token vocabularies and exactly enumerable trajectory universes.
//!
//! A trajectory either ends with an explicit EOS token or is force-stopped at
//! `max_len` tokens. Termination is part of the trajectory's identity, which
//! makes the universe prefix-free: no valid trajectory is a proper prefix of
//! another, so trajectory probabilities under any autoregressive policy sum
//! to one with no leftover mass.

use alloc::vec::Vec;
use core::fmt;

/// Hard default ceiling on universe size for enumeration.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Errors from vocabulary and universe construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SeqSpaceError {
    /// Vocabulary constraints violated (empty, EOS out of range, bad marker).
    BadVocab(&'static str),
    /// `max_len` must be at least 1 so the EOS-only trajectory exists.
    BadMaxLen,
    /// The closed-form universe size exceeds the enumeration cap.
    UniverseTooLarge { count: u64, cap: u64 },
    /// The closed-form universe size overflows u64 arithmetic.
    CountOverflow,
    /// A trajectory failed validation against its vocabulary / length bounds.
    BadTrajectory(&'static str),
}

impl fmt::Display for SeqSpaceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeqSpaceError::BadVocab(msg) => write!(f, "invalid vocabulary: {msg}"),
            SeqSpaceError::BadMaxLen => write!(f, "max_len must be >= 1"),
            SeqSpaceError::UniverseTooLarge { count, cap } => {
                write!(f, "universe has {count} trajectories, above the cap of {cap}")
            }
            SeqSpaceError::CountOverflow => write!(f, "universe size overflows u64"),
            SeqSpaceError::BadTrajectory(msg) => write!(f, "invalid trajectory: {msg}"),
        }
    }
}

impl core::error::Error for SeqSpaceError {}

/// Token alphabet shared by every policy and target in one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    /// Number of distinct tokens, EOS included.
    pub size: usize,
    /// Index of the end-of-sequence token.
    pub eos_id: usize,
    /// Optional formatting-marker token checked by format penalties.
    pub marker_id: Option<usize>,
}

impl Vocab {
    pub fn new(size: usize, eos_id: usize, marker_id: Option<usize>) -> Result<Self, SeqSpaceError> {
        if size == 0 {
            return Err(SeqSpaceError::BadVocab("size must be >= 1"));
        }
        if eos_id >= size {
            return Err(SeqSpaceError::BadVocab("eos_id out of range"));
        }
        if let Some(m) = marker_id {
            if m >= size {
                return Err(SeqSpaceError::BadVocab("marker_id out of range"));
            }
            if m == eos_id {
                return Err(SeqSpaceError::BadVocab("marker_id must differ from eos_id"));
            }
        }
        Ok(Vocab { size, eos_id, marker_id })
    }

    /// Convenience for the common case of no marker token.
    pub fn plain(size: usize, eos_id: usize) -> Result<Self, SeqSpaceError> {
        Vocab::new(size, eos_id, None)
    }
}

/// How a trajectory ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Termination {
    /// The policy emitted the EOS token (it is the final token).
    Eos,
    /// Generation was force-stopped at `max_len`; no EOS appears.
    MaxLen,
}

/// A complete token sequence. `tokens` includes the trailing EOS when
/// terminated by [`Termination::Eos`]; the force-stop at `max_len` contributes
/// no token and no probability factor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    pub terminated_by: Termination,
}

impl Trajectory {
    /// Number of tokens, counting the trailing EOS when present.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Final non-EOS token, if any (the answer position a marker check reads).
    pub fn final_content_token(&self, vocab: &Vocab) -> Option<usize> {
        self.tokens.iter().rev().copied().find(|&t| t != vocab.eos_id)
    }

    /// Checks the termination rules against a vocabulary and length bound.
    pub fn validate(&self, vocab: &Vocab, max_len: usize) -> Result<(), SeqSpaceError> {
        if max_len == 0 {
            return Err(SeqSpaceError::BadMaxLen);
        }
        if self.tokens.is_empty() {
            return Err(SeqSpaceError::BadTrajectory("empty token list"));
        }
        if self.tokens.iter().any(|&t| t >= vocab.size) {
            return Err(SeqSpaceError::BadTrajectory("token out of vocabulary range"));
        }
        let interior_eos = self.tokens[..self.tokens.len() - 1].iter().any(|&t| t == vocab.eos_id);
        if interior_eos {
            return Err(SeqSpaceError::BadTrajectory("EOS before the final position"));
        }
        match self.terminated_by {
            Termination::Eos => {
                if *self.tokens.last().unwrap() != vocab.eos_id {
                    return Err(SeqSpaceError::BadTrajectory("EOS-terminated but last token is not EOS"));
                }
                if self.tokens.len() > max_len {
                    return Err(SeqSpaceError::BadTrajectory("longer than max_len"));
                }
            }
            Termination::MaxLen => {
                if self.tokens.len() != max_len {
                    return Err(SeqSpaceError::BadTrajectory("force-stopped but length differs from max_len"));
                }
                if *self.tokens.last().unwrap() == vocab.eos_id {
                    return Err(SeqSpaceError::BadTrajectory("force-stopped trajectory must not end in EOS"));
                }
            }
        }
        Ok(())
    }
}

/// Identifies one query (prompt) in a multi-query experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub usize);

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Closed-form universe size: sum over EOS-terminated lengths plus the
/// force-stopped layer, `sum_{t=0}^{L-1} k^t + k^L` with `k = size - 1`.
pub fn trajectory_count(vocab: &Vocab, max_len: usize) -> Result<u64, SeqSpaceError> {
    if max_len == 0 {
        return Err(SeqSpaceError::BadMaxLen);
    }
    let k = (vocab.size - 1) as u64;
    let mut total: u64 = 0;
    let mut layer: u64 = 1; // k^t, starting at t = 0 (k^0 = 1 even for k = 0)
    for _ in 0..max_len {
        total = total.checked_add(layer).ok_or(SeqSpaceError::CountOverflow)?;
        layer = layer.checked_mul(k).ok_or(SeqSpaceError::CountOverflow)?;
    }
    // `layer` is now k^max_len, the force-stopped sequences.
    total.checked_add(layer).ok_or(SeqSpaceError::CountOverflow)
}

/// Enumerates the full universe in lexicographic token order, refusing
/// universes larger than [`DEFAULT_ENUMERATION_CAP`].
pub fn enumerate_trajectories(vocab: &Vocab, max_len: usize) -> Result<Vec<Trajectory>, SeqSpaceError> {
    enumerate_trajectories_capped(vocab, max_len, DEFAULT_ENUMERATION_CAP)
}

/// Enumerates the full universe in lexicographic token order under an explicit cap.
pub fn enumerate_trajectories_capped(
    vocab: &Vocab,
    max_len: usize,
    cap: u64,
) -> Result<Vec<Trajectory>, SeqSpaceError> {
    let count = trajectory_count(vocab, max_len)?;
    if count > cap {
        return Err(SeqSpaceError::UniverseTooLarge { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut prefix = Vec::with_capacity(max_len);
    walk(vocab, max_len, &mut prefix, &mut out);
    debug_assert_eq!(out.len() as u64, count);
    Ok(out)
}

fn walk(vocab: &Vocab, max_len: usize, prefix: &mut Vec<usize>, out: &mut Vec<Trajectory>) {
    if prefix.len() == max_len {
        out.push(Trajectory { tokens: prefix.clone(), terminated_by: Termination::MaxLen });
        return;
    }
    for t in 0..vocab.size {
        if t == vocab.eos_id {
            let mut tokens = prefix.clone();
            tokens.push(t);
            out.push(Trajectory { tokens, terminated_by: Termination::Eos });
        } else {
            prefix.push(t);
            walk(vocab, max_len, prefix, out);
            prefix.pop();
        }
    }
}

/// Enumerates every non-terminal prefix (states at which a policy still picks
/// a token): all sequences of non-EOS tokens with length `0..max_len`, in
/// lexicographic order starting from the empty prefix.
pub fn enumerate_prefixes(vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<usize>>, SeqSpaceError> {
    if max_len == 0 {
        return Err(SeqSpaceError::BadMaxLen);
    }
    // One prefix per internal node; bounded by the trajectory count, so reuse
    // the same guard against oversized universes.
    trajectory_count(vocab, max_len).and_then(|count| {
        if count > DEFAULT_ENUMERATION_CAP {
            Err(SeqSpaceError::UniverseTooLarge { count, cap: DEFAULT_ENUMERATION_CAP })
        } else {
            Ok(())
        }
    })?;
    let mut out = Vec::new();
    let mut prefix: Vec<usize> = Vec::new();
    fn rec(vocab: &Vocab, max_len: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(prefix.clone());
        // Depth max_len - 1 is still a decision point but its children are all
        // terminal, so recursion stops one level short of max_len.
        if prefix.len() + 1 >= max_len {
            return;
        }
        for t in 0..vocab.size {
            if t == vocab.eos_id {
                continue;
            }
            prefix.push(t);
            rec(vocab, max_len, prefix, out);
            prefix.pop();
        }
    }
    rec(vocab, max_len, &mut prefix, &mut out);
    Ok(out)
}
